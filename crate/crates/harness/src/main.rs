use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rtrl_harness::config::Config;
use rtrl_harness::sweep::{expand, SweepParam};
use rtrl_harness::{report, run, HarnessError, Result};

#[derive(Parser)]
#[command(name = "rtrl", version, about = "Online recurrent learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (seed, engine) cell of a config.
    Run {
        config: PathBuf,
        /// Override the output directory.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run a config over a grid of values, e.g. `--param k=0,4,8,16,32,64`.
    Sweep {
        config: PathBuf,
        #[arg(long)]
        param: SweepParam,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Aggregate the run summaries in a directory into a recovery table.
    Report { dir: PathBuf },
    /// Check a config against the schema without running it.
    Validate { config: PathBuf },
}

fn load(path: &PathBuf, output: Option<PathBuf>) -> Result<Config> {
    let mut cfg = Config::load(path)?;
    if output.is_some() {
        cfg.output_dir = output;
    }
    Ok(cfg)
}

fn execute(cfg: &Config) -> Result<()> {
    let (dir, outputs) = run::execute(cfg)?;
    let diverged = outputs.iter().filter(|o| o.summary.diverged).count();
    println!("{}: {} runs ({diverged} diverged) -> {}", cfg.name, outputs.len(), dir.display());
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config, output } => execute(&load(&config, output)?),
        Command::Sweep { config, param, output } => {
            for cfg in expand(&load(&config, output)?, &param)? {
                execute(&cfg)?;
            }
            Ok(())
        }
        Command::Report { dir } => {
            let reports = report::write_report(&dir)?;
            print!("{}", report::render_table(&reports));
            Ok(())
        }
        Command::Validate { config } => {
            let cfg = Config::load(&config)?;
            // Building one task catches CSV problems the schema cannot.
            run::build_task(&cfg, cfg.seeds[0])?;
            println!("ok: {} ({} engines x {} seeds)", cfg.name, cfg.engines.len(), cfg.seeds.len());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", HarnessError::Config(e.to_string().trim().to_owned()).to_json());
            return ExitCode::from(2);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::FAILURE
        }
    }
}
