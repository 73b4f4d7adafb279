//! Aggregation of run summaries into recovery tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rtrl_core::metrics::{gap_recovery, seed_dispersion, RunSummary};
use serde::{Deserialize, Serialize};

use crate::error::{HarnessError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub engine: String,
    /// Propagated paths per unit (0 for traces, n for full RTRL), when defined.
    pub k: Option<usize>,
    pub seeds: usize,
    pub diverged: usize,
    pub mean_mse: Option<f64>,
    pub sd_mse: Option<f64>,
    /// Mean and sd of per-seed recoveries against the same seed's floor and ceiling.
    pub recovery_mean: Option<f64>,
    pub recovery_sd: Option<f64>,
    /// Recovery computed from the cross-seed mean errors.
    pub recovery_of_means: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: String,
    /// Which error each row aggregates.
    pub metric: String,
    pub floor: Option<String>,
    pub ceiling: Option<String>,
    pub rows: Vec<ReportRow>,
}

pub fn load_summaries(dir: &Path) -> Result<Vec<RunSummary>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .filter(|p| p.file_name().is_some_and(|f| f != "report.json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| HarnessError::Report(format!("{}: {e}", p.display())))
        })
        .collect()
}

fn hidden_size(s: &RunSummary) -> Option<usize> {
    s.config.get("model")?.get("hidden")?.as_u64().map(|v| v as usize)
}

/// Paths per unit implied by an engine label.
pub fn engine_paths(label: &str, n: Option<usize>) -> Option<usize> {
    match label {
        "full" => n,
        "traces" => Some(0),
        _ => label.strip_prefix('k')?.split('-').next()?.parse().ok(),
    }
}

/// Error a run contributes: first post-shift window for shifted tasks,
/// otherwise the final window. Diverged runs contribute nothing.
pub fn run_error(s: &RunSummary) -> Option<f64> {
    if s.diverged {
        return None;
    }
    if s.shift_points.is_empty() {
        s.final_mse
    } else {
        s.first_post_shift()
    }
}

fn pick_endpoint(labels: &[String], preferred: &str, paths: impl Fn(&str) -> Option<usize>, want: Option<usize>) -> Option<String> {
    if labels.iter().any(|l| l == preferred) {
        return Some(preferred.to_owned());
    }
    want.and_then(|w| labels.iter().find(|l| paths(l) == Some(w)).cloned())
}

pub fn build_report(summaries: &[RunSummary]) -> Result<Vec<TaskReport>> {
    let mut by_task: BTreeMap<&str, BTreeMap<&str, Vec<&RunSummary>>> = BTreeMap::new();
    for s in summaries {
        by_task.entry(&s.task).or_default().entry(&s.engine).or_default().push(s);
    }
    let mut reports = Vec::new();
    for (task, engines) in by_task {
        let n = engines.values().flatten().find_map(|s| hidden_size(s));
        let paths = |l: &str| engine_paths(l, n);
        let labels: Vec<String> = engines.keys().map(|l| l.to_string()).collect();
        let floor = pick_endpoint(&labels, "traces", paths, Some(0));
        let ceiling = pick_endpoint(&labels, "full", paths, n);
        let per_seed = |label: &Option<String>| -> BTreeMap<u64, f64> {
            label
                .as_ref()
                .and_then(|l| engines.get(l.as_str()))
                .map(|runs| runs.iter().filter_map(|s| run_error(s).map(|e| (s.seed, e))).collect())
                .unwrap_or_default()
        };
        let floor_seed = per_seed(&floor);
        let ceiling_seed = per_seed(&ceiling);
        let mean_of = |m: &BTreeMap<u64, f64>| (!m.is_empty()).then(|| m.values().sum::<f64>() / m.len() as f64);
        let (floor_mean, ceiling_mean) = (mean_of(&floor_seed), mean_of(&ceiling_seed));

        let mut rows: Vec<ReportRow> = engines
            .iter()
            .map(|(label, runs)| {
                let errors: Vec<f64> = runs.iter().filter_map(|s| run_error(s)).collect();
                let disp = seed_dispersion(&errors).ok();
                let mean_mse = disp.map(|d| d.mean).or(errors.first().copied());
                let recoveries: Vec<f64> = runs
                    .iter()
                    .filter_map(|s| {
                        let e = run_error(s)?;
                        let lo = floor_seed.get(&s.seed)?;
                        let hi = ceiling_seed.get(&s.seed)?;
                        gap_recovery(*lo, e, *hi).ok()
                    })
                    .collect();
                let rec = seed_dispersion(&recoveries).ok();
                ReportRow {
                    engine: label.to_string(),
                    k: paths(label),
                    seeds: runs.len(),
                    diverged: runs.iter().filter(|s| s.diverged).count(),
                    mean_mse,
                    sd_mse: disp.map(|d| d.sd),
                    recovery_mean: rec.map(|d| d.mean).or(recoveries.first().copied()),
                    recovery_sd: rec.map(|d| d.sd),
                    recovery_of_means: match (floor_mean, mean_mse, ceiling_mean) {
                        (Some(lo), Some(e), Some(hi)) => gap_recovery(lo, e, hi).ok(),
                        _ => None,
                    },
                }
            })
            .collect();
        rows.sort_by(|a, b| a.k.unwrap_or(usize::MAX).cmp(&b.k.unwrap_or(usize::MAX)).then(a.engine.cmp(&b.engine)));
        let shifted = engines.values().flatten().any(|s| !s.shift_points.is_empty());
        reports.push(TaskReport {
            task: task.to_string(),
            metric: if shifted { "post-shift windowed error" } else { "final windowed error" }.into(),
            floor,
            ceiling,
            rows,
        });
    }
    Ok(reports)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x}"))
}

pub fn report_csv(reports: &[TaskReport]) -> String {
    let mut out = String::from("task,engine,k,seeds,diverged,mean_mse,sd_mse,recovery_mean,recovery_sd,recovery_of_means\n");
    for r in reports {
        for row in &r.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.task,
                row.engine,
                row.k.map_or_else(String::new, |k| k.to_string()),
                row.seeds,
                row.diverged,
                opt(row.mean_mse),
                opt(row.sd_mse),
                opt(row.recovery_mean),
                opt(row.recovery_sd),
                opt(row.recovery_of_means),
            );
        }
    }
    out
}

pub fn render_table(reports: &[TaskReport]) -> String {
    let fmt = |v: Option<f64>, prec: usize| v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"));
    let mut out = String::new();
    for r in reports {
        let _ = writeln!(
            out,
            "{} ({}; floor {}, ceiling {})",
            r.task,
            r.metric,
            r.floor.as_deref().unwrap_or("-"),
            r.ceiling.as_deref().unwrap_or("-")
        );
        let _ = writeln!(out, "{:<18} {:>4} {:>5} {:>12} {:>12} {:>10} {:>8}", "engine", "k", "div", "mean", "sd", "recovery", "sd");
        for row in &r.rows {
            let _ = writeln!(
                out,
                "{:<18} {:>4} {:>5} {:>12} {:>12} {:>10} {:>8}",
                row.engine,
                row.k.map_or_else(|| "-".into(), |k| k.to_string()),
                format!("{}/{}", row.diverged, row.seeds),
                fmt(row.mean_mse, 6),
                fmt(row.sd_mse, 6),
                fmt(row.recovery_mean, 1),
                fmt(row.recovery_sd, 1),
            );
        }
        out.push('\n');
    }
    out
}

/// Build the report for a directory and write `report.json` / `report.csv` into it.
pub fn write_report(dir: &Path) -> Result<Vec<TaskReport>> {
    let summaries = load_summaries(dir)?;
    if summaries.is_empty() {
        return Err(HarnessError::Report(format!("no run summaries in {}", dir.display())));
    }
    let reports = build_report(&summaries)?;
    fs::write(dir.join("report.json"), serde_json::to_string_pretty(&reports)? + "\n")?;
    fs::write(dir.join("report.csv"), report_csv(&reports))?;
    Ok(reports)
}
