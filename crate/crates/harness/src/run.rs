//! The online training loop and run outputs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use rtrl_core::engines::{EngineSpec, ParamGradient, RnnEngine};
use rtrl_core::loss::{argmax, cross_entropy, mse};
use rtrl_core::metrics::{
    gradient_cosine, shift_windows, spectral_analysis, windowed_accuracy, windowed_mse, write_log, MetricConventions,
    RunSummary, SpectralSnapshot, StepLog,
};
use rtrl_core::model_lstm::{LstmEngine, LstmParams};
use rtrl_core::model_rnn::{immediate_derivs, RnnParams};
use rtrl_core::optim::Optimizer;
use rtrl_core::selection::self_inclusion_policy;
use rtrl_core::tasks::{LossKind, StreamTask, Target};
use rtrl_core::tensor::{norm, JacobianState, PropagationMask};
use rtrl_core::Error as CoreError;
use serde_json::json;

use crate::config::{Config, ModelKind};
use crate::error::Result;

/// Independent random substreams derived from one master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Substream {
    Init = 0,
    Mask = 1,
    Task = 2,
    Uoro = 3,
}

pub fn substream(seed: u64, which: Substream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(which as u64);
    rng
}

pub fn build_task(cfg: &Config, seed: u64) -> Result<StreamTask> {
    Ok(cfg.task.build(&mut substream(seed, Substream::Task))?)
}

/// A model plus its gradient engine (and optional full-RTRL shadow).
trait Learner {
    /// Forward one step and propagate sensitivities; returns the output.
    fn advance(&mut self, x: &[f64], step: usize, rng: &mut ChaCha8Rng) -> rtrl_core::Result<Vec<f64>>;
    /// Method gradient and, when a shadow runs, the reference gradient.
    fn gradients(&self, dl_dy: &[f64]) -> (ParamGradient, Option<ParamGradient>);
    fn apply(&mut self, opt: &mut Optimizer, grad: &ParamGradient) -> rtrl_core::Result<()>;
    fn jacobian(&self) -> Option<&JacobianState>;
    fn mask(&self) -> Option<&PropagationMask>;
    fn mask_rebuilds(&self) -> usize;
}

struct RnnLearner {
    params: RnnParams,
    engine: RnnEngine,
    shadow: Option<RnnEngine>,
    h: Vec<f64>,
}

impl Learner for RnnLearner {
    fn advance(&mut self, x: &[f64], step: usize, rng: &mut ChaCha8Rng) -> rtrl_core::Result<Vec<f64>> {
        let out = self.params.forward(&self.h, x);
        let derivs = immediate_derivs(&out.h, &self.h, x);
        self.engine.observe(&self.params, &derivs, &out.h, step, rng)?;
        if let Some(shadow) = &mut self.shadow {
            shadow.observe(&self.params, &derivs, &out.h, step, rng)?;
        }
        self.h = out.h;
        Ok(out.y)
    }

    fn gradients(&self, dl_dy: &[f64]) -> (ParamGradient, Option<ParamGradient>) {
        let g = self.engine.gradient(&self.params, dl_dy, &self.h);
        let r = self.shadow.as_ref().map(|s| s.gradient(&self.params, dl_dy, &self.h));
        (g, r)
    }

    fn apply(&mut self, opt: &mut Optimizer, grad: &ParamGradient) -> rtrl_core::Result<()> {
        let mut flat = self.params.to_flat();
        opt.step(&mut flat, &grad.to_flat())?;
        self.params.set_flat(&flat)
    }

    fn jacobian(&self) -> Option<&JacobianState> {
        self.engine.jacobian()
    }

    fn mask(&self) -> Option<&PropagationMask> {
        self.engine.mask()
    }

    fn mask_rebuilds(&self) -> usize {
        self.engine.mask_rebuilds()
    }
}

struct LstmLearner {
    params: LstmParams,
    engine: LstmEngine,
    shadow: Option<LstmEngine>,
    h: Vec<f64>,
    c: Vec<f64>,
}

impl Learner for LstmLearner {
    fn advance(&mut self, x: &[f64], step: usize, _rng: &mut ChaCha8Rng) -> rtrl_core::Result<Vec<f64>> {
        let out = self.params.forward(&self.h, &self.c, x);
        self.engine.observe(&self.params, &out.gates, step)?;
        if let Some(shadow) = &mut self.shadow {
            shadow.observe(&self.params, &out.gates, step)?;
        }
        self.h = out.h;
        self.c = out.c;
        Ok(out.y)
    }

    fn gradients(&self, dl_dy: &[f64]) -> (ParamGradient, Option<ParamGradient>) {
        let g = self.engine.gradient(&self.params, dl_dy, &self.h);
        let r = self.shadow.as_ref().map(|s| s.gradient(&self.params, dl_dy, &self.h));
        (g, r)
    }

    fn apply(&mut self, opt: &mut Optimizer, grad: &ParamGradient) -> rtrl_core::Result<()> {
        let mut flat = self.params.to_flat();
        opt.step(&mut flat, &grad.to_flat())?;
        self.params.set_flat(&flat)
    }

    fn jacobian(&self) -> Option<&JacobianState> {
        None
    }

    fn mask(&self) -> Option<&PropagationMask> {
        Some(self.engine.mask())
    }

    fn mask_rebuilds(&self) -> usize {
        0
    }
}

/// Everything one (seed, engine) cell produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub log: Vec<StepLog>,
    pub summary: RunSummary,
    /// Concatenated sensitivity dumps at snapshot steps, when enabled.
    pub jacobian_dump: Option<Vec<u8>>,
}

impl RunOutput {
    pub fn stem(&self) -> String {
        format!("{}_{}_{}", self.summary.task, self.summary.engine, self.summary.seed)
    }
}

fn step_loss(kind: LossKind, y: &[f64], target: &Target) -> rtrl_core::Result<(f64, Vec<f64>, Option<bool>)> {
    match (kind, target) {
        (LossKind::Mse, Target::Value(t)) => {
            let (l, g) = mse(y, t);
            Ok((l, g, None))
        }
        (LossKind::CrossEntropy, Target::Class(c)) => {
            let (l, g) = cross_entropy(y, *c);
            Ok((l, g, Some(argmax(y) == *c)))
        }
        _ => Err(CoreError::Invalid("task target does not match its loss".into())),
    }
}

fn config_echo(cfg: &Config) -> serde_json::Value {
    let mut echo = serde_json::to_value(cfg).unwrap_or(serde_json::Value::Null);
    if let Some(map) = echo.as_object_mut() {
        map.remove("output_dir");
    }
    echo
}

fn init_metadata(kind: ModelKind) -> serde_json::Value {
    match kind {
        ModelKind::Rnn => json!({
            "w_hh": "N(0, 1/n)", "w_ih": "N(0, 1/m)", "w_out": "N(0, 1/n)",
            "biases": "zero", "h0": "zero",
        }),
        ModelKind::Lstm => json!({
            "gate_order": rtrl_core::model_lstm::GATE_ORDER,
            "gate_weights_h": "N(0, 1/n)", "gate_weights_x": "N(0, 1/m)", "w_out": "N(0, 1/n)",
            "biases": "zero", "h0": "zero", "c0": "zero", "peepholes": false,
        }),
    }
}

fn selection_metadata(engine: &EngineSpec, n: usize, kind: ModelKind) -> serde_json::Value {
    match engine {
        EngineSpec::SparseRtrl { k, strategy } => json!({
            "strategy": strategy.name(),
            "k": k,
            "recompute_every": strategy.recompute_every(),
            "self_included": self_inclusion_policy(*strategy, *k, n),
            "ring_odd_k": "extra neighbour at i + ceil(k/2)",
            "tie_break": "lower index",
            "dynamic_score": "|W[i,l]| * ||J[l,:]||",
            "weight_score": match kind {
                ModelKind::Rnn => "|W_hh[i,l]|",
                ModelKind::Lstm => "max over gates of |W_q,hh[i,l]|",
            },
            "mask_applies_to": "all parameter groups",
        }),
        _ => serde_json::Value::Null,
    }
}

/// Run one engine on one seed. The task is passed in so every engine of a
/// seed sees the same stream.
pub fn run_single(cfg: &Config, task: &StreamTask, engine: &EngineSpec, seed: u64) -> Result<RunOutput> {
    let n = cfg.model.hidden;
    let (m, o) = (task.input_dim, task.output_dim);
    let mut init_rng = substream(seed, Substream::Init);
    let mut mask_rng = substream(seed, Substream::Mask);
    let mut uoro_rng = substream(seed, Substream::Uoro);
    engine.validate(n)?;

    let mut learner: Box<dyn Learner> = match cfg.model.kind {
        ModelKind::Rnn => {
            let params = RnnParams::init(n, m, o, &mut init_rng);
            let engine_state = RnnEngine::new(engine.clone(), &params, &mut mask_rng)?;
            let shadow = if cfg.diagnostics.cosine_reference {
                Some(RnnEngine::new(EngineSpec::FullRtrl, &params, &mut mask_rng.clone())?)
            } else {
                None
            };
            Box::new(RnnLearner { params, engine: engine_state, shadow, h: vec![0.0; n] })
        }
        ModelKind::Lstm => {
            let params = LstmParams::init(n, m, o, &mut init_rng);
            let engine_state = LstmEngine::new(engine.clone(), &params, &mut mask_rng)?;
            let shadow = if cfg.diagnostics.cosine_reference {
                Some(LstmEngine::new(EngineSpec::FullRtrl, &params, &mut mask_rng.clone())?)
            } else {
                None
            };
            Box::new(LstmLearner { params, engine: engine_state, shadow, h: vec![0.0; n], c: vec![0.0; n] })
        }
    };
    let num_params = match cfg.model.kind {
        ModelKind::Rnn => n * n + n * m + n + o * n + o,
        ModelKind::Lstm => 4 * n * (n + m + 1) + o * n + o,
    };
    let mut opt = cfg.optimizer.build(num_params);

    let diag = &cfg.diagnostics;
    let mut log = Vec::with_capacity(task.len());
    let mut hits = Vec::new();
    let mut spectral = Vec::new();
    let mut dump = diag.jacobian_dumps.then(Vec::new);
    let mut diverged_step = None;
    let post_start = task.shift_points.first().copied().unwrap_or(0);
    let mut ratios = Vec::new();

    for (t, s) in task.steps.iter().enumerate() {
        let step_no = t + 1;
        let outcome = (|| -> rtrl_core::Result<StepLog> {
            let y = learner.advance(&s.x, step_no, &mut uoro_rng)?;
            let (loss, dl_dy, hit) = step_loss(task.loss, &y, &s.target)?;
            if !loss.is_finite() {
                return Err(CoreError::Diverged { step: step_no });
            }
            let mut row = StepLog { t, loss, loss_active: s.loss_active, cos_ref: None, grad_norm: None };
            if s.loss_active {
                if let Some(hit) = hit {
                    hits.push(hit);
                }
                let (g, reference) = learner.gradients(&dl_dy);
                if !g.is_finite() {
                    return Err(CoreError::Diverged { step: step_no });
                }
                let alignment = reference.as_ref().and_then(|r| gradient_cosine(&g, r));
                row.cos_ref = alignment.map(|a| a.cosine);
                if let Some(a) = alignment.filter(|_| t >= post_start) {
                    ratios.push(a.magnitude_ratio);
                }
                row.grad_norm = Some(norm(&g.to_flat()));
                learner.apply(&mut opt, &g)?;
            }
            Ok(row)
        })();
        match outcome {
            Ok(row) => log.push(row),
            Err(CoreError::Diverged { .. }) => {
                diverged_step = Some(t);
                break;
            }
            Err(e) => return Err(e.into()),
        }

        let snapshot_due = diag.spectral_every > 0 && (t % diag.spectral_every == 0 || task.shift_points.contains(&t));
        if snapshot_due {
            if let Some(j) = learner.jacobian() {
                spectral.push(match spectral_analysis(j) {
                    Ok(sp) => SpectralSnapshot { step: t, spectrum: Some(sp), undefined: None },
                    Err(e) => SpectralSnapshot { step: t, spectrum: None, undefined: Some(e.to_string()) },
                });
                if let Some(buf) = dump.as_mut() {
                    j.write_dump(t as u64, buf)?;
                }
            }
        }
    }

    let (pre, post) = shift_windows(&log, &task.shift_points, task.len(), diag.window);
    let post_rows: Vec<&StepLog> = log.iter().filter(|r| r.t >= post_start).collect();
    let cos: Vec<f64> = post_rows.iter().filter_map(|r| r.cos_ref).collect();
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let summary = RunSummary {
        task: task.name.clone(),
        engine: engine.label(),
        seed,
        config: config_echo(cfg),
        conventions: MetricConventions::standard(diag.window),
        steps: log.len(),
        shift_points: task.shift_points.clone(),
        pre_shift_mse: pre,
        post_shift_mse: post,
        final_mse: windowed_mse(&log, task.len(), diag.window),
        accuracy: if task.loss == LossKind::CrossEntropy { windowed_accuracy(&hits, diag.window) } else { None },
        diverged: diverged_step.is_some(),
        diverged_step,
        mean_cos_ref_post: mean(&cos),
        mean_magnitude_ratio_post: mean(&ratios),
        spectral,
        masks: learner.mask().map(|mk| mk.rows().to_vec()),
        mask_rebuilds: learner.mask_rebuilds(),
        selection: selection_metadata(engine, n, cfg.model.kind),
        task_metadata: task.metadata.clone(),
        init: init_metadata(cfg.model.kind),
    };
    Ok(RunOutput { log, summary, jacobian_dump: dump })
}

/// Every (seed, engine) cell of a config. Cells run in parallel; the result
/// order is seed-major, engine-minor regardless of scheduling.
pub fn run_config(cfg: &Config) -> Result<Vec<RunOutput>> {
    let tasks: Vec<(u64, StreamTask)> = cfg
        .seeds
        .iter()
        .map(|&seed| Ok((seed, build_task(cfg, seed)?)))
        .collect::<Result<_>>()?;
    let cells: Vec<(usize, usize)> = (0..tasks.len())
        .flat_map(|s| (0..cfg.engines.len()).map(move |e| (s, e)))
        .collect();
    cells
        .par_iter()
        .map(|&(s, e)| run_single(cfg, &tasks[s].1, &cfg.engines[e], tasks[s].0))
        .collect()
}

pub fn write_outputs(dir: &Path, outputs: &[RunOutput]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for out in outputs {
        let stem = out.stem();
        let csv_path = dir.join(format!("{stem}.csv"));
        write_log(&out.log, fs::File::create(&csv_path)?)?;
        let json_path = dir.join(format!("{stem}.json"));
        fs::write(&json_path, serde_json::to_string_pretty(&out.summary)? + "\n")?;
        written.push(csv_path);
        written.push(json_path);
        if let Some(bytes) = &out.jacobian_dump {
            let jac_path = dir.join(format!("{stem}.jac"));
            fs::write(&jac_path, bytes)?;
            written.push(jac_path);
        }
    }
    Ok(written)
}

/// Run a config and write its outputs; returns the output directory.
pub fn execute(cfg: &Config) -> Result<(PathBuf, Vec<RunOutput>)> {
    let dir = cfg.resolve_output_dir();
    let outputs = run_config(cfg)?;
    write_outputs(&dir, &outputs)?;
    Ok((dir, outputs))
}
