//! Streaming tasks with declared shift points.
//!
//! Every task is materialized up front as a vector of steps; `x_t` is the
//! input at stream index `t`, and a shift point `s` means index `s` is the
//! first step generated by the new regime.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Value(Vec<f64>),
    Class(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    CrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub x: Vec<f64>,
    pub target: Target,
    pub loss_active: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamTask {
    pub name: String,
    pub input_dim: usize,
    pub output_dim: usize,
    pub loss: LossKind,
    pub steps: Vec<Step>,
    pub shift_points: Vec<usize>,
    pub metadata: serde_json::Value,
}

impl StreamTask {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

macro_rules! defaults {
    ($($name:ident: $ty:ty = $val:expr;)*) => {
        $(fn $name() -> $ty { $val })*
    };
}

defaults! {
    d_sine_len: usize = 2000;
    d_sine_shift: usize = 1000;
    d_f1: f64 = 0.1;
    d_f2: f64 = 0.3;
    d_true: bool = true;
    d_multi_len: usize = 4000;
    d_multi_freqs: Vec<f64> = vec![0.1, 0.3, 0.05, 0.2];
    d_lorenz_len: usize = 4000;
    d_lorenz_shift: usize = 2000;
    d_rho1: f64 = 28.0;
    d_rho2: f64 = 20.0;
    d_dt: f64 = 0.01;
    d_sigma: f64 = 10.0;
    d_beta: f64 = 8.0 / 3.0;
    d_burn_in: usize = 1000;
    d_initial: [f64; 3] = [1.0, 1.0, 1.0];
    d_delay: usize = 5;
    d_alphabet: usize = 8;
    d_symbols: usize = 5;
    d_episodes: usize = 300;
    d_adding_len: usize = 50;
    d_sequences: usize = 120;
}

/// Declarative description of a task; `build` materializes it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    SineShift {
        #[serde(default = "d_sine_len")]
        length: usize,
        #[serde(default = "d_sine_shift")]
        shift: usize,
        #[serde(default = "d_f1")]
        f1: f64,
        #[serde(default = "d_f2")]
        f2: f64,
        #[serde(default = "d_true")]
        phase_continuous: bool,
    },
    MultiSine {
        #[serde(default = "d_multi_len")]
        length: usize,
        #[serde(default = "d_multi_freqs")]
        freqs: Vec<f64>,
    },
    Lorenz {
        #[serde(default = "d_lorenz_len")]
        length: usize,
        #[serde(default = "d_lorenz_shift")]
        shift: usize,
        #[serde(default = "d_rho1")]
        rho1: f64,
        #[serde(default = "d_rho2")]
        rho2: f64,
        #[serde(default = "d_dt")]
        dt: f64,
        #[serde(default = "d_sigma")]
        sigma: f64,
        #[serde(default = "d_beta")]
        beta: f64,
        #[serde(default = "d_burn_in")]
        burn_in: usize,
        #[serde(default = "d_initial")]
        initial: [f64; 3],
    },
    Copy {
        #[serde(default = "d_delay")]
        delay: usize,
        #[serde(default = "d_alphabet")]
        alphabet: usize,
        #[serde(default = "d_symbols")]
        symbols: usize,
        #[serde(default = "d_episodes")]
        episodes: usize,
    },
    Adding {
        #[serde(default = "d_adding_len")]
        length: usize,
        #[serde(default = "d_sequences")]
        sequences: usize,
    },
    Csv {
        path: PathBuf,
        input_cols: Vec<String>,
        target_cols: Vec<String>,
        split_step: usize,
        #[serde(default)]
        pca_components: Option<usize>,
        #[serde(default)]
        zscore: bool,
    },
}

impl TaskSpec {
    pub fn name(&self) -> &'static str {
        match self {
            TaskSpec::SineShift { .. } => "sine_shift",
            TaskSpec::MultiSine { .. } => "multi_sine",
            TaskSpec::Lorenz { .. } => "lorenz",
            TaskSpec::Copy { .. } => "copy",
            TaskSpec::Adding { .. } => "adding",
            TaskSpec::Csv { .. } => "csv",
        }
    }

    pub fn sine() -> Self {
        TaskSpec::SineShift {
            length: d_sine_len(),
            shift: d_sine_shift(),
            f1: d_f1(),
            f2: d_f2(),
            phase_continuous: true,
        }
    }

    pub fn lorenz() -> Self {
        TaskSpec::Lorenz {
            length: d_lorenz_len(),
            shift: d_lorenz_shift(),
            rho1: d_rho1(),
            rho2: d_rho2(),
            dt: d_dt(),
            sigma: d_sigma(),
            beta: d_beta(),
            burn_in: d_burn_in(),
            initial: d_initial(),
        }
    }

    /// Input and output dimensions without building the stream.
    pub fn dims(&self) -> Option<(usize, usize)> {
        match self {
            TaskSpec::SineShift { .. } | TaskSpec::MultiSine { .. } => Some((1, 1)),
            TaskSpec::Lorenz { .. } => Some((3, 3)),
            TaskSpec::Copy { alphabet, .. } => Some((alphabet + 2, *alphabet)),
            TaskSpec::Adding { .. } => Some((2, 1)),
            TaskSpec::Csv { .. } => None,
        }
    }

    pub fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<StreamTask> {
        match self {
            TaskSpec::SineShift { length, shift, f1, f2, phase_continuous } => {
                sine_shift(*length, *shift, *f1, *f2, *phase_continuous)
            }
            TaskSpec::MultiSine { length, freqs } => multi_sine(freqs, *length),
            TaskSpec::Lorenz { length, shift, rho1, rho2, dt, sigma, beta, burn_in, initial } => {
                lorenz_stream(&LorenzConfig {
                    length: *length,
                    shift: *shift,
                    rho1: *rho1,
                    rho2: *rho2,
                    dt: *dt,
                    sigma: *sigma,
                    beta: *beta,
                    burn_in: *burn_in,
                    initial: *initial,
                })
            }
            TaskSpec::Copy { delay, alphabet, symbols, episodes } => {
                copy_task(*delay, *alphabet, *symbols, *episodes, rng)
            }
            TaskSpec::Adding { length, sequences } => adding_problem(*length, *sequences, rng),
            TaskSpec::Csv { path, input_cols, target_cols, split_step, pca_components, zscore } => csv_stream(
                path,
                input_cols,
                target_cols,
                *split_step,
                &Preprocess {
                    pca_components: *pca_components,
                    zscore: *zscore,
                },
            ),
        }
    }
}

fn scalar_stream(name: &str, signal: &[f64], shift_points: Vec<usize>, metadata: serde_json::Value) -> StreamTask {
    let steps = signal
        .windows(2)
        .map(|w| Step {
            x: vec![w[0]],
            target: Target::Value(vec![w[1]]),
            loss_active: true,
        })
        .collect();
    StreamTask {
        name: name.into(),
        input_dim: 1,
        output_dim: 1,
        loss: LossKind::Mse,
        steps,
        shift_points,
        metadata,
    }
}

/// Samples `s_0..=s_T` of a sine whose per-step frequency is `freq(t)` for
/// the increment `t -> t+1`, phase accumulated across changes.
fn piecewise_sine(length: usize, freq: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut phase = 0.0f64;
    let mut s = Vec::with_capacity(length + 1);
    for t in 0..=length {
        s.push(phase.sin());
        phase += freq(t);
    }
    s
}

/// `x_t = s_t`, target `s_{t+1}`, with `s_t = sin(phase_t)`. Without phase
/// continuity the new regime restarts from `sin(f2 * t)`.
pub fn sine_shift(length: usize, shift: usize, f1: f64, f2: f64, phase_continuous: bool) -> Result<StreamTask> {
    if shift > length {
        return Err(Error::Invalid(format!("shift {shift} beyond length {length}")));
    }
    let signal = if phase_continuous {
        piecewise_sine(length, |t| if t < shift { f1 } else { f2 })
    } else {
        (0..=length)
            .map(|t| if t <= shift { (f1 * t as f64).sin() } else { (f2 * t as f64).sin() })
            .collect()
    };
    Ok(scalar_stream(
        "sine_shift",
        &signal,
        vec![shift],
        json!({"length": length, "shift": shift, "f1": f1, "f2": f2, "phase_continuous": phase_continuous,
               "semantics": "s_t = sin(phase_t), phase advances by f per step"}),
    ))
}

/// Equal-length regimes, one per frequency, phase-continuous.
pub fn multi_sine(freqs: &[f64], length: usize) -> Result<StreamTask> {
    if freqs.is_empty() {
        return Err(Error::Invalid("multi_sine needs at least one frequency".into()));
    }
    let r = freqs.len();
    let regime = length / r;
    if regime == 0 {
        return Err(Error::Invalid("length shorter than regime count".into()));
    }
    let shifts: Vec<usize> = (1..r).map(|i| i * regime).collect();
    let signal = piecewise_sine(length, |t| freqs[(t / regime).min(r - 1)]);
    Ok(scalar_stream(
        "multi_sine",
        &signal,
        shifts,
        json!({"length": length, "freqs": freqs, "regime_length": regime}),
    ))
}

pub fn lorenz_deriv(s: [f64; 3], sigma: f64, rho: f64, beta: f64) -> [f64; 3] {
    [
        sigma * (s[1] - s[0]),
        s[0] * (rho - s[2]) - s[1],
        s[0] * s[1] - beta * s[2],
    ]
}

/// Classic fourth-order Runge-Kutta step.
pub fn rk4_step(f: impl Fn([f64; 3]) -> [f64; 3], s: [f64; 3], dt: f64) -> [f64; 3] {
    let add = |a: [f64; 3], b: [f64; 3], h: f64| [a[0] + h * b[0], a[1] + h * b[1], a[2] + h * b[2]];
    let k1 = f(s);
    let k2 = f(add(s, k1, dt / 2.0));
    let k3 = f(add(s, k2, dt / 2.0));
    let k4 = f(add(s, k3, dt));
    std::array::from_fn(|i| s[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LorenzConfig {
    pub length: usize,
    pub shift: usize,
    pub rho1: f64,
    pub rho2: f64,
    pub dt: f64,
    pub sigma: f64,
    pub beta: f64,
    /// RK4 steps at `rho1` discarded before the stream starts.
    pub burn_in: usize,
    pub initial: [f64; 3],
}

/// Raw (unnormalized) trajectory `state_0..=state_T`.
pub fn lorenz_trajectory(cfg: &LorenzConfig) -> Vec<[f64; 3]> {
    let (sigma, beta) = (cfg.sigma, cfg.beta);
    let mut s = cfg.initial;
    for _ in 0..cfg.burn_in {
        s = rk4_step(|v| lorenz_deriv(v, sigma, cfg.rho1, beta), s, cfg.dt);
    }
    let mut out = Vec::with_capacity(cfg.length + 1);
    out.push(s);
    for t in 0..cfg.length {
        let rho = if t < cfg.shift { cfg.rho1 } else { cfg.rho2 };
        s = rk4_step(|v| lorenz_deriv(v, sigma, rho, beta), s, cfg.dt);
        out.push(s);
    }
    out
}

/// Next-state prediction on the Lorenz system with a mid-stream change of
/// `rho`. Inputs and targets are z-scored per dimension with the mean and
/// (population) standard deviation of the pre-shift inputs.
pub fn lorenz_stream(cfg: &LorenzConfig) -> Result<StreamTask> {
    if cfg.shift == 0 || cfg.shift > cfg.length {
        return Err(Error::Invalid(format!("shift {} must lie in 1..={}", cfg.shift, cfg.length)));
    }
    let traj = lorenz_trajectory(cfg);
    let pre = &traj[..cfg.shift];
    let mut mean = [0.0; 3];
    let mut sd = [0.0; 3];
    for d in 0..3 {
        mean[d] = pre.iter().map(|s| s[d]).sum::<f64>() / pre.len() as f64;
        let var = pre.iter().map(|s| (s[d] - mean[d]).powi(2)).sum::<f64>() / pre.len() as f64;
        sd[d] = if var > 0.0 { var.sqrt() } else { 1.0 };
    }
    let norm = |s: &[f64; 3]| -> Vec<f64> { (0..3).map(|d| (s[d] - mean[d]) / sd[d]).collect() };
    let steps = traj
        .windows(2)
        .map(|w| Step {
            x: norm(&w[0]),
            target: Target::Value(norm(&w[1])),
            loss_active: true,
        })
        .collect();
    Ok(StreamTask {
        name: "lorenz".into(),
        input_dim: 3,
        output_dim: 3,
        loss: LossKind::Mse,
        steps,
        shift_points: vec![cfg.shift],
        metadata: json!({
            "length": cfg.length, "shift": cfg.shift, "rho1": cfg.rho1, "rho2": cfg.rho2,
            "dt": cfg.dt, "sigma": cfg.sigma, "beta": cfg.beta, "burn_in": cfg.burn_in,
            "initial": cfg.initial, "normalization": "z-score by pre-shift statistics",
            "mean": mean, "sd": sd,
        }),
    })
}

/// Phase of a step inside a copy-task episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CopyPhase {
    Input,
    Delay,
    Output,
}

/// Phase of position `pos` within an episode of `symbols` inputs followed
/// by `delay` blanks and `symbols` recall steps.
pub fn copy_phase(pos: usize, symbols: usize, delay: usize) -> CopyPhase {
    if pos < symbols {
        CopyPhase::Input
    } else if pos < symbols + delay {
        CopyPhase::Delay
    } else {
        CopyPhase::Output
    }
}

/// Continuous stream of copy episodes. Input is one-hot over
/// `alphabet + 2` tokens (symbols, then blank, then a recall cue); the
/// output is `alphabet` logits trained with cross-entropy during recall only.
pub fn copy_task<R: Rng + ?Sized>(
    delay: usize,
    alphabet: usize,
    symbols: usize,
    episodes: usize,
    rng: &mut R,
) -> Result<StreamTask> {
    if alphabet == 0 || symbols == 0 {
        return Err(Error::Invalid("copy task needs a non-empty alphabet and sequence".into()));
    }
    let blank = alphabet;
    let cue = alphabet + 1;
    let one_hot = |k: usize| {
        let mut v = vec![0.0; alphabet + 2];
        v[k] = 1.0;
        v
    };
    let ep_len = 2 * symbols + delay;
    let mut steps = Vec::with_capacity(episodes * ep_len);
    for _ in 0..episodes {
        let seq: Vec<usize> = (0..symbols).map(|_| rng.random_range(0..alphabet)).collect();
        for pos in 0..ep_len {
            let step = match copy_phase(pos, symbols, delay) {
                CopyPhase::Input => Step {
                    x: one_hot(seq[pos]),
                    target: Target::Class(seq[pos]),
                    loss_active: false,
                },
                CopyPhase::Delay => Step {
                    x: one_hot(blank),
                    target: Target::Class(0),
                    loss_active: false,
                },
                CopyPhase::Output => {
                    let sym = seq[pos - symbols - delay];
                    Step {
                        x: one_hot(cue),
                        target: Target::Class(sym),
                        loss_active: true,
                    }
                }
            };
            steps.push(step);
        }
    }
    Ok(StreamTask {
        name: "copy".into(),
        input_dim: alphabet + 2,
        output_dim: alphabet,
        loss: LossKind::CrossEntropy,
        steps,
        shift_points: vec![],
        metadata: json!({"delay": delay, "alphabet": alphabet, "symbols": symbols,
                         "episodes": episodes, "episode_length": ep_len,
                         "chance_accuracy": 1.0 / alphabet as f64}),
    })
}

/// Continuous stream of adding-problem sequences: `x_t = (u_t, marker_t)`
/// with `u ~ U(0,1)`, one marker in each half, loss only at the final step
/// with target the sum of the two marked values.
pub fn adding_problem<R: Rng + ?Sized>(length: usize, sequences: usize, rng: &mut R) -> Result<StreamTask> {
    if length < 2 {
        return Err(Error::Invalid("adding sequences need at least two steps".into()));
    }
    let half = length / 2;
    let mut steps = Vec::with_capacity(length * sequences);
    for _ in 0..sequences {
        let values: Vec<f64> = (0..length).map(|_| rng.random::<f64>()).collect();
        let first = rng.random_range(0..half);
        let second = rng.random_range(half..length);
        let sum = values[first] + values[second];
        for t in 0..length {
            let marker = if t == first || t == second { 1.0 } else { 0.0 };
            let last = t == length - 1;
            steps.push(Step {
                x: vec![values[t], marker],
                target: Target::Value(vec![if last { sum } else { 0.0 }]),
                loss_active: last,
            });
        }
    }
    Ok(StreamTask {
        name: "adding".into(),
        input_dim: 2,
        output_dim: 1,
        loss: LossKind::Mse,
        steps,
        shift_points: vec![],
        metadata: json!({"length": length, "sequences": sequences,
                         "markers": "one uniform in each half",
                         "baseline_mse": 1.0 / 6.0}),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Preprocess {
    pub pca_components: Option<usize>,
    pub zscore: bool,
}

/// Per-column mean and population standard deviation over `rows`.
fn column_stats(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let d = rows.first().map_or(0, Vec::len);
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; d];
    for r in rows {
        for ((s, v), m) in sd.iter_mut().zip(r).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    for s in &mut sd {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }
    (mean, sd)
}

/// Principal axes fitted on `fit_rows`: (centering mean, components as rows,
/// explained variance ratio of each kept component).
pub fn fit_pca(fit_rows: &[Vec<f64>], components: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>, Vec<f64>)> {
    let d = fit_rows.first().map_or(0, Vec::len);
    if components == 0 || components > d {
        return Err(Error::Invalid(format!("cannot keep {components} components of {d} columns")));
    }
    if fit_rows.len() < 2 {
        return Err(Error::Invalid("PCA needs at least two fitting rows".into()));
    }
    let (mean, _) = column_stats(fit_rows);
    let n = fit_rows.len();
    let centered = DMatrix::from_fn(n, d, |i, j| fit_rows[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let total: f64 = eig.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let mut axes = Vec::with_capacity(components);
    let mut ratios = Vec::with_capacity(components);
    for &c in order.iter().take(components) {
        let v = eig.eigenvectors.column(c);
        // Sign convention: largest-magnitude loading positive.
        let pivot = (0..d).max_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs())).unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        axes.push((0..d).map(|j| sign * v[j]).collect());
        ratios.push(if total > 0.0 { eig.eigenvalues[c].max(0.0) / total } else { 0.0 });
    }
    Ok((mean, axes, ratios))
}

/// Stream rows of a CSV file. Transforms are fitted on rows before
/// `split_step` and applied unchanged to every row.
pub fn csv_stream(
    path: &Path,
    input_cols: &[String],
    target_cols: &[String],
    split_step: usize,
    pre: &Preprocess,
) -> Result<StreamTask> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Ingest { row: 0, message: e.to_string() })?;
    let headers = reader
        .headers()
        .map_err(|e| Error::Ingest { row: 0, message: e.to_string() })?
        .clone();
    let index_of = |name: &String| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Ingest { row: 0, message: format!("missing column {name:?}") })
    };
    let in_idx: Vec<usize> = input_cols.iter().map(index_of).collect::<Result<_>>()?;
    let tgt_idx: Vec<usize> = target_cols.iter().map(index_of).collect::<Result<_>>()?;
    if in_idx.is_empty() || tgt_idx.is_empty() {
        return Err(Error::Invalid("csv stream needs input and target columns".into()));
    }

    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let row = row + 1;
        let rec = rec.map_err(|e| Error::Ingest { row, message: e.to_string() })?;
        let field = |i: usize| -> Result<f64> {
            let raw = rec
                .get(i)
                .ok_or_else(|| Error::Ingest { row, message: format!("missing field {i}") })?;
            raw.trim()
                .parse::<f64>()
                .map_err(|_| Error::Ingest { row, message: format!("non-numeric field {raw:?}") })
        };
        inputs.push(in_idx.iter().map(|&i| field(i)).collect::<Result<Vec<_>>>()?);
        targets.push(tgt_idx.iter().map(|&i| field(i)).collect::<Result<Vec<_>>>()?);
    }
    if split_step > inputs.len() {
        return Err(Error::Invalid(format!("split_step {split_step} beyond {} rows", inputs.len())));
    }

    let mut meta = json!({
        "path": path.display().to_string(), "input_cols": input_cols, "target_cols": target_cols,
        "split_step": split_step, "rows": inputs.len(),
    });
    if let Some(k) = pre.pca_components {
        let (mean, axes, ratios) = fit_pca(&inputs[..split_step], k)?;
        for row in &mut inputs {
            let centered: Vec<f64> = row.iter().zip(&mean).map(|(v, m)| v - m).collect();
            *row = axes.iter().map(|a| crate::tensor::dot(a, &centered)).collect();
        }
        meta["pca_components"] = json!(k);
        meta["pca_explained_variance_ratio"] = json!(ratios);
    }
    if pre.zscore {
        if split_step == 0 {
            return Err(Error::Invalid("z-scoring needs rows before split_step".into()));
        }
        for block in [&mut inputs, &mut targets] {
            let (mean, sd) = column_stats(&block[..split_step]);
            for row in block.iter_mut() {
                for ((v, m), s) in row.iter_mut().zip(&mean).zip(&sd) {
                    *v = (*v - m) / s;
                }
            }
        }
        meta["zscore"] = json!("pre-split mean and population sd");
    }

    let input_dim = inputs.first().map_or(in_idx.len(), Vec::len);
    let steps = inputs
        .into_iter()
        .zip(targets)
        .map(|(x, t)| Step {
            x,
            target: Target::Value(t),
            loss_active: true,
        })
        .collect();
    Ok(StreamTask {
        name: "csv".into(),
        input_dim,
        output_dim: tgt_idx.len(),
        loss: LossKind::Mse,
        steps,
        shift_points: vec![split_step],
        metadata: meta,
    })
}
