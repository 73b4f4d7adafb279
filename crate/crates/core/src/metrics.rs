//! Evaluation: windowed errors, recovery scores, gradient alignment,
//! Jacobian spectra and cross-seed dispersion, plus the run log formats.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::engines::ParamGradient;
use crate::error::{Error, Result};
use crate::tensor::{dot, norm, JacobianState, ParamGroup};

pub const DEFAULT_WINDOW: usize = 200;
/// Condition numbers above this (or with a zero smallest singular value)
/// are reported as this value with `ill_conditioned` set.
pub const COND_SENTINEL: f64 = 1e12;
pub const SPECTRAL_MASS: f64 = 0.95;

/// One row of the per-step CSV log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub t: usize,
    pub loss: f64,
    pub loss_active: bool,
    pub cos_ref: Option<f64>,
    pub grad_norm: Option<f64>,
}

pub const LOG_HEADER: [&str; 5] = ["t", "loss", "loss_active", "cos_ref", "grad_norm"];

pub fn write_log<W: Write>(rows: &[StepLog], w: W) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(LOG_HEADER).map_err(csv_err)?;
    for r in rows {
        out.serialize(r).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_log<R: Read>(r: R) -> Result<Vec<StepLog>> {
    let mut reader = csv::Reader::from_reader(r);
    let header: Vec<String> = reader.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
    if header != LOG_HEADER {
        return Err(Error::Format(format!("unexpected log header {header:?}")));
    }
    reader
        .deserialize()
        .enumerate()
        .map(|(i, row)| row.map_err(|e| Error::Ingest { row: i + 1, message: e.to_string() }))
        .collect()
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

/// Mean loss over the last `window_len` loss-active steps with `t < window_end`.
/// Uses what is available when fewer steps exist; `None` if there are none.
pub fn windowed_mse(record: &[StepLog], window_end: usize, window_len: usize) -> Option<f64> {
    windowed_mse_from(record, 0, window_end, window_len)
}

/// As [`windowed_mse`], restricted to steps with `t >= start`.
pub fn windowed_mse_from(record: &[StepLog], start: usize, window_end: usize, window_len: usize) -> Option<f64> {
    let picked: Vec<f64> = record
        .iter()
        .rev()
        .filter(|r| r.t >= start && r.t < window_end && r.loss_active)
        .take(window_len)
        .map(|r| r.loss)
        .collect();
    if picked.is_empty() {
        None
    } else {
        Some(picked.iter().sum::<f64>() / picked.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftMse {
    pub shift: usize,
    /// Window end (exclusive): the next shift point or the stream end.
    pub window_end: usize,
    pub mse: Option<f64>,
}

/// Pre-shift error (window ending at the first shift) and one post-shift
/// error per shift (window ending at the next shift or `stream_len`).
pub fn shift_windows(
    record: &[StepLog],
    shifts: &[usize],
    stream_len: usize,
    window_len: usize,
) -> (Option<f64>, Vec<ShiftMse>) {
    let pre = shifts.first().and_then(|&s| windowed_mse(record, s, window_len));
    let post = shifts
        .iter()
        .enumerate()
        .map(|(i, &shift)| {
            let end = shifts.get(i + 1).copied().unwrap_or(stream_len);
            ShiftMse {
                shift,
                window_end: end,
                mse: windowed_mse_from(record, shift, end, window_len),
            }
        })
        .collect();
    (pre, post)
}

/// Share of the log-error gap between a floor (`mse_0`) and a ceiling
/// (`mse_n`) closed by a method with error `mse_k`, in percent.
pub fn gap_recovery(mse_0: f64, mse_k: f64, mse_n: f64) -> Result<f64> {
    let all_positive = [mse_0, mse_k, mse_n].iter().all(|v| *v > 0.0 && v.is_finite());
    let denom = mse_0.ln() - mse_n.ln();
    if !all_positive {
        return Err(Error::UndefinedGap("inputs must be positive and finite".into()));
    }
    if denom == 0.0 {
        return Err(Error::UndefinedGap("floor equals ceiling".into()));
    }
    Ok((mse_0.ln() - mse_k.ln()) / denom * 100.0)
}

/// Share of the drift-induced degradation recovered, in percent.
pub fn bci_recovery(mse_frozen_b: f64, mse_method_b: f64, mse_frozen_a: f64) -> Result<f64> {
    let denom = mse_frozen_b - mse_frozen_a;
    if denom == 0.0 || !denom.is_finite() {
        return Err(Error::UndefinedGap("frozen errors coincide".into()));
    }
    Ok((mse_frozen_b - mse_method_b) / denom * 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub cosine: f64,
    /// `‖g1‖ / ‖g2‖`.
    pub magnitude_ratio: f64,
}

/// Cosine and norm ratio of two vectors; `None` if either is zero.
pub fn vector_alignment(a: &[f64], b: &[f64]) -> Option<Alignment> {
    assert_eq!(a.len(), b.len(), "vector_alignment: length mismatch");
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return None;
    }
    Some(Alignment {
        cosine: (dot(a, b) / (na * nb)).clamp(-1.0, 1.0),
        magnitude_ratio: na / nb,
    })
}

/// Alignment over the flattened recurrent parameter groups.
pub fn gradient_cosine(g1: &ParamGradient, g2: &ParamGradient) -> Option<Alignment> {
    vector_alignment(&g1.recurrent, &g2.recurrent)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Spectrum {
    /// Descending.
    pub singular_values: Vec<f64>,
    pub r95: usize,
    pub cond: f64,
    pub ill_conditioned: bool,
}

/// Spectrum of the `(n, n*n)` recurrent-weight sensitivity block.
pub fn spectral_analysis(j: &JacobianState) -> Result<Spectrum> {
    let block = j.group(ParamGroup::Whh);
    spectrum_of(block.rows(), block.cols(), block.as_slice())
}

/// Spectrum of a row-major `rows x cols` matrix.
pub fn spectrum_of(rows: usize, cols: usize, data: &[f64]) -> Result<Spectrum> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::UndefinedSpectrum("non-finite entries".into()));
    }
    let m = DMatrix::from_row_slice(rows, cols, data);
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let top = sv.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return Err(Error::UndefinedSpectrum("all-zero block".into()));
    }
    let total: f64 = sv.iter().map(|s| s * s).sum();
    let target = SPECTRAL_MASS * total * (1.0 - 1e-12);
    let mut acc = 0.0;
    let mut r95 = sv.len();
    for (i, s) in sv.iter().enumerate() {
        acc += s * s;
        if acc >= target {
            r95 = i + 1;
            break;
        }
    }
    let bottom = *sv.last().unwrap_or(&0.0);
    let raw = if bottom > 0.0 { top / bottom } else { f64::INFINITY };
    let ill = !(raw <= COND_SENTINEL);
    Ok(Spectrum {
        singular_values: sv,
        r95,
        cond: if ill { COND_SENTINEL } else { raw },
        ill_conditioned: ill,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dispersion {
    pub mean: f64,
    /// Sample standard deviation (ddof = 1).
    pub sd: f64,
    /// `sd / |mean|`.
    pub cv: f64,
}

pub fn seed_dispersion(values: &[f64]) -> Result<Dispersion> {
    if values.len() < 2 {
        return Err(Error::UndefinedDispersion(format!("{} value(s)", values.len())));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let cv = if mean == 0.0 {
        if sd == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        sd / mean.abs()
    };
    Ok(Dispersion { mean, sd, cv })
}

/// Accuracy of class predictions over the last `window_len` scored steps.
pub fn windowed_accuracy(hits: &[bool], window_len: usize) -> Option<f64> {
    let tail = &hits[hits.len().saturating_sub(window_len)..];
    if tail.is_empty() {
        None
    } else {
        Some(tail.iter().filter(|h| **h).count() as f64 / tail.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralSnapshot {
    pub step: usize,
    #[serde(flatten)]
    pub spectrum: Option<Spectrum>,
    /// Set when the spectrum was undefined (all-zero or non-finite J).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub undefined: Option<String>,
}

/// Conventions the summary numbers depend on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricConventions {
    pub window_len: usize,
    pub r95_reading: String,
    pub sd_ddof: u32,
    pub svd_block: String,
    pub cond_sentinel: f64,
}

impl MetricConventions {
    pub fn standard(window_len: usize) -> Self {
        Self {
            window_len,
            r95_reading: "cumulative sigma^2 mass >= 0.95".into(),
            sd_ddof: 1,
            svd_block: "j_whh".into(),
            cond_sentinel: COND_SENTINEL,
        }
    }
}

/// Summary JSON written next to each per-step log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub task: String,
    pub engine: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub conventions: MetricConventions,
    pub steps: usize,
    pub shift_points: Vec<usize>,
    pub pre_shift_mse: Option<f64>,
    pub post_shift_mse: Vec<ShiftMse>,
    /// Windowed error over the last `window_len` scored steps of the stream.
    pub final_mse: Option<f64>,
    pub accuracy: Option<f64>,
    pub diverged: bool,
    pub diverged_step: Option<usize>,
    pub mean_cos_ref_post: Option<f64>,
    pub mean_magnitude_ratio_post: Option<f64>,
    pub spectral: Vec<SpectralSnapshot>,
    pub masks: Option<Vec<Vec<usize>>>,
    pub mask_rebuilds: usize,
    /// Mask-construction conventions, null for engines without a mask.
    pub selection: serde_json::Value,
    pub task_metadata: serde_json::Value,
    pub init: serde_json::Value,
}

impl RunSummary {
    /// Post-shift error of the first shift, `None` if missing or diverged.
    pub fn first_post_shift(&self) -> Option<f64> {
        if self.diverged {
            return None;
        }
        self.post_shift_mse.first().and_then(|s| s.mse)
    }
}
