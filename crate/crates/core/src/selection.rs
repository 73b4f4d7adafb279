//! Construction of propagation masks.
//!
//! Conventions fixed here:
//! - ring: `floor(k/2)` neighbours on each side; for odd `k` the extra one is
//!   taken clockwise (`i + ceil(k/2)`); self is excluded unless `k == n`.
//! - top-k / bottom-k ties go to the lower column index.
//! - the dynamic score of column `l` is `|W[i,l]| * ||J[l,:]||`, with the
//!   norm taken over all parameter groups.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{JacobianState, Matrix, PropagationMask};

/// Recompute period of the weight-magnitude strategies.
pub const ORACLE_RECOMPUTE_EVERY: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Ring,
    Random,
    Oracle,
    AntiOracle,
    Dynamic,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Ring,
        Strategy::Random,
        Strategy::Oracle,
        Strategy::AntiOracle,
        Strategy::Dynamic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Ring => "ring",
            Strategy::Random => "random",
            Strategy::Oracle => "oracle",
            Strategy::AntiOracle => "anti_oracle",
            Strategy::Dynamic => "dynamic",
        }
    }

    /// How often the mask is rebuilt; `None` means fixed at construction.
    pub fn recompute_every(self) -> Option<usize> {
        match self {
            Strategy::Ring | Strategy::Random => None,
            Strategy::Oracle | Strategy::AntiOracle => Some(ORACLE_RECOMPUTE_EVERY),
            Strategy::Dynamic => Some(1),
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Whether unit `i` may appear in its own support set under `strategy`.
pub fn self_inclusion_policy(strategy: Strategy, k: usize, n: usize) -> bool {
    if k == 0 {
        return false;
    }
    match strategy {
        Strategy::Ring => k >= n,
        _ => true,
    }
}

pub fn ring_mask(n: usize, k: usize) -> PropagationMask {
    if k >= n {
        return PropagationMask::full(n);
    }
    let half = k / 2;
    let rows = (0..n)
        .map(|i| {
            let mut row = Vec::with_capacity(k);
            for d in 1..=half {
                row.push((i + n - d) % n);
                row.push((i + d) % n);
            }
            if k % 2 == 1 {
                row.push((i + half + 1) % n);
            }
            row
        })
        .collect();
    PropagationMask::from_rows(n, rows).expect("ring rows have k distinct entries")
}

pub fn random_mask<R: Rng + ?Sized>(n: usize, k: usize, rng: &mut R) -> PropagationMask {
    if k >= n {
        return PropagationMask::full(n);
    }
    let rows = (0..n)
        .map(|_| rand::seq::index::sample(rng, n, k).into_vec())
        .collect();
    PropagationMask::from_rows(n, rows).expect("sampled without replacement")
}

/// Per-row top-`k` (or bottom-`k`) of `score(i, l)`, lower index on ties.
fn ranked_mask(n: usize, k: usize, largest: bool, score: impl Fn(usize, usize) -> f64) -> PropagationMask {
    if k >= n {
        return PropagationMask::full(n);
    }
    let rows = (0..n)
        .map(|i| {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| {
                let (sa, sb) = (score(i, a), score(i, b));
                let ord = if largest {
                    sb.partial_cmp(&sa)
                } else {
                    sa.partial_cmp(&sb)
                };
                ord.unwrap_or(Ordering::Equal).then(a.cmp(&b))
            });
            idx.truncate(k);
            idx
        })
        .collect();
    PropagationMask::from_rows(n, rows).expect("ranked rows are distinct")
}

pub fn oracle_mask(w_hh: &Matrix, k: usize) -> PropagationMask {
    ranked_mask(w_hh.rows(), k, true, |i, l| w_hh[(i, l)].abs())
}

pub fn anti_oracle_mask(w_hh: &Matrix, k: usize) -> PropagationMask {
    ranked_mask(w_hh.rows(), k, false, |i, l| w_hh[(i, l)].abs())
}

/// Dynamic oracle from precomputed sensitivity row norms `||J[l,:]||`.
pub fn dynamic_mask(w_hh: &Matrix, k: usize, row_norms: &[f64]) -> PropagationMask {
    ranked_mask(w_hh.rows(), k, true, |i, l| w_hh[(i, l)].abs() * row_norms[l])
}

fn check_k(k: usize, n: usize) -> Result<()> {
    if k > n {
        return Err(Error::Mask(format!("k={k} exceeds n={n}")));
    }
    Ok(())
}

/// Build a mask from sensitivity row norms (shared by the RNN and LSTM paths).
pub fn build_mask_from_norms<R: Rng + ?Sized>(
    strategy: Strategy,
    k: usize,
    w_hh: &Matrix,
    row_norms: Option<&[f64]>,
    rng: &mut R,
) -> Result<PropagationMask> {
    let n = w_hh.rows();
    check_k(k, n)?;
    if k == 0 {
        return Ok(PropagationMask::empty(n));
    }
    Ok(match strategy {
        Strategy::Ring => ring_mask(n, k),
        Strategy::Random => random_mask(n, k, rng),
        Strategy::Oracle => oracle_mask(w_hh, k),
        Strategy::AntiOracle => anti_oracle_mask(w_hh, k),
        Strategy::Dynamic => {
            let norms = row_norms
                .ok_or_else(|| Error::Invalid("dynamic selection requires a Jacobian".into()))?;
            if norms.len() != n {
                return Err(Error::Invalid(format!(
                    "expected {n} row norms, got {}",
                    norms.len()
                )));
            }
            dynamic_mask(w_hh, k, norms)
        }
    })
}

pub fn build_mask<R: Rng + ?Sized>(
    strategy: Strategy,
    k: usize,
    n: usize,
    w_hh: &Matrix,
    j: Option<&JacobianState>,
    rng: &mut R,
) -> Result<PropagationMask> {
    if w_hh.shape() != (n, n) {
        return Err(Error::Invalid(format!(
            "W_hh has shape {:?}, expected ({n}, {n})",
            w_hh.shape()
        )));
    }
    let norms: Option<Vec<f64>> = j.map(|j| (0..n).map(|l| j.row_norm(l)).collect());
    build_mask_from_norms(strategy, k, w_hh, norms.as_deref(), rng)
}

/// Owns the current mask of one run and rebuilds it on the strategy's
/// schedule. The sensitivity state is left untouched across mask changes.
#[derive(Debug, Clone)]
pub struct MaskSelector {
    strategy: Strategy,
    k: usize,
    mask: PropagationMask,
    rebuilds: usize,
}

impl MaskSelector {
    /// Initial mask from the initial weights (and a zero Jacobian for the
    /// dynamic strategy).
    pub fn new<R: Rng + ?Sized>(strategy: Strategy, k: usize, w_hh: &Matrix, rng: &mut R) -> Result<Self> {
        let n = w_hh.rows();
        let zeros = vec![0.0; n];
        let mask = build_mask_from_norms(strategy, k, w_hh, Some(&zeros), rng)?;
        Ok(Self {
            strategy,
            k,
            mask,
            rebuilds: 0,
        })
    }

    /// A selector that always yields the given mask.
    pub fn fixed(mask: PropagationMask) -> Self {
        Self {
            strategy: Strategy::Ring,
            k: mask.k(),
            mask,
            rebuilds: 0,
        }
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn mask(&self) -> &PropagationMask {
        &self.mask
    }

    pub fn rebuilds(&self) -> usize {
        self.rebuilds
    }

    /// Called before the contraction of `step` (1-based) with the current
    /// weights and the previous step's sensitivity row norms.
    pub fn update(&mut self, step: usize, w_hh: &Matrix, row_norms: &[f64]) -> Result<bool> {
        if self.k == 0 || self.k >= w_hh.rows() {
            return Ok(false);
        }
        let due = match self.strategy.recompute_every() {
            None => false,
            Some(1) => true,
            Some(p) => step > 0 && step % p == 0,
        };
        if !due {
            return Ok(false);
        }
        self.mask = match self.strategy {
            Strategy::Oracle => oracle_mask(w_hh, self.k),
            Strategy::AntiOracle => anti_oracle_mask(w_hh, self.k),
            Strategy::Dynamic => dynamic_mask(w_hh, self.k, row_norms),
            Strategy::Ring | Strategy::Random => unreachable!("static strategies never rebuild"),
        };
        self.rebuilds += 1;
        Ok(true)
    }
}
