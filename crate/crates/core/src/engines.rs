//! Gradient engines for the vanilla RNN behind one step interface.
//!
//! Every engine sees the same sequence of calls per stream step:
//! [`RnnEngine::observe`] after the forward pass (updates sensitivity
//! state), then [`RnnEngine::gradient`] when the step carries a loss.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_rnn::{ImmediateDerivs, RnnParams};
use crate::selection::{MaskSelector, Strategy};
use crate::tensor::{axpy, norm, rtrl_step_into, JacobianState, Matrix, PropagationMask};

/// Guard added to both sides of the UORO norm ratios.
pub const UORO_EPS: f64 = 1e-7;

/// Gradient method and its hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", from = "EngineSpecRepr")]
pub enum EngineSpec {
    FullRtrl,
    SparseRtrl {
        k: usize,
        #[serde(default)]
        strategy: Strategy,
    },
    Traces,
    TracesDecay {
        lambda: f64,
    },
    Uoro,
    Tbptt {
        window: usize,
    },
}

// Internally tagged unit variants silently accept extra keys; empty struct
// variants reject them.
#[derive(Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum EngineSpecRepr {
    FullRtrl {},
    SparseRtrl {
        k: usize,
        #[serde(default)]
        strategy: Strategy,
    },
    Traces {},
    TracesDecay {
        lambda: f64,
    },
    Uoro {},
    Tbptt {
        window: usize,
    },
}

impl From<EngineSpecRepr> for EngineSpec {
    fn from(r: EngineSpecRepr) -> Self {
        match r {
            EngineSpecRepr::FullRtrl {} => EngineSpec::FullRtrl,
            EngineSpecRepr::SparseRtrl { k, strategy } => EngineSpec::SparseRtrl { k, strategy },
            EngineSpecRepr::Traces {} => EngineSpec::Traces,
            EngineSpecRepr::TracesDecay { lambda } => EngineSpec::TracesDecay { lambda },
            EngineSpecRepr::Uoro {} => EngineSpec::Uoro,
            EngineSpecRepr::Tbptt { window } => EngineSpec::Tbptt { window },
        }
    }
}

impl EngineSpec {
    /// Short label used in output file names.
    pub fn label(&self) -> String {
        match self {
            EngineSpec::FullRtrl => "full".into(),
            EngineSpec::SparseRtrl { k, strategy } => format!("k{k}-{strategy}"),
            EngineSpec::Traces => "traces".into(),
            EngineSpec::TracesDecay { lambda } => format!("traces-decay{lambda}"),
            EngineSpec::Uoro => "uoro".into(),
            EngineSpec::Tbptt { window } => format!("tbptt-w{window}"),
        }
    }

    /// Number of propagated paths per unit, where that notion applies.
    pub fn paths(&self, n: usize) -> Option<usize> {
        match self {
            EngineSpec::FullRtrl => Some(n),
            EngineSpec::SparseRtrl { k, .. } => Some(*k),
            EngineSpec::Traces => Some(0),
            _ => None,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            EngineSpec::SparseRtrl { k, .. } if *k > n => {
                Err(Error::Invalid(format!("k={k} exceeds hidden size n={n}")))
            }
            EngineSpec::TracesDecay { lambda } if !(0.0..=1.0).contains(lambda) => {
                Err(Error::Invalid(format!("trace decay {lambda} outside [0, 1]")))
            }
            EngineSpec::Tbptt { window: 0 } => Err(Error::Invalid("tbptt window must be >= 1".into())),
            _ => Ok(()),
        }
    }
}

/// Gradient of a per-step loss w.r.t. all parameters. `recurrent` follows
/// the sensitivity tensor's column layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub recurrent: Vec<f64>,
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

impl ParamGradient {
    pub fn zeros(p: usize, o: usize, n: usize) -> Self {
        Self {
            recurrent: vec![0.0; p],
            w_out: Matrix::zeros(o, n),
            b_out: vec![0.0; o],
        }
    }

    /// Same order as `RnnParams::to_flat`.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.recurrent.len() + self.w_out.as_slice().len() + self.b_out.len());
        v.extend_from_slice(&self.recurrent);
        v.extend_from_slice(self.w_out.as_slice());
        v.extend_from_slice(&self.b_out);
        v
    }

    pub fn recurrent_norm(&self) -> f64 {
        norm(&self.recurrent)
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|v| v.is_finite())
    }
}

/// Readout gradient: `dL/dW_out = dL/dy ⊗ h`, `dL/db_out = dL/dy`.
fn readout_gradient(dl_dy: &[f64], h: &[f64]) -> (Matrix, Vec<f64>) {
    let w_out = Matrix::from_fn(dl_dy.len(), h.len(), |r, i| dl_dy[r] * h[i]);
    (w_out, dl_dy.to_vec())
}

/// `dL/dtheta = (dL/dy W_out) J` for the recurrent groups plus the exact
/// local readout gradient.
pub fn assemble_gradient(dl_dy: &[f64], w_out: &Matrix, h: &[f64], j: &Matrix) -> ParamGradient {
    let c = w_out.matvec_t(dl_dy);
    let recurrent = j.matvec_t(&c);
    let (gw, gb) = readout_gradient(dl_dy, h);
    ParamGradient {
        recurrent,
        w_out: gw,
        b_out: gb,
    }
}

/// Eligibility-trace update `J~_t = lambda D_t J~_{t-1} + D_t B_t`.
/// With `lambda = 0` the previous state is not read at all.
pub fn traces_step_into(
    prev: &JacobianState,
    derivs: &ImmediateDerivs,
    lambda: f64,
    step: usize,
    out: &mut JacobianState,
) -> Result<()> {
    let layout = prev.layout();
    let (n, m) = (layout.n, layout.m);
    if out.layout() != layout {
        *out = JacobianState::zeros(n, m);
    }
    let outm = out.matrix_mut();
    for i in 0..n {
        let row = outm.row_mut(i);
        if lambda == 0.0 {
            row.fill(0.0);
        } else {
            for (dst, src) in row.iter_mut().zip(prev.matrix().row(i)) {
                *dst = lambda * src;
            }
        }
        let whh = layout.whh(i, 0);
        for (dst, &hp) in row[whh..whh + n].iter_mut().zip(&derivs.h_prev) {
            *dst += hp;
        }
        let wih = layout.wih(i, 0);
        for (dst, &xv) in row[wih..wih + m].iter_mut().zip(&derivs.x) {
            *dst += xv;
        }
        row[layout.bh(i)] += 1.0;
        let d = derivs.d[i];
        let mut finite = true;
        for v in row.iter_mut() {
            *v *= d;
            finite &= v.is_finite();
        }
        if !finite {
            return Err(Error::Diverged { step });
        }
    }
    Ok(())
}

pub fn traces_step(prev: &JacobianState, derivs: &ImmediateDerivs, lambda: f64, step: usize) -> Result<JacobianState> {
    let mut out = JacobianState::zeros(prev.n(), prev.m());
    traces_step_into(prev, derivs, lambda, step, &mut out)?;
    Ok(out)
}

/// Rank-one UORO factors: `J ≈ s a^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct UoroState {
    pub s: Vec<f64>,
    pub a: Vec<f64>,
}

impl UoroState {
    pub fn zeros(n: usize, p: usize) -> Self {
        Self {
            s: vec![0.0; n],
            a: vec![0.0; p],
        }
    }

    /// Dense `s a^T`.
    pub fn outer(&self) -> Matrix {
        Matrix::from_fn(self.s.len(), self.a.len(), |i, c| self.s[i] * self.a[c])
    }
}

/// One UORO update with a Rademacher probe `nu`:
///
/// `s <- rho0 F_s s + rho1 nu`, `a <- a / rho0 + (nu^T D B) / rho1`, where
/// `F_s s = D (W_hh s)` and the `rho`s balance the factor norms. A term whose
/// norm is exactly zero is dropped; the probe is still drawn so the random
/// stream does not depend on the state.
pub fn uoro_step<R: Rng + ?Sized>(
    state: &UoroState,
    w_hh: &Matrix,
    derivs: &ImmediateDerivs,
    rng: &mut R,
    step: usize,
) -> Result<UoroState> {
    let n = derivs.n();
    let m = derivs.x.len();
    let layout = crate::tensor::RecurrentLayout::new(n, m);
    let nu: Vec<f64> = (0..n)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();

    let ws = w_hh.matvec(&state.s);
    let fs: Vec<f64> = ws.iter().zip(&derivs.d).map(|(a, d)| a * d).collect();

    // nu^T D B, built directly from the compact B.
    let mut delta = vec![0.0; layout.len()];
    for i in 0..n {
        let c = nu[i] * derivs.d[i];
        let whh = layout.whh(i, 0);
        for (dst, &hp) in delta[whh..whh + n].iter_mut().zip(&derivs.h_prev) {
            *dst = c * hp;
        }
        let wih = layout.wih(i, 0);
        for (dst, &xv) in delta[wih..wih + m].iter_mut().zip(&derivs.x) {
            *dst = c * xv;
        }
        delta[layout.bh(i)] = c;
    }

    let (fs_norm, a_norm) = (norm(&fs), norm(&state.a));
    let (delta_norm, nu_norm) = (norm(&delta), norm(&nu));

    let mut s = vec![0.0; n];
    let mut a = vec![0.0; layout.len()];
    if fs_norm > 0.0 && a_norm > 0.0 {
        let rho0 = ((a_norm + UORO_EPS) / (fs_norm + UORO_EPS)).sqrt();
        axpy(rho0, &fs, &mut s);
        axpy(1.0 / rho0, &state.a, &mut a);
    }
    if delta_norm > 0.0 {
        let rho1 = ((delta_norm + UORO_EPS) / (nu_norm + UORO_EPS)).sqrt();
        axpy(rho1, &nu, &mut s);
        axpy(1.0 / rho1, &delta, &mut a);
    }
    if !s.iter().chain(&a).all(|v| v.is_finite()) {
        return Err(Error::Diverged { step });
    }
    Ok(UoroState { s, a })
}

/// One stored transition for truncated BPTT.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub h_prev: Vec<f64>,
    pub x: Vec<f64>,
    pub h: Vec<f64>,
}

/// Reverse-mode gradient of the current-step loss through the stored
/// transitions (oldest first, newest last), using the current weights.
pub fn tbptt_grad<'a, I>(buffer: I, params: &RnnParams, dl_dy: &[f64]) -> ParamGradient
where
    I: DoubleEndedIterator<Item = &'a Transition>,
{
    let (n, o) = (params.n(), params.o());
    let layout = params.layout();
    let mut g = ParamGradient::zeros(layout.len(), o, n);
    let mut delta_h = params.w_out.matvec_t(dl_dy);
    let mut first = true;
    for tr in buffer.rev() {
        if first {
            let (gw, gb) = readout_gradient(dl_dy, &tr.h);
            g.w_out = gw;
            g.b_out = gb;
            first = false;
        }
        let delta_a: Vec<f64> = delta_h
            .iter()
            .zip(&tr.h)
            .map(|(dh, h)| dh * (1.0 - h * h))
            .collect();
        for i in 0..n {
            let da = delta_a[i];
            if da == 0.0 {
                continue;
            }
            let whh = layout.whh(i, 0);
            axpy(da, &tr.h_prev, &mut g.recurrent[whh..whh + n]);
            let wih = layout.wih(i, 0);
            axpy(da, &tr.x, &mut g.recurrent[wih..wih + layout.m]);
            g.recurrent[layout.bh(i)] += da;
        }
        delta_h = params.w_hh.matvec_t(&delta_a);
    }
    g
}

#[derive(Debug, Clone)]
enum EngineState {
    Rtrl {
        j: JacobianState,
        scratch: JacobianState,
        selector: MaskSelector,
    },
    Traces {
        lambda: f64,
        j: JacobianState,
        scratch: JacobianState,
    },
    Uoro(UoroState),
    Tbptt {
        window: usize,
        buffer: VecDeque<Transition>,
    },
}

/// A gradient engine for one run of a vanilla RNN.
#[derive(Debug, Clone)]
pub struct RnnEngine {
    spec: EngineSpec,
    n: usize,
    m: usize,
    state: EngineState,
}

impl RnnEngine {
    /// `mask_rng` is only consumed by the random selection strategy.
    pub fn new<R: Rng + ?Sized>(spec: EngineSpec, params: &RnnParams, mask_rng: &mut R) -> Result<Self> {
        let (n, m) = (params.n(), params.m());
        spec.validate(n)?;
        let p = params.layout().len();
        let state = match &spec {
            EngineSpec::FullRtrl => EngineState::Rtrl {
                j: JacobianState::zeros(n, m),
                scratch: JacobianState::zeros(n, m),
                selector: MaskSelector::fixed(PropagationMask::full(n)),
            },
            EngineSpec::SparseRtrl { k, strategy } => EngineState::Rtrl {
                j: JacobianState::zeros(n, m),
                scratch: JacobianState::zeros(n, m),
                selector: MaskSelector::new(*strategy, *k, &params.w_hh, mask_rng)?,
            },
            EngineSpec::Traces => EngineState::Traces {
                lambda: 0.0,
                j: JacobianState::zeros(n, m),
                scratch: JacobianState::zeros(n, m),
            },
            EngineSpec::TracesDecay { lambda } => EngineState::Traces {
                lambda: *lambda,
                j: JacobianState::zeros(n, m),
                scratch: JacobianState::zeros(n, m),
            },
            EngineSpec::Uoro => EngineState::Uoro(UoroState::zeros(n, p)),
            EngineSpec::Tbptt { window } => EngineState::Tbptt {
                window: *window,
                buffer: VecDeque::with_capacity(*window),
            },
        };
        Ok(Self { spec, n, m, state })
    }

    pub fn spec(&self) -> &EngineSpec {
        &self.spec
    }

    /// Return internal state to its zero/empty element. The mask is kept.
    pub fn reset(&mut self) {
        match &mut self.state {
            EngineState::Rtrl { j, .. } | EngineState::Traces { j, .. } => j.reset(),
            EngineState::Uoro(u) => {
                u.s.fill(0.0);
                u.a.fill(0.0);
            }
            EngineState::Tbptt { buffer, .. } => buffer.clear(),
        }
    }

    /// Advance sensitivity state past step `step` (1-based), after the
    /// forward pass produced `h` from `derivs.h_prev` and `derivs.x`.
    pub fn observe<R: Rng + ?Sized>(
        &mut self,
        params: &RnnParams,
        derivs: &ImmediateDerivs,
        h: &[f64],
        step: usize,
        rng: &mut R,
    ) -> Result<()> {
        match &mut self.state {
            EngineState::Rtrl { j, scratch, selector } => {
                if selector.strategy() == Strategy::Dynamic {
                    let norms: Vec<f64> = (0..self.n).map(|l| j.row_norm(l)).collect();
                    selector.update(step, &params.w_hh, &norms)?;
                } else {
                    selector.update(step, &params.w_hh, &[])?;
                }
                rtrl_step_into(j, &params.w_hh, selector.mask(), derivs, step, scratch)?;
                std::mem::swap(j, scratch);
            }
            EngineState::Traces { lambda, j, scratch } => {
                traces_step_into(j, derivs, *lambda, step, scratch)?;
                std::mem::swap(j, scratch);
            }
            EngineState::Uoro(u) => {
                *u = uoro_step(u, &params.w_hh, derivs, rng, step)?;
            }
            EngineState::Tbptt { window, buffer } => {
                if buffer.len() == *window {
                    buffer.pop_front();
                }
                buffer.push_back(Transition {
                    h_prev: derivs.h_prev.clone(),
                    x: derivs.x.clone(),
                    h: h.to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Gradient of the current-step loss given `dL/dy` and the current `h`.
    pub fn gradient(&self, params: &RnnParams, dl_dy: &[f64], h: &[f64]) -> ParamGradient {
        match &self.state {
            EngineState::Rtrl { j, .. } | EngineState::Traces { j, .. } => {
                assemble_gradient(dl_dy, &params.w_out, h, j.matrix())
            }
            EngineState::Uoro(u) => {
                let c = params.w_out.matvec_t(dl_dy);
                let scale: f64 = c.iter().zip(&u.s).map(|(a, b)| a * b).sum();
                let (gw, gb) = readout_gradient(dl_dy, h);
                ParamGradient {
                    recurrent: u.a.iter().map(|v| scale * v).collect(),
                    w_out: gw,
                    b_out: gb,
                }
            }
            EngineState::Tbptt { buffer, .. } => {
                if buffer.is_empty() {
                    let (gw, gb) = readout_gradient(dl_dy, h);
                    let mut g = ParamGradient::zeros(params.layout().len(), params.o(), self.n);
                    g.w_out = gw;
                    g.b_out = gb;
                    return g;
                }
                tbptt_grad(buffer.iter(), params, dl_dy)
            }
        }
    }

    /// Sensitivity tensor, for the engines that keep one.
    pub fn jacobian(&self) -> Option<&JacobianState> {
        match &self.state {
            EngineState::Rtrl { j, .. } | EngineState::Traces { j, .. } => Some(j),
            _ => None,
        }
    }

    pub fn mask(&self) -> Option<&PropagationMask> {
        match &self.state {
            EngineState::Rtrl { selector, .. } => Some(selector.mask()),
            _ => None,
        }
    }

    pub fn mask_rebuilds(&self) -> usize {
        match &self.state {
            EngineState::Rtrl { selector, .. } => selector.rebuilds(),
            _ => 0,
        }
    }

    pub fn uoro_state(&self) -> Option<&UoroState> {
        match &self.state {
            EngineState::Uoro(u) => Some(u),
            _ => None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }
}
