//! Online optimizers over flat parameter vectors.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

pub const ADAM_LR: f64 = 1e-3;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const SGD_LR: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerSpec {
    Adam {
        #[serde(default = "default_adam_lr")]
        lr: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
    Sgd {
        #[serde(default = "default_sgd_lr")]
        lr: f64,
    },
}

fn default_adam_lr() -> f64 {
    ADAM_LR
}
fn default_beta1() -> f64 {
    ADAM_BETA1
}
fn default_beta2() -> f64 {
    ADAM_BETA2
}
fn default_eps() -> f64 {
    ADAM_EPS
}
fn default_sgd_lr() -> f64 {
    SGD_LR
}

impl Default for OptimizerSpec {
    fn default() -> Self {
        OptimizerSpec::Adam {
            lr: ADAM_LR,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            eps: ADAM_EPS,
        }
    }
}

impl OptimizerSpec {
    pub fn build(&self, num_params: usize) -> Optimizer {
        match *self {
            OptimizerSpec::Adam { lr, beta1, beta2, eps } => Optimizer::Adam(AdamState::new(num_params, lr, beta1, beta2, eps)),
            OptimizerSpec::Sgd { lr } => Optimizer::Sgd { lr },
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerSpec::Adam { lr, .. } | OptimizerSpec::Sgd { lr } => lr,
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        match self {
            OptimizerSpec::Adam { beta1, beta2, eps, .. } => OptimizerSpec::Adam { lr, beta1, beta2, eps },
            OptimizerSpec::Sgd { .. } => OptimizerSpec::Sgd { lr },
        }
    }
}

/// Bias-corrected Adam, `θ ← θ - lr · m̂ / (sqrt(v̂) + ε)`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn with_defaults(len: usize) -> Self {
        Self::new(len, ADAM_LR, ADAM_BETA1, ADAM_BETA2, ADAM_EPS)
    }
}

pub fn adam_step(params: &mut [f64], grad: &[f64], state: &mut AdamState) -> Result<()> {
    if params.len() != grad.len() || params.len() != state.m.len() {
        return Err(shape_err("adam_step", params.len(), format!("grad {}, state {}", grad.len(), state.m.len())));
    }
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grad[i];
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * g;
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
    Ok(())
}

pub fn sgd_step(params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
    if params.len() != grad.len() {
        return Err(shape_err("sgd_step", params.len(), grad.len()));
    }
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= lr * g;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    Adam(AdamState),
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        match self {
            Optimizer::Adam(state) => adam_step(params, grad, state),
            Optimizer::Sgd { lr } => sgd_step(params, grad, *lr),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn first_adam_step_moves_by_lr_against_sign() {
        let mut p = vec![0.0, 0.0, 0.0];
        let g = [3.0, -0.5, 1e-2];
        let mut s = AdamState::with_defaults(3);
        adam_step(&mut p, &g, &mut s).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            assert!((pi + ADAM_LR * gi.signum()).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut s = AdamState::with_defaults(2);
        for _ in 0..50 {
            adam_step(&mut p, &[0.0, 0.0], &mut s).unwrap();
        }
        assert_eq!(p, vec![1.0, -2.0]);
        sgd_step(&mut p, &[0.0, 0.0], 0.5).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    // Hand roll, g = 1 every step, lr = 0.1:
    //   t=1: m=0.1      v=0.001        m̂=1 v̂=1 -> Δ = -0.1/(1+1e-8)
    //   t=2: m=0.19     v=0.001999     m̂=0.19/0.19=1, v̂=0.001999/0.001999=1
    //   t=3: m=0.271    v=0.002997001  m̂=1, v̂=1
    // so each step moves by -0.1/(1+1e-8).
    #[test]
    fn three_adam_steps_constant_gradient() {
        let mut p = vec![0.0];
        let mut s = AdamState::new(1, 0.1, 0.9, 0.999, 1e-8);
        let expected_m = [0.1, 0.19, 0.271];
        let expected_v = [0.001, 0.001999, 0.002997001];
        for t in 0..3 {
            adam_step(&mut p, &[1.0], &mut s).unwrap();
            assert!((s.m[0] - expected_m[t]).abs() < 1e-15);
            assert!((s.v[0] - expected_v[t]).abs() < 1e-15);
            let want = -0.1 * (t + 1) as f64 / (1.0 + 1e-8);
            assert!((p[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_basic() {
        let mut p = vec![1.0];
        sgd_step(&mut p, &[2.0], 0.1).unwrap();
        assert!((p[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn sgd_and_adam_agree_in_sign_on_first_step() {
        let g = [0.3, -4.0, 1e-3, -2e-2];
        let mut a = vec![0.0; 4];
        let mut s = vec![0.0; 4];
        adam_step(&mut a, &g, &mut AdamState::with_defaults(4)).unwrap();
        sgd_step(&mut s, &g, SGD_LR).unwrap();
        for (x, y) in a.iter().zip(&s) {
            assert_eq!(x.signum(), y.signum());
        }
    }

    #[test]
    fn spec_defaults() {
        let s: OptimizerSpec = serde_json::from_str(r#"{"kind":"adam"}"#).unwrap();
        assert_eq!(s, OptimizerSpec::default());
        let s: OptimizerSpec = serde_json::from_str(r#"{"kind":"sgd"}"#).unwrap();
        assert_eq!(s.lr(), SGD_LR);
    }

    /// Cauchy-Schwarz bound on `|m̂| / sqrt(v̂)` after `t` steps, valid for
    /// `beta1^2 < beta2`. It is 1 at `t = 1` and grows towards
    /// `sqrt((1-b1)^2 / ((1-r)(1-b2)))`, `r = b1^2/b2`.
    fn adam_ratio_bound(t: u64, b1: f64, b2: f64) -> f64 {
        let r = b1 * b1 / b2;
        let t = t as i32;
        ((1.0 - b1).powi(2) * (1.0 - r.powi(t)) * (1.0 - b2.powi(t))
            / ((1.0 - r) * (1.0 - b2) * (1.0 - b1.powi(t)).powi(2)))
        .sqrt()
    }

    #[test]
    fn stationary_gradient_steps_never_exceed_lr() {
        let mut p = vec![0.0; 2];
        let mut s = AdamState::with_defaults(2);
        for _ in 0..500 {
            let before = p.clone();
            adam_step(&mut p, &[0.7, -12.0], &mut s).unwrap();
            for (a, b) in p.iter().zip(&before) {
                assert!((a - b).abs() <= ADAM_LR * (1.0 + 1e-12));
            }
        }
    }

    // A long run of zeros followed by a spike is the worst case: the step is
    // (1-b1)/sqrt(1-b2) ~ 3.16 lr, so `lr (1 + tol)` is not a bound in general.
    #[test]
    fn spike_after_silence_exceeds_lr() {
        let mut p = vec![0.0];
        let mut s = AdamState::with_defaults(1);
        for _ in 0..5000 {
            adam_step(&mut p, &[0.0], &mut s).unwrap();
        }
        adam_step(&mut p, &[1.0], &mut s).unwrap();
        assert!(p[0].abs() > 3.0 * ADAM_LR && p[0].abs() < 3.2 * ADAM_LR);
    }

    proptest! {
        #[test]
        fn adam_update_respects_ratio_bound(history in prop::collection::vec(prop::collection::vec(-1e3f64..1e3, 3), 1..60)) {
            let mut p = vec![0.0; 3];
            let mut s = AdamState::with_defaults(3);
            for g in &history {
                let before = p.clone();
                adam_step(&mut p, g, &mut s).unwrap();
                let bound = ADAM_LR * adam_ratio_bound(s.t, ADAM_BETA1, ADAM_BETA2) * (1.0 + 1e-9);
                for (a, b) in p.iter().zip(&before) {
                    prop_assert!((a - b).abs() <= bound);
                }
            }
        }
    }
}
