//! LSTM without peepholes and its forward-mode sensitivity recursion.
//!
//! ```text
//! z = [h_{t-1}; x_t]
//! i = σ(W_i z + b_i)   f = σ(W_f z + b_f)   g = tanh(W_g z + b_g)   o = σ(W_o z + b_o)
//! c = f ⊙ c_{t-1} + i ⊙ g
//! h = o ⊙ tanh(c)
//! ```
//!
//! Two sensitivity matrices are carried, `Jh = dh/dθ` and `Jc = dc/dθ`.
//! With `dA_q = (W_q,hh ⊙ M) Jh_{t-1} + Imm_q` for each gate `q`:
//!
//! ```text
//! Jc = f ⊙ Jc_{t-1} + c_{t-1} σ'(a_f) dA_f + g σ'(a_i) dA_i + i (1 - g²) dA_g
//! Jh = tanh(c) σ'(a_o) dA_o + o (1 - tanh²(c)) Jc
//! ```
//!
//! The cell path `f ⊙ Jc_{t-1}` is elementwise and always exact; only the
//! inter-neuron contractions through `W_q,hh` are masked, with one mask
//! shared by all four gates.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::engines::{assemble_gradient, EngineSpec, ParamGradient};
use crate::error::{shape_err, Error, Result};
use crate::model_rnn::{read_checkpoint_parts, CheckpointHeader};
use crate::selection::{MaskSelector, Strategy};
use crate::tensor::{axpy, dot, Matrix, PropagationMask};

pub const GATE_ORDER: [&str; 4] = ["input", "forget", "cell", "output"];
const IN: usize = 0;
const FORGET: usize = 1;
const CELL: usize = 2;
const OUT: usize = 3;

fn sigmoid(a: f64) -> f64 {
    1.0 / (1.0 + (-a).exp())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gate {
    /// `(n, n + m)`: recurrent columns first, then input columns.
    pub w: Matrix,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams {
    pub gates: [Gate; 4],
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

/// Column layout of the LSTM recurrent parameters: gate by gate, each gate
/// as `W_q` row-major followed by `b_q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmLayout {
    pub n: usize,
    pub m: usize,
}

impl LstmLayout {
    pub fn gate_len(&self) -> usize {
        self.n * (self.n + self.m + 1)
    }

    pub fn len(&self) -> usize {
        4 * self.gate_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn weight(&self, gate: usize, row: usize, col: usize) -> usize {
        gate * self.gate_len() + row * (self.n + self.m) + col
    }

    #[inline]
    pub fn bias(&self, gate: usize, row: usize) -> usize {
        gate * self.gate_len() + self.n * (self.n + self.m) + row
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmStep {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
    pub y: Vec<f64>,
    pub gates: GateActivations,
}

/// Post-nonlinearity gate values of one step, plus what the sensitivity
/// recursion needs from the previous step.
#[derive(Debug, Clone, PartialEq)]
pub struct GateActivations {
    pub input: Vec<f64>,
    pub forget: Vec<f64>,
    pub cell: Vec<f64>,
    pub output: Vec<f64>,
    pub tanh_c: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub x: Vec<f64>,
}

impl LstmParams {
    pub fn zeros(n: usize, m: usize, o: usize) -> Self {
        let gate = || Gate {
            w: Matrix::zeros(n, n + m),
            b: vec![0.0; n],
        };
        Self {
            gates: [gate(), gate(), gate(), gate()],
            w_out: Matrix::zeros(o, n),
            b_out: vec![0.0; o],
        }
    }

    /// Recurrent columns `N(0, 1/n)`, input columns `N(0, 1/m)`, readout
    /// `N(0, 1/n)`, zero biases.
    pub fn init<R: Rng + ?Sized>(n: usize, m: usize, o: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(n, m, o);
        let sh = 1.0 / (n as f64).sqrt();
        let si = 1.0 / (m.max(1) as f64).sqrt();
        for gate in &mut p.gates {
            for i in 0..n {
                for c in 0..n + m {
                    let s = if c < n { sh } else { si };
                    gate.w[(i, c)] = s * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        for v in p.w_out.as_mut_slice() {
            *v = sh * rng.sample::<f64, _>(StandardNormal);
        }
        p
    }

    pub fn n(&self) -> usize {
        self.gates[0].w.rows()
    }

    pub fn m(&self) -> usize {
        self.gates[0].w.cols() - self.n()
    }

    pub fn o(&self) -> usize {
        self.w_out.rows()
    }

    pub fn layout(&self) -> LstmLayout {
        LstmLayout { n: self.n(), m: self.m() }
    }

    pub fn num_params(&self) -> usize {
        self.layout().len() + self.o() * self.n() + self.o()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for g in &self.gates {
            v.extend_from_slice(g.w.as_slice());
            v.extend_from_slice(&g.b);
        }
        v.extend_from_slice(self.w_out.as_slice());
        v.extend_from_slice(&self.b_out);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(shape_err("LstmParams::set_flat", self.num_params(), flat.len()));
        }
        let mut rest = flat;
        let mut take = |dst: &mut [f64]| {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        };
        for g in &mut self.gates {
            take(g.w.as_mut_slice());
            take(&mut g.b);
        }
        take(self.w_out.as_mut_slice());
        take(&mut self.b_out);
        Ok(())
    }

    pub fn forward(&self, h_prev: &[f64], c_prev: &[f64], x: &[f64]) -> LstmStep {
        lstm_forward(self, h_prev, c_prev, x)
    }

    pub fn write_checkpoint<W: Write>(&self, seed: u64, mut w: W) -> Result<()> {
        let header = CheckpointHeader {
            n: self.n(),
            m: self.m(),
            o: self.o(),
            seed,
            fields: ["gates", "w_out", "b_out"].map(String::from).to_vec(),
            gate_order: Some(GATE_ORDER.map(String::from).to_vec()),
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for v in self.to_flat() {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(r: R) -> Result<(Self, CheckpointHeader)> {
        let (header, flat) = read_checkpoint_parts(r)?;
        match &header.gate_order {
            Some(order) if order.iter().map(String::as_str).eq(GATE_ORDER) => {}
            other => return Err(Error::Format(format!("unsupported gate order {other:?}"))),
        }
        let mut p = Self::zeros(header.n, header.m, header.o);
        p.set_flat(&flat)?;
        Ok((p, header))
    }
}

pub fn lstm_forward(p: &LstmParams, h_prev: &[f64], c_prev: &[f64], x: &[f64]) -> LstmStep {
    let n = p.n();
    let z: Vec<f64> = h_prev.iter().chain(x).copied().collect();
    let pre = |q: usize| -> Vec<f64> {
        (0..n).map(|i| dot(p.gates[q].w.row(i), &z) + p.gates[q].b[i]).collect()
    };
    let input: Vec<f64> = pre(IN).into_iter().map(sigmoid).collect();
    let forget: Vec<f64> = pre(FORGET).into_iter().map(sigmoid).collect();
    let cell: Vec<f64> = pre(CELL).into_iter().map(f64::tanh).collect();
    let output: Vec<f64> = pre(OUT).into_iter().map(sigmoid).collect();
    let c: Vec<f64> = (0..n).map(|i| forget[i] * c_prev[i] + input[i] * cell[i]).collect();
    let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
    let h: Vec<f64> = (0..n).map(|i| output[i] * tanh_c[i]).collect();
    let y = (0..p.o()).map(|r| dot(p.w_out.row(r), &h) + p.b_out[r]).collect();
    LstmStep {
        h,
        c,
        y,
        gates: GateActivations {
            input,
            forget,
            cell,
            output,
            tanh_c,
            c_prev: c_prev.to_vec(),
            h_prev: h_prev.to_vec(),
            x: x.to_vec(),
        },
    }
}

/// `Jh = dh/dθ` and `Jc = dc/dθ`, both `(n, P)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmJacobianState {
    pub jh: Matrix,
    pub jc: Matrix,
}

impl LstmJacobianState {
    pub fn zeros(n: usize, m: usize) -> Self {
        let p = LstmLayout { n, m }.len();
        Self {
            jh: Matrix::zeros(n, p),
            jc: Matrix::zeros(n, p),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.jh.is_finite() && self.jc.is_finite()
    }

    pub fn reset(&mut self) {
        self.jh.fill(0.0);
        self.jc.fill(0.0);
    }
}

/// Adds the immediate derivative row `Imm_q[j, :]` scaled by `coef`.
fn add_immediate(row: &mut [f64], layout: LstmLayout, gate: usize, j: usize, z: &[f64], coef: f64) {
    let start = layout.weight(gate, j, 0);
    axpy(coef, z, &mut row[start..start + z.len()]);
    row[layout.bias(gate, j)] += coef;
}

/// One masked LSTM sensitivity update, written into `out`.
pub fn lstm_rtrl_step_into(
    js: &LstmJacobianState,
    p: &LstmParams,
    mask: &PropagationMask,
    acts: &GateActivations,
    step: usize,
    out: &mut LstmJacobianState,
) -> Result<()> {
    let layout = p.layout();
    let n = layout.n;
    if mask.n() != n || js.jh.rows() != n || js.jh.cols() != layout.len() {
        return Err(shape_err("lstm_rtrl_step", format!("n={n}, P={}", layout.len()), format!("{:?}", js.jh.shape())));
    }
    if out.jh.shape() != js.jh.shape() {
        *out = LstmJacobianState::zeros(n, layout.m);
    }
    let z: Vec<f64> = acts.h_prev.iter().chain(&acts.x).copied().collect();
    let mut contrib_o = vec![0.0; layout.len()];
    for j in 0..n {
        let (ig, fg, cg, og) = (acts.input[j], acts.forget[j], acts.cell[j], acts.output[j]);
        let tc = acts.tanh_c[j];
        let k_in = cg * ig * (1.0 - ig);
        let k_forget = acts.c_prev[j] * fg * (1.0 - fg);
        let k_cell = ig * (1.0 - cg * cg);
        let k_out = tc * og * (1.0 - og);
        let k_c_to_h = og * (1.0 - tc * tc);

        let jc_row = out.jc.row_mut(j);
        for (dst, src) in jc_row.iter_mut().zip(js.jc.row(j)) {
            *dst = fg * src;
        }
        contrib_o.fill(0.0);
        for &l in mask.row(j) {
            let coef = k_in * p.gates[IN].w[(j, l)]
                + k_forget * p.gates[FORGET].w[(j, l)]
                + k_cell * p.gates[CELL].w[(j, l)];
            let src = js.jh.row(l);
            axpy(coef, src, jc_row);
            axpy(p.gates[OUT].w[(j, l)], src, &mut contrib_o);
        }
        add_immediate(jc_row, layout, IN, j, &z, k_in);
        add_immediate(jc_row, layout, FORGET, j, &z, k_forget);
        add_immediate(jc_row, layout, CELL, j, &z, k_cell);
        add_immediate(&mut contrib_o, layout, OUT, j, &z, 1.0);

        let jc_row = out.jc.row(j);
        let jh_row = out.jh.row_mut(j);
        let mut finite = true;
        for ((dst, c), o) in jh_row.iter_mut().zip(jc_row).zip(&contrib_o) {
            *dst = k_c_to_h * c + k_out * o;
            finite &= dst.is_finite() && c.is_finite();
        }
        if !finite {
            return Err(Error::Diverged { step });
        }
    }
    Ok(())
}

pub fn lstm_rtrl_step(
    js: &LstmJacobianState,
    p: &LstmParams,
    mask: &PropagationMask,
    acts: &GateActivations,
    step: usize,
) -> Result<LstmJacobianState> {
    let mut out = LstmJacobianState::zeros(p.n(), p.m());
    lstm_rtrl_step_into(js, p, mask, acts, step, &mut out)?;
    Ok(out)
}

/// Sparse-RTRL engine for the LSTM. Supports full RTRL, sparse RTRL and
/// traces (`k = 0`, which still keeps the exact cell path).
#[derive(Debug, Clone)]
pub struct LstmEngine {
    spec: EngineSpec,
    js: LstmJacobianState,
    scratch: LstmJacobianState,
    selector: MaskSelector,
}

/// Largest-magnitude recurrent weight of the four gates, used as the
/// weight score for oracle selection on the LSTM.
fn gate_weight_scores(p: &LstmParams) -> Matrix {
    let n = p.n();
    Matrix::from_fn(n, n, |i, l| {
        p.gates.iter().map(|g| g.w[(i, l)].abs()).fold(0.0, f64::max)
    })
}

impl LstmEngine {
    pub fn new<R: Rng + ?Sized>(spec: EngineSpec, p: &LstmParams, mask_rng: &mut R) -> Result<Self> {
        let n = p.n();
        spec.validate(n)?;
        let selector = match &spec {
            EngineSpec::FullRtrl => MaskSelector::fixed(PropagationMask::full(n)),
            EngineSpec::Traces => MaskSelector::fixed(PropagationMask::empty(n)),
            EngineSpec::SparseRtrl { k, strategy } => {
                MaskSelector::new(*strategy, *k, &gate_weight_scores(p), mask_rng)?
            }
            other => {
                return Err(Error::Invalid(format!(
                    "engine {} is not available for the LSTM",
                    other.label()
                )))
            }
        };
        Ok(Self {
            spec,
            js: LstmJacobianState::zeros(n, p.m()),
            scratch: LstmJacobianState::zeros(n, p.m()),
            selector,
        })
    }

    pub fn spec(&self) -> &EngineSpec {
        &self.spec
    }

    pub fn reset(&mut self) {
        self.js.reset();
    }

    pub fn observe(&mut self, p: &LstmParams, acts: &GateActivations, step: usize) -> Result<()> {
        if self.selector.strategy() == Strategy::Dynamic {
            let norms: Vec<f64> = (0..p.n()).map(|l| crate::tensor::norm(self.js.jh.row(l))).collect();
            self.selector.update(step, &gate_weight_scores(p), &norms)?;
        } else if self.selector.strategy().recompute_every().is_some() {
            self.selector.update(step, &gate_weight_scores(p), &[])?;
        }
        lstm_rtrl_step_into(&self.js, p, self.selector.mask(), acts, step, &mut self.scratch)?;
        std::mem::swap(&mut self.js, &mut self.scratch);
        Ok(())
    }

    pub fn gradient(&self, p: &LstmParams, dl_dy: &[f64], h: &[f64]) -> ParamGradient {
        assemble_gradient(dl_dy, &p.w_out, h, &self.js.jh)
    }

    pub fn state(&self) -> &LstmJacobianState {
        &self.js
    }

    pub fn mask(&self) -> &PropagationMask {
        self.selector.mask()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_half_open_gates() {
        let p = LstmParams::zeros(3, 2, 1);
        let s = p.forward(&[0.0; 3], &[0.0; 3], &[0.4, -0.6]);
        assert_eq!(s.gates.input, vec![0.5; 3]);
        assert_eq!(s.gates.forget, vec![0.5; 3]);
        assert_eq!(s.gates.output, vec![0.5; 3]);
        assert_eq!(s.c, vec![0.0; 3]);
        assert_eq!(s.h, vec![0.0; 3]);
    }

    #[test]
    fn saturated_forget_gate_is_a_highway() {
        let mut p = LstmParams::zeros(2, 1, 1);
        p.gates[FORGET].b = vec![1e3; 2];
        p.gates[IN].b = vec![-1e3; 2];
        let c_prev = [0.37, -1.25];
        let s = p.forward(&[0.1, 0.2], &c_prev, &[0.5]);
        assert_eq!(s.c, c_prev.to_vec());
    }

    // Scalar-loop oracle for one step.
    #[test]
    fn random_instance_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = LstmParams::init(3, 2, 1, &mut rng);
        let (h_prev, c_prev, x) = ([0.2, -0.1, 0.4], [0.5, -0.3, 0.05], [1.0, -0.5]);
        let s = p.forward(&h_prev, &c_prev, &x);
        for j in 0..3 {
            let mut a = [0.0; 4];
            for q in 0..4 {
                a[q] = p.gates[q].b[j];
                for l in 0..3 {
                    a[q] += p.gates[q].w[(j, l)] * h_prev[l];
                }
                for l in 0..2 {
                    a[q] += p.gates[q].w[(j, 3 + l)] * x[l];
                }
            }
            let sg = |v: f64| 1.0 / (1.0 + (-v).exp());
            let c = sg(a[1]) * c_prev[j] + sg(a[0]) * a[2].tanh();
            let h = sg(a[3]) * c.tanh();
            assert!((s.c[j] - c).abs() < 1e-15);
            assert!((s.h[j] - h).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_recurrent_gate_weights_make_mask_irrelevant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = LstmParams::init(4, 1, 1, &mut rng);
        for g in &mut p.gates {
            for i in 0..4 {
                for l in 0..4 {
                    g.w[(i, l)] = 0.0;
                }
            }
        }
        let mut full = LstmJacobianState::zeros(4, 1);
        let mut empty = LstmJacobianState::zeros(4, 1);
        let (mut h, mut c) = (vec![0.0; 4], vec![0.0; 4]);
        for t in 1..=6 {
            let s = p.forward(&h, &c, &[(t as f64 * 0.3).sin()]);
            full = lstm_rtrl_step(&full, &p, &PropagationMask::full(4), &s.gates, t).unwrap();
            empty = lstm_rtrl_step(&empty, &p, &PropagationMask::empty(4), &s.gates, t).unwrap();
            assert_eq!(full, empty);
            h = s.h;
            c = s.c;
        }
    }

    #[test]
    fn first_step_is_pure_immediate_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = LstmParams::init(3, 1, 1, &mut rng);
        let s = p.forward(&[0.0; 3], &[0.0; 3], &[0.8]);
        let js = lstm_rtrl_step(&LstmJacobianState::zeros(3, 1), &p, &PropagationMask::full(3), &s.gates, 1).unwrap();
        // At step one with h_prev = c_prev = 0, Jh row j only touches gate
        // columns of row j, and the forget gate has no effect (c_prev = 0).
        let layout = p.layout();
        for j in 0..3 {
            for c in 0..layout.len() {
                let own_row = (0..4).any(|q| {
                    (layout.weight(q, j, 0)..layout.weight(q, j, 0) + 4).contains(&c) || layout.bias(q, j) == c
                });
                let is_forget = (layout.weight(FORGET, 0, 0)..layout.weight(CELL, 0, 0)).contains(&c);
                if !own_row || is_forget {
                    assert_eq!(js.jh[(j, c)], 0.0);
                }
            }
        }
    }

    #[test]
    fn engine_rejects_unsupported_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = LstmParams::init(3, 1, 1, &mut rng);
        assert!(LstmEngine::new(EngineSpec::Uoro, &p, &mut rng).is_err());
        assert!(LstmEngine::new(EngineSpec::Tbptt { window: 3 }, &p, &mut rng).is_err());
        assert!(LstmEngine::new(EngineSpec::SparseRtrl { k: 2, strategy: Strategy::Ring }, &p, &mut rng).is_ok());
    }

    #[test]
    fn checkpoint_roundtrip_with_gate_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = LstmParams::init(2, 2, 1, &mut rng);
        let mut buf = Vec::new();
        p.write_checkpoint(9, &mut buf).unwrap();
        let (q, h) = LstmParams::read_checkpoint(&buf[..]).unwrap();
        assert_eq!(p, q);
        assert_eq!(h.gate_order.unwrap()[1], "forget");
    }
}
