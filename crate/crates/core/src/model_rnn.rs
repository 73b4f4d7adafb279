//! Vanilla tanh RNN: `h_t = tanh(W_hh h_{t-1} + W_ih x_t + b_h)`,
//! `y_t = W_out h_t + b_out`.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{dot, Matrix, RecurrentLayout};

#[derive(Debug, Clone, PartialEq)]
pub struct RnnParams {
    pub w_hh: Matrix,
    pub w_ih: Matrix,
    pub b_h: Vec<f64>,
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

/// Output of one forward step.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnStep {
    pub h: Vec<f64>,
    pub y: Vec<f64>,
    pub pre: Vec<f64>,
}

impl RnnParams {
    pub fn zeros(n: usize, m: usize, o: usize) -> Self {
        Self {
            w_hh: Matrix::zeros(n, n),
            w_ih: Matrix::zeros(n, m),
            b_h: vec![0.0; n],
            w_out: Matrix::zeros(o, n),
            b_out: vec![0.0; o],
        }
    }

    /// Gaussian init: `W_hh ~ N(0, 1/n)`, `W_ih ~ N(0, 1/m)`,
    /// `W_out ~ N(0, 1/n)`, zero biases. Draw order is W_hh, W_ih, W_out.
    pub fn init<R: Rng + ?Sized>(n: usize, m: usize, o: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(n, m, o);
        let sh = 1.0 / (n as f64).sqrt();
        let si = 1.0 / (m.max(1) as f64).sqrt();
        for v in p.w_hh.as_mut_slice() {
            *v = sh * rng.sample::<f64, _>(StandardNormal);
        }
        for v in p.w_ih.as_mut_slice() {
            *v = si * rng.sample::<f64, _>(StandardNormal);
        }
        for v in p.w_out.as_mut_slice() {
            *v = sh * rng.sample::<f64, _>(StandardNormal);
        }
        p
    }

    pub fn n(&self) -> usize {
        self.w_hh.rows()
    }

    pub fn m(&self) -> usize {
        self.w_ih.cols()
    }

    pub fn o(&self) -> usize {
        self.w_out.rows()
    }

    pub fn layout(&self) -> RecurrentLayout {
        RecurrentLayout::new(self.n(), self.m())
    }

    pub fn validate(&self) -> Result<()> {
        let (n, m, o) = (self.n(), self.m(), self.o());
        if self.w_hh.cols() != n
            || self.w_ih.rows() != n
            || self.b_h.len() != n
            || self.w_out.cols() != n
            || self.b_out.len() != o
        {
            return Err(shape_err("RnnParams", format!("n={n}, m={m}, o={o}"), "inconsistent fields"));
        }
        if !self.to_flat().iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.layout().len() + self.o() * self.n() + self.o()
    }

    /// All parameters in `[W_hh, W_ih, b_h, W_out, b_out]` order; the first
    /// `P` entries line up with the sensitivity tensor's columns.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(self.w_hh.as_slice());
        v.extend_from_slice(self.w_ih.as_slice());
        v.extend_from_slice(&self.b_h);
        v.extend_from_slice(self.w_out.as_slice());
        v.extend_from_slice(&self.b_out);
        v
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(shape_err("RnnParams::set_flat", self.num_params(), flat.len()));
        }
        let mut rest = flat;
        for dst in [
            self.w_hh.as_mut_slice(),
            self.w_ih.as_mut_slice(),
            self.b_h.as_mut_slice(),
            self.w_out.as_mut_slice(),
            self.b_out.as_mut_slice(),
        ] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
        Ok(())
    }

    pub fn forward(&self, h_prev: &[f64], x: &[f64]) -> RnnStep {
        rnn_forward(self, h_prev, x)
    }

    /// Write a checkpoint: one JSON header line, then the flat parameter
    /// vector as little-endian `f64`.
    pub fn write_checkpoint<W: Write>(&self, seed: u64, mut w: W) -> Result<()> {
        let header = CheckpointHeader {
            n: self.n(),
            m: self.m(),
            o: self.o(),
            seed,
            fields: ["w_hh", "w_ih", "b_h", "w_out", "b_out"]
                .map(String::from)
                .to_vec(),
            gate_order: None,
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
        let mut p = Self::zeros(header.n, header.m, header.o);
        p.set_flat(&flat)?;
        Ok((p, header))
    }
}

/// JSON header shared by the RNN and LSTM checkpoint files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub n: usize,
    pub m: usize,
    pub o: usize,
    pub seed: u64,
    pub fields: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_order: Option<Vec<String>>,
}

pub(crate) fn read_checkpoint_parts<R: BufRead>(mut r: R) -> Result<(CheckpointHeader, Vec<f64>)> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    let header: CheckpointHeader = serde_json::from_str(line.trim_end())?;
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format("payload is not a whole number of f64".into()));
    }
    let flat = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((header, flat))
}

pub fn rnn_forward(p: &RnnParams, h_prev: &[f64], x: &[f64]) -> RnnStep {
    let n = p.n();
    let pre: Vec<f64> = (0..n)
        .map(|i| dot(p.w_hh.row(i), h_prev) + dot(p.w_ih.row(i), x) + p.b_h[i])
        .collect();
    let h: Vec<f64> = pre.iter().map(|a| a.tanh()).collect();
    let y = (0..p.o())
        .map(|r| dot(p.w_out.row(r), &h) + p.b_out[r])
        .collect();
    RnnStep { h, y, pre }
}

/// Immediate derivative structure of one step: `D_t` as its diagonal and
/// `B_t` in compact form (the pre-activation inputs).
#[derive(Debug, Clone, PartialEq)]
pub struct ImmediateDerivs {
    /// `1 - h_t^2`
    pub d: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub x: Vec<f64>,
}

pub fn immediate_derivs(h: &[f64], h_prev: &[f64], x: &[f64]) -> ImmediateDerivs {
    ImmediateDerivs {
        d: h.iter().map(|v| 1.0 - v * v).collect(),
        h_prev: h_prev.to_vec(),
        x: x.to_vec(),
    }
}

impl ImmediateDerivs {
    pub fn n(&self) -> usize {
        self.d.len()
    }

    /// Dense `B_t`, shape `(n, P)`: row `i` holds `h_prev` in the block of
    /// `W_hh` row `i`, `x` in the block of `W_ih` row `i`, and 1 at `b_h[i]`.
    pub fn expand(&self) -> Matrix {
        let layout = RecurrentLayout::new(self.n(), self.x.len());
        let mut b = Matrix::zeros(layout.n, layout.len());
        for i in 0..layout.n {
            for (k, &v) in self.h_prev.iter().enumerate() {
                b[(i, layout.whh(i, k))] = v;
            }
            for (k, &v) in self.x.iter().enumerate() {
                b[(i, layout.wih(i, k))] = v;
            }
            b[(i, layout.bh(i))] = 1.0;
        }
        b
    }

    /// Dense `D_t B_t`.
    pub fn expand_scaled(&self) -> Matrix {
        let mut b = self.expand();
        for (i, &d) in self.d.iter().enumerate() {
            b.row_mut(i).iter_mut().for_each(|v| *v *= d);
        }
        b
    }
}
