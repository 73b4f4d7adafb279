//! Dense matrices, the forward-mode sensitivity state and the masked
//! contraction kernel.
//!
//! The sensitivity tensor `J[i, j, k] = dh_i / dtheta_jk` is stored flattened
//! as a single row-major `(n, P)` matrix whose columns are laid out group by
//! group: all of `W_hh` (row-major), then `W_ih` (row-major), then `b_h`.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::model_rnn::ImmediateDerivs;

/// Row-major dense matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "Matrix::from_vec",
                rows * cols,
                data.len(),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.fill(v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self * v` for a column vector `v`.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.cols, "matvec: vector length");
        (0..self.rows)
            .map(|i| dot(self.row(i), v))
            .collect()
    }

    /// `self^T * v`.
    pub fn matvec_t(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows, "matvec_t: vector length");
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            if vi != 0.0 {
                axpy(vi, self.row(i), &mut out);
            }
        }
        out
    }

    /// Copy of the column range `[start, end)`.
    pub fn columns(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.cols);
        let cols = end - start;
        let mut out = Matrix::zeros(self.rows, cols);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[start..end]);
        }
        out
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += a * x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// The three recurrent parameter groups, in storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Whh,
    Wih,
    Bh,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Whh, ParamGroup::Wih, ParamGroup::Bh];
}

/// Column layout of the flattened recurrent parameter vector for a network
/// with `n` hidden units and `m` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurrentLayout {
    pub n: usize,
    pub m: usize,
}

impl RecurrentLayout {
    pub fn new(n: usize, m: usize) -> Self {
        Self { n, m }
    }

    /// Total number of recurrent parameters `P = n^2 + n m + n`.
    pub fn len(&self) -> usize {
        self.n * self.n + self.n * self.m + self.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self, g: ParamGroup) -> std::ops::Range<usize> {
        let (n, m) = (self.n, self.m);
        match g {
            ParamGroup::Whh => 0..n * n,
            ParamGroup::Wih => n * n..n * n + n * m,
            ParamGroup::Bh => n * n + n * m..n * n + n * m + n,
        }
    }

    #[inline]
    pub fn whh(&self, j: usize, k: usize) -> usize {
        j * self.n + k
    }

    #[inline]
    pub fn wih(&self, j: usize, k: usize) -> usize {
        self.n * self.n + j * self.m + k
    }

    #[inline]
    pub fn bh(&self, j: usize) -> usize {
        self.n * self.n + self.n * self.m + j
    }
}

/// Sensitivity of the hidden state to every recurrent parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianState {
    layout: RecurrentLayout,
    j: Matrix,
}

impl JacobianState {
    /// The state at `t = 0`: parameters have not yet influenced anything.
    pub fn zeros(n: usize, m: usize) -> Self {
        let layout = RecurrentLayout::new(n, m);
        Self {
            layout,
            j: Matrix::zeros(n, layout.len()),
        }
    }

    pub fn from_matrix(n: usize, m: usize, j: Matrix) -> Result<Self> {
        let layout = RecurrentLayout::new(n, m);
        if j.shape() != (n, layout.len()) {
            return Err(shape_err(
                "JacobianState::from_matrix",
                format!("({n}, {})", layout.len()),
                format!("{:?}", j.shape()),
            ));
        }
        Ok(Self { layout, j })
    }

    pub fn layout(&self) -> RecurrentLayout {
        self.layout
    }

    pub fn n(&self) -> usize {
        self.layout.n
    }

    pub fn m(&self) -> usize {
        self.layout.m
    }

    pub fn matrix(&self) -> &Matrix {
        &self.j
    }

    pub fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.j
    }

    /// Copy of one parameter group's block, shape `(n, |group|)`.
    pub fn group(&self, g: ParamGroup) -> Matrix {
        let r = self.layout.range(g);
        self.j.columns(r.start, r.end)
    }

    pub fn reset(&mut self) {
        self.j.fill(0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.j.is_finite()
    }

    /// Euclidean norm of row `l` across all groups.
    pub fn row_norm(&self, l: usize) -> f64 {
        norm(self.j.row(l))
    }

    /// Serialize in the `JAC1` snapshot format.
    pub fn write_dump<W: Write>(&self, step: u64, mut w: W) -> Result<()> {
        w.write_all(b"JAC1")?;
        for v in [self.n() as u64, self.m() as u64, step] {
            w.write_all(&v.to_le_bytes())?;
        }
        for g in ParamGroup::ALL {
            let r = self.layout.range(g);
            for i in 0..self.n() {
                for v in &self.j.row(i)[r.clone()] {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Parse a `JAC1` snapshot, returning the state and its step index.
    pub fn read_dump<R: Read>(mut r: R) -> Result<(Self, u64)> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != b"JAC1" {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let mut word = [0u8; 8];
        let mut header = [0u64; 3];
        for h in header.iter_mut() {
            r.read_exact(&mut word)?;
            *h = u64::from_le_bytes(word);
        }
        let (n, m, step) = (header[0] as usize, header[1] as usize, header[2]);
        let mut state = Self::zeros(n, m);
        let layout = state.layout;
        for g in ParamGroup::ALL {
            let range = layout.range(g);
            for i in 0..n {
                for v in &mut state.j.row_mut(i)[range.clone()] {
                    r.read_exact(&mut word)?;
                    *v = f64::from_le_bytes(word);
                }
            }
        }
        Ok((state, step))
    }
}

/// Binary `n x n` selection of which incoming Jacobian paths each unit
/// propagates, stored as sorted per-row support sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PropagationMask {
    n: usize,
    k: usize,
    rows: Vec<Vec<usize>>,
}

impl PropagationMask {
    pub fn full(n: usize) -> Self {
        Self {
            n,
            k: n,
            rows: (0..n).map(|_| (0..n).collect()).collect(),
        }
    }

    pub fn empty(n: usize) -> Self {
        Self {
            n,
            k: 0,
            rows: vec![Vec::new(); n],
        }
    }

    /// Build from per-row support sets; every row must hold exactly `k`
    /// distinct in-range indices.
    pub fn from_rows(n: usize, rows: Vec<Vec<usize>>) -> Result<Self> {
        if rows.len() != n {
            return Err(Error::Mask(format!("expected {n} rows, got {}", rows.len())));
        }
        let k = rows.first().map_or(0, Vec::len);
        let mut sorted = Vec::with_capacity(n);
        for (i, mut row) in rows.into_iter().enumerate() {
            if row.len() != k {
                return Err(Error::Mask(format!(
                    "row {i} has {} entries, expected {k}",
                    row.len()
                )));
            }
            row.sort_unstable();
            if row.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::Mask(format!("row {i} has duplicate indices")));
            }
            if row.last().is_some_and(|&l| l >= n) {
                return Err(Error::Mask(format!("row {i} index out of range")));
            }
            sorted.push(row);
        }
        Ok(Self { n, k, rows: sorted })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Support set `S_i` of row `i`, ascending.
    pub fn row(&self, i: usize) -> &[usize] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn contains(&self, i: usize, l: usize) -> bool {
        self.rows[i].binary_search(&l).is_ok()
    }

    pub fn is_full(&self) -> bool {
        self.k == self.n
    }

    /// Dense 0/1 matrix `M`.
    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        for (i, row) in self.rows.iter().enumerate() {
            for &l in row {
                m[(i, l)] = 1.0;
            }
        }
        m
    }
}

fn check_contract_shapes(w: &Matrix, mask: &PropagationMask, j: &Matrix) -> Result<()> {
    let n = w.rows();
    if w.cols() != n {
        return Err(shape_err("masked_contract", "square W", format!("{:?}", w.shape())));
    }
    if mask.n() != n {
        return Err(shape_err("masked_contract", format!("mask n={n}"), mask.n()));
    }
    if j.rows() != n {
        return Err(shape_err("masked_contract", format!("J rows={n}"), j.rows()));
    }
    Ok(())
}

/// Row `i` of `out` becomes `sum_{l in S_i} W[i,l] * J[l,:]`.
///
/// Only selected columns are visited, so the cost is `k * n * P`. Columns are
/// walked in cache-sized blocks.
fn contract_rows(w: &Matrix, mask: &PropagationMask, j: &Matrix, out: &mut Matrix) {
    const BLOCK: usize = 512;
    let cols = j.cols();
    out.fill(0.0);
    for start in (0..cols).step_by(BLOCK) {
        let end = (start + BLOCK).min(cols);
        for i in 0..w.rows() {
            let w_row = w.row(i);
            let out_row = &mut out.row_mut(i)[start..end];
            for &l in mask.row(i) {
                axpy(w_row[l], &j.row(l)[start..end], out_row);
            }
        }
    }
}

/// `(W ⊙ M) J`, skipping masked-out terms.
///
/// `step` is only used to label a divergence error.
pub fn masked_contract(
    w: &Matrix,
    mask: &PropagationMask,
    j: &Matrix,
    step: usize,
) -> Result<Matrix> {
    check_contract_shapes(w, mask, j)?;
    if !w.is_finite() || !j.is_finite() {
        return Err(Error::Diverged { step });
    }
    let mut out = Matrix::zeros(j.rows(), j.cols());
    contract_rows(w, mask, j, &mut out);
    Ok(out)
}

/// One masked RTRL update, `J_t = D_t((W_hh ⊙ M) J_{t-1} + B_t)`, written
/// into `out`. The immediate term `B_t` is never masked.
pub fn rtrl_step_into(
    j_prev: &JacobianState,
    w_hh: &Matrix,
    mask: &PropagationMask,
    derivs: &ImmediateDerivs,
    step: usize,
    out: &mut JacobianState,
) -> Result<()> {
    let layout = j_prev.layout();
    let (n, m) = (layout.n, layout.m);
    check_contract_shapes(w_hh, mask, j_prev.matrix())?;
    if derivs.d.len() != n || derivs.h_prev.len() != n || derivs.x.len() != m {
        return Err(shape_err(
            "rtrl_step",
            format!("d,h_prev of len {n}, x of len {m}"),
            format!(
                "{}, {}, {}",
                derivs.d.len(),
                derivs.h_prev.len(),
                derivs.x.len()
            ),
        ));
    }
    if out.layout() != layout {
        *out = JacobianState::zeros(n, m);
    }
    contract_rows(w_hh, mask, j_prev.matrix(), out.matrix_mut());
    let outm = out.matrix_mut();
    for i in 0..n {
        let row = outm.row_mut(i);
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

/// Allocating form of [`rtrl_step_into`].
pub fn rtrl_step(
    j_prev: &JacobianState,
    w_hh: &Matrix,
    mask: &PropagationMask,
    derivs: &ImmediateDerivs,
    step: usize,
) -> Result<JacobianState> {
    let mut out = JacobianState::zeros(j_prev.n(), j_prev.m());
    rtrl_step_into(j_prev, w_hh, mask, derivs, step, &mut out)?;
    Ok(out)
}
