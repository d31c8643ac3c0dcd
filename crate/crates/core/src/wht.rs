//! Order-n 2D Walsh-Hadamard bases and the token-axis projections built on them.
//!
//! A feature map with `L` tokens is viewed as an `n x n` grid (row-major,
//! `t = p * n + q`) with `n` the smallest power of two such that `n * n >= L`;
//! tokens `L..n*n` are zero padding. Base `B(i, j)` is the outer product of the
//! sequency-ordered 1D Walsh rows `i` and `j`, so low indices are low
//! frequencies and `B(0, 0)` is the all-ones (DC) base.
//!
//! Both projection directions apply the scale `1 / n`, which makes the complete
//! base set an orthonormal change of basis on the padded token axis.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// A 0-based 2D base index `(i, j)`. Serializes as `[i, j]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[usize; 2]", into = "[usize; 2]")]
pub struct BaseIndex {
    pub i: usize,
    pub j: usize,
}

impl BaseIndex {
    pub const DC: BaseIndex = BaseIndex { i: 0, j: 0 };

    pub fn new(i: usize, j: usize) -> Self {
        Self { i, j }
    }

    /// Low-pass ordering key: by `i + j`, then by `i`.
    pub fn lowpass_key(&self) -> (usize, usize) {
        (self.i + self.j, self.i)
    }
}

impl From<[usize; 2]> for BaseIndex {
    fn from([i, j]: [usize; 2]) -> Self {
        Self { i, j }
    }
}

impl From<BaseIndex> for [usize; 2] {
    fn from(b: BaseIndex) -> Self {
        [b.i, b.j]
    }
}

impl From<(usize, usize)> for BaseIndex {
    fn from((i, j): (usize, usize)) -> Self {
        Self { i, j }
    }
}

/// Precomputed context for an order-`n` 2D transform over `signal_len` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct WhtPlan {
    n: usize,
    signal_len: usize,
    // seq_to_nat[s] is the Sylvester (natural order) row holding sequency s.
    seq_to_nat: Vec<usize>,
    norm_scale: f64,
}

impl WhtPlan {
    pub fn new(n: usize, signal_len: usize) -> Result<Self> {
        if n == 0 || !n.is_power_of_two() {
            return Err(Error::Wht(format!("order {n} is not a power of two")));
        }
        let padded = n
            .checked_mul(n)
            .ok_or_else(|| Error::Wht(format!("order {n} too large")))?;
        if signal_len == 0 || signal_len > padded {
            return Err(Error::Wht(format!(
                "signal length {signal_len} does not fit order {n} (padded length {padded})"
            )));
        }
        let bits = n.trailing_zeros();
        let seq_to_nat = (0..n).map(|s| bit_reverse(gray(s), bits)).collect();
        Ok(Self {
            n,
            signal_len,
            seq_to_nat,
            norm_scale: 1.0 / n as f64,
        })
    }

    /// Smallest order whose padded length holds `signal_len` tokens.
    pub fn for_len(signal_len: usize) -> Result<Self> {
        if signal_len == 0 {
            return Err(Error::Wht("signal length must be positive".into()));
        }
        let mut n = 1usize;
        while n * n < signal_len {
            n *= 2;
        }
        Self::new(n, signal_len)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn padded_len(&self) -> usize {
        self.n * self.n
    }

    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn norm_scale(&self) -> f64 {
        self.norm_scale
    }

    /// Natural-order row index for each sequency index.
    pub fn ordering(&self) -> &[usize] {
        &self.seq_to_nat
    }

    /// Same order and ordering table, different number of tokens.
    pub fn with_signal_len(&self, signal_len: usize) -> Result<Self> {
        Self::new(self.n, signal_len)
    }

    /// Position of base `(i, j)` in the natural-order length-`n*n` transform.
    #[inline]
    fn natural_slot(&self, b: BaseIndex) -> usize {
        self.seq_to_nat[b.i] * self.n + self.seq_to_nat[b.j]
    }

    fn check_indices(&self, indices: &[BaseIndex]) -> Result<()> {
        if indices.is_empty() {
            return Err(Error::Wht("empty base list".into()));
        }
        let mut seen = HashSet::with_capacity(indices.len());
        for &b in indices {
            if b.i >= self.n || b.j >= self.n {
                return Err(Error::Wht(format!(
                    "base ({}, {}) outside order {}",
                    b.i, b.j, self.n
                )));
            }
            if !seen.insert(b) {
                return Err(Error::Wht(format!("duplicate base ({}, {})", b.i, b.j)));
            }
        }
        Ok(())
    }
}

fn gray(s: usize) -> usize {
    s ^ (s >> 1)
}

fn bit_reverse(v: usize, bits: u32) -> usize {
    if bits == 0 {
        0
    } else {
        v.reverse_bits() >> (usize::BITS - bits)
    }
}

// Unnormalized Sylvester-order transform.
fn fwht_in_place(v: &mut [f64]) {
    let n = v.len();
    let mut h = 1;
    while h < n {
        for block in (0..n).step_by(2 * h) {
            for k in block..block + h {
                let (a, b) = (v[k], v[k + h]);
                v[k] = a + b;
                v[k + h] = a - b;
            }
        }
        h *= 2;
    }
}

// Same butterfly over the rows of a row-major `len x width` buffer, so a whole
// channel row moves per butterfly.
fn fwht_rows_in_place(buf: &mut [f64], len: usize, width: usize) {
    let mut h = 1;
    while h < len {
        for block in (0..len).step_by(2 * h) {
            for k in block..block + h {
                let (lo, hi) = buf.split_at_mut((k + h) * width);
                let a = &mut lo[k * width..(k + 1) * width];
                let b = &mut hi[..width];
                for (x, y) in a.iter_mut().zip(b.iter_mut()) {
                    let (s, d) = (*x + *y, *x - *y);
                    *x = s;
                    *y = d;
                }
            }
        }
        h *= 2;
    }
}

/// Unnormalized 1D transform of a length-`n` vector, returned in sequency order.
pub fn fast_wht_1d(v: &[f64], plan: &WhtPlan) -> Result<Vec<f64>> {
    if v.len() != plan.n {
        return Err(Error::Wht(format!(
            "vector length {} does not match order {}",
            v.len(),
            plan.n
        )));
    }
    let mut natural = v.to_vec();
    fwht_in_place(&mut natural);
    Ok(plan.seq_to_nat.iter().map(|&k| natural[k]).collect())
}

/// Sequency-ordered 1D Walsh row `s` of order `plan.n()`.
pub fn walsh_row(s: usize, plan: &WhtPlan) -> Vec<i8> {
    let k = plan.seq_to_nat[s];
    (0..plan.n)
        .map(|t| if (k & t).count_ones().is_multiple_of(2) { 1 } else { -1 })
        .collect()
}

/// A flattened 2D base: `values[p * n + q] = row_i[p] * row_j[q]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlatBase {
    pub i: usize,
    pub j: usize,
    pub values: Vec<i8>,
}

impl FlatBase {
    pub fn index(&self) -> BaseIndex {
        BaseIndex::new(self.i, self.j)
    }
}

/// All `n * n` flattened bases, ordered by `(i, j)`.
pub fn build_flat_bases(plan: &WhtPlan) -> Vec<FlatBase> {
    let rows: Vec<Vec<i8>> = (0..plan.n).map(|s| walsh_row(s, plan)).collect();
    let mut out = Vec::with_capacity(plan.padded_len());
    for (i, ri) in rows.iter().enumerate() {
        for (j, rj) in rows.iter().enumerate() {
            let values = ri
                .iter()
                .flat_map(|&a| rj.iter().map(move |&b| a * b))
                .collect();
            out.push(FlatBase { i, j, values });
        }
    }
    out
}

/// Explicit `n*n x r` matrix whose columns are the selected flattened bases.
pub fn projection_matrix(indices: &[BaseIndex], plan: &WhtPlan) -> Result<Matrix> {
    plan.check_indices(indices)?;
    let rows: Vec<Vec<i8>> = (0..plan.n).map(|s| walsh_row(s, plan)).collect();
    let n = plan.n;
    Matrix::from_fn(plan.padded_len(), indices.len(), |t, k| {
        let b = indices[k];
        (rows[b.i][t / n] * rows[b.j][t % n]) as f64
    })
}

fn check_signal(x: &Matrix, plan: &WhtPlan) -> Result<()> {
    if x.rows() > plan.padded_len() {
        return Err(Error::Wht(format!(
            "{} tokens exceed padded length {}",
            x.rows(),
            plan.padded_len()
        )));
    }
    if x.rows() != plan.signal_len {
        return Err(Error::Wht(format!(
            "{} tokens, plan expects {}",
            x.rows(),
            plan.signal_len
        )));
    }
    Ok(())
}

fn padded_buffer(x: &Matrix, plan: &WhtPlan) -> Vec<f64> {
    let mut buf = vec![0.0; plan.padded_len() * x.cols()];
    buf[..x.data().len()].copy_from_slice(x.data());
    buf
}

/// Full normalized 2D spectrum of `x` (`L x C`): returns an `n*n x C` matrix
/// whose row `i * n + j` holds the coefficients on `B(i, j)`.
pub fn spectrum(x: &Matrix, plan: &WhtPlan) -> Result<Matrix> {
    check_signal(x, plan)?;
    let c = x.cols();
    let mut buf = padded_buffer(x, plan);
    // H_n (x) H_n is the length n*n Sylvester matrix, so one pass over the
    // flattened token axis is the 2D transform.
    fwht_rows_in_place(&mut buf, plan.padded_len(), c);
    let n = plan.n;
    let mut out = vec![0.0; buf.len()];
    for i in 0..n {
        for j in 0..n {
            let src = plan.natural_slot(BaseIndex::new(i, j));
            let dst = i * n + j;
            for (o, &v) in out[dst * c..(dst + 1) * c]
                .iter_mut()
                .zip(&buf[src * c..(src + 1) * c])
            {
                *o = v * plan.norm_scale;
            }
        }
    }
    Matrix::from_vec(plan.padded_len(), c, out)
}

/// `x_hat = (1/n) * P^T * x_padded`, one row per selected base.
pub fn project(x: &Matrix, indices: &[BaseIndex], plan: &WhtPlan) -> Result<Matrix> {
    plan.check_indices(indices)?;
    check_signal(x, plan)?;
    let c = x.cols();
    let mut buf = padded_buffer(x, plan);
    fwht_rows_in_place(&mut buf, plan.padded_len(), c);
    let mut out = Vec::with_capacity(indices.len() * c);
    for &b in indices {
        let src = plan.natural_slot(b);
        out.extend(buf[src * c..(src + 1) * c].iter().map(|v| v * plan.norm_scale));
    }
    Matrix::from_vec(indices.len(), c, out)
}

/// `(1/n) * P * x_hat` truncated to the plan's `L` tokens.
pub fn reverse_project(xhat: &Matrix, indices: &[BaseIndex], plan: &WhtPlan) -> Result<Matrix> {
    plan.check_indices(indices)?;
    if xhat.rows() != indices.len() {
        return Err(Error::Wht(format!(
            "{} coefficient rows for {} bases",
            xhat.rows(),
            indices.len()
        )));
    }
    let c = xhat.cols();
    let mut buf = vec![0.0; plan.padded_len() * c];
    for (k, &b) in indices.iter().enumerate() {
        let dst = plan.natural_slot(b);
        buf[dst * c..(dst + 1) * c].copy_from_slice(xhat.row(k));
    }
    fwht_rows_in_place(&mut buf, plan.padded_len(), c);
    buf.truncate(plan.signal_len * c);
    for v in &mut buf {
        *v *= plan.norm_scale;
    }
    Matrix::from_vec(plan.signal_len, c, buf)
}

/// [`project`] computed as an explicit matrix product.
pub fn project_dense(x: &Matrix, indices: &[BaseIndex], plan: &WhtPlan) -> Result<Matrix> {
    check_signal(x, plan)?;
    let p = projection_matrix(indices, plan)?;
    let padded = Matrix::from_vec(plan.padded_len(), x.cols(), padded_buffer(x, plan))?;
    Ok(p.t_matmul(&padded)?.scale(plan.norm_scale))
}

/// [`reverse_project`] computed as an explicit matrix product.
pub fn reverse_project_dense(xhat: &Matrix, indices: &[BaseIndex], plan: &WhtPlan) -> Result<Matrix> {
    let p = projection_matrix(indices, plan)?;
    if xhat.rows() != indices.len() {
        return Err(Error::Wht(format!(
            "{} coefficient rows for {} bases",
            xhat.rows(),
            indices.len()
        )));
    }
    let full = p.matmul(xhat)?.scale(plan.norm_scale);
    full.row_block(0, plan.signal_len)
}
