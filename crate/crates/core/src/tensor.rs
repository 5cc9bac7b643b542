//! Dense row-major `f64` tensors and the handful of row-wise kernels the
//! distillation losses are built from.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Lower clamp applied to every logarithm argument.
pub const LOG_CLAMP: f64 = 1e-12;

/// `ln(max(x, LOG_CLAMP))`.
#[inline]
pub fn clamped_ln(x: f64) -> f64 {
    libm::log(if x > LOG_CLAMP { x } else { LOG_CLAMP })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting zero-sized dimensions, a data length that
    /// disagrees with the shape, and non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::param("shape", "dimensions must be positive"));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "Tensor::new" });
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Unchecked constructor for kernels whose output shape is known good.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![0.0; n])
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::from_parts(shape.to_vec(), vec![value; n])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![1, 1], vec![value])
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        Self::matrix(rows.len(), cols, rows.concat())
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_parts(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of the trailing dimensions (the row width when viewed as a
    /// matrix).
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    /// Views the tensor as `rows × cols`.
    pub fn as_matrix(&self) -> Tensor {
        Self::from_parts(vec![self.rows(), self.cols()], self.data.clone())
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, &shape));
        }
        Ok(Self::from_parts(shape, self.data))
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Selects rows by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let c = self.cols();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = idx.len();
        Self::from_parts(shape, data)
    }

    pub fn concat_rows(&self, other: &Tensor) -> Result<Tensor> {
        if self.cols() != other.cols() {
            return Err(Error::shape("concat_rows", &self.shape, &other.shape));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Self::from_parts(
            vec![self.rows() + other.rows(), self.cols()],
            data,
        ))
    }

    pub fn transpose(&self) -> Tensor {
        let (r, c) = (self.rows(), self.cols());
        Self::from_fn(c, r, |i, j| self.data[j * c + i])
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, Layout::Normal, &other.data, Layout::Normal, &mut out, false);
        Ok(Self::from_parts(vec![m, n], out))
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = (self.rows(), self.cols());
        let (n, k2) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::shape("matmul_t", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &self.data, Layout::Normal, &other.data, Layout::Transposed, &mut out, false);
        Ok(Self::from_parts(vec![m, n], out))
    }

    /// Adds `bias` (length `cols`) to every row.
    pub fn add_row(&self, bias: &[f64]) -> Result<Tensor> {
        if bias.len() != self.cols() {
            return Err(Error::shape("add_row", &self.shape, &[bias.len()]));
        }
        let mut out = self.clone();
        for r in out.data.chunks_mut(bias.len()) {
            for (v, b) in r.iter_mut().zip(bias) {
                *v += b;
            }
        }
        Ok(out)
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&self, op: &'static str) -> Result<Tensor> {
        self.normalize_rows_floored(op, 0.0)
    }

    /// `x / max(‖x‖, floor)` per row. With `floor = 0` a zero row is an
    /// error; a positive floor maps it to zero instead.
    pub fn normalize_rows_floored(&self, op: &'static str, floor: f64) -> Result<Tensor> {
        let mut out = self.as_matrix();
        for (i, r) in out.data.chunks_mut(self.cols()).enumerate() {
            let n = l2_norm(r).max(floor);
            if n == 0.0 {
                return Err(Error::ZeroNorm { op, row: i });
            }
            r.iter_mut().for_each(|v| *v /= n);
        }
        Ok(out)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub(crate) enum Layout {
    Normal,
    Transposed,
}

/// `out (+)= op(a) · op(b)` with `op(a)` of shape `m×k` and `op(b)` of shape
/// `k×n`. Storage of each operand is row-major in its *untransposed* form.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    out: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = match la {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the assertion above guarantees every index reachable through
    // the given strides lies inside the three slices, and `out` does not
    // alias `a` or `b` (it is a distinct `&mut`).
    #[allow(unsafe_code)]
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-wise softmax of `m / tau`, stabilised by per-row max subtraction.
pub fn softmax_rows(m: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    let mut out = m.as_matrix();
    for r in out.data.chunks_mut(m.cols()) {
        softmax_in_place(r, tau);
    }
    Ok(out)
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::param("tau", "temperature must be positive"));
    }
    Ok(())
}

pub(crate) fn softmax_in_place(r: &mut [f64], tau: f64) {
    let max = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in r.iter_mut() {
        *v = libm::exp((*v - max) / tau);
        s += *v;
    }
    r.iter_mut().for_each(|v| *v /= s);
}

/// Row-wise `log softmax(m / tau)`; entries flagged in `exclude` are left out
/// of the normaliser and reported as 0.
pub(crate) fn log_softmax_in_place(r: &mut [f64], tau: f64, exclude: Option<&[bool]>) {
    let skip = |j: usize| exclude.is_some_and(|e| e[j]);
    let mut max = f64::NEG_INFINITY;
    for (j, &v) in r.iter().enumerate() {
        if !skip(j) && v > max {
            max = v;
        }
    }
    let mut s = 0.0;
    for (j, &v) in r.iter().enumerate() {
        if !skip(j) {
            s += libm::exp((v - max) / tau);
        }
    }
    let lse = libm::log(s);
    for (j, v) in r.iter_mut().enumerate() {
        *v = if skip(j) { 0.0 } else { (*v - max) / tau - lse };
    }
}

/// `𝒜[i,j] = ⟨a_i, b_j⟩ / (‖a_i‖‖b_j‖)`.
pub fn cosine_similarity_matrix(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    cosine_similarity_floored(a, b, 0.0)
}

/// [`cosine_similarity_matrix`] with norms floored as in
/// [`Tensor::normalize_rows_floored`]; zero rows then score 0 against
/// everything.
pub fn cosine_similarity_floored(a: &Tensor, b: &Tensor, floor: f64) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::shape("cosine_similarity_matrix", a.shape(), b.shape()));
    }
    let an = a.normalize_rows_floored("cosine_similarity_matrix(a)", floor)?;
    let bn = b.normalize_rows_floored("cosine_similarity_matrix(b)", floor)?;
    let mut s = an.matmul_t(&bn)?;
    // Rounding can push |cos| a hair past one.
    s.data.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(s)
}

/// Checks that every row of `p` is a probability distribution.
pub fn check_distribution_rows(p: &Tensor, tol: f64) -> Result<()> {
    for i in 0..p.rows() {
        let r = p.row(i);
        let s: f64 = r.iter().sum();
        if (s - 1.0).abs() > tol || r.iter().any(|&v| v < 0.0) {
            return Err(Error::Distribution { row: i, sum: s });
        }
    }
    Ok(())
}

/// Mean over rows of `Σ_k p log(p/q)`, logs clamped at [`LOG_CLAMP`].
pub fn kl_divergence_rows(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(Error::shape("kl_divergence_rows", p.shape(), q.shape()));
    }
    check_distribution_rows(p, 1e-6)?;
    check_distribution_rows(q, 1e-6)?;
    let mut total = 0.0;
    for i in 0..p.rows() {
        total += p
            .row(i)
            .iter()
            .zip(q.row(i))
            .map(|(&pk, &qk)| pk * (clamped_ln(pk) - clamped_ln(qk)))
            .sum::<f64>();
    }
    Ok(total / p.rows() as f64)
}
