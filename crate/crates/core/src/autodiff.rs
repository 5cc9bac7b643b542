//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! A [`Tape`] records every operation applied to its variables. Leaves are
//! either parameters (which receive gradients) or constants (which never do);
//! gradient flow is pruned through any subgraph that depends only on
//! constants, so frozen teacher tensors cost nothing in the backward pass.
//!
//! [`finite_diff_check`] is the independent oracle: it only ever evaluates
//! the forward pass, with perturbed parameters fed in as constants.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{self, clamped_ln, gemm, Layout, Tensor, LOG_CLAMP};
use crate::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Softplus(Var),
    Log(Var),
    NormalizeRows(Var, f64),
    SoftmaxRows(Var, f64),
    LogSoftmaxRows(Var, f64, Option<Vec<bool>>),
    Sum(Var),
    Mean(Var),
    ConcatRows(Var, Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::Softplus(..) => "softplus",
            Op::Log(..) => "log",
            Op::NormalizeRows(..) => "normalize_rows",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LogSoftmaxRows(..) => "log_softmax_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::ConcatRows(..) => "concat_rows",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-use recording of a computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros when the output does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        self.grads[v.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn as_matrix_shape(t: &Tensor) -> [usize; 2] {
    [t.rows(), t.cols()]
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients. Higher-rank tensors are viewed as
    /// matrices (leading dimension × the rest).
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t.as_matrix(), Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.as_matrix(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        let t = self.value(v);
        if t.len() != 1 {
            return Err(Error::Contract(alloc::format!(
                "expected a scalar, got shape {:?}",
                t.shape()
            )));
        }
        let x = t.item();
        if !x.is_finite() {
            // Report where the non-finite value first appeared.
            self.check_finite()?;
            return Err(Error::NonFinite {
                op: self.nodes[v.0].op.name(),
            });
        }
        Ok(x)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn row_vector(&self, op: &'static str, a: Var, r: Var) -> Result<()> {
        let (ta, tr) = (self.value(a), self.value(r));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(Error::shape(op, ta.shape(), tr.shape()));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul_t(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::MatMulT(a, b), ng))
    }

    /// Adds the `1×D` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        self.row_vector("add_row", a, r)?;
        let v = self.value(a).add_row(self.value(r).data())?;
        let ng = self.ng(&[a, r]);
        Ok(self.push(v, Op::AddRow(a, r), ng))
    }

    /// Multiplies every row of `a` element-wise by the `1×D` row `r`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        self.row_vector("mul_row", a, r)?;
        let rv = self.value(r).data().to_vec();
        let mut v = self.value(a).clone();
        for row in v.data_mut().chunks_mut(rv.len()) {
            row.iter_mut().zip(&rv).for_each(|(x, s)| *x *= s);
        }
        let ng = self.ng(&[a, r]);
        Ok(self.push(v, Op::MulRow(a, r), ng))
    }

    fn zip(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(op.name(), a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let v = Tensor::from_parts(ta.shape().to_vec(), data);
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Var {
        let v = self.value(a).map(f);
        let ng = self.ng(&[a]);
        self.push(v, op, ng)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::Scale(a, c), a, |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(Op::AddScalar(a), a, |x| x + c)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Op::Relu(a), a, |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(Op::Softplus(a), a, softplus)
    }

    /// `ln(max(a, 1e-12))`.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(Op::Log(a), a, clamped_ln)
    }

    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.normalize_rows_floored(a, 0.0)
    }

    /// `x / max(‖x‖, floor)` per row; see [`Tensor::normalize_rows_floored`].
    pub fn normalize_rows_floored(&mut self, a: Var, floor: f64) -> Result<Var> {
        let v = self.value(a).normalize_rows_floored("normalize_rows", floor)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::NormalizeRows(a, floor), ng))
    }

    pub fn softmax_rows(&mut self, a: Var, tau: f64) -> Result<Var> {
        let v = tensor::softmax_rows(self.value(a), tau)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::SoftmaxRows(a, tau), ng))
    }

    /// Row-wise `log softmax(a / tau)`. Entries marked in `exclude` (same
    /// shape as `a`) are dropped from the normaliser and read as zero.
    pub fn log_softmax_rows(&mut self, a: Var, tau: f64, exclude: Option<Vec<bool>>) -> Result<Var> {
        tensor::check_tau(tau)?;
        let mut v = self.value(a).clone();
        if let Some(e) = &exclude {
            if e.len() != v.len() {
                return Err(Error::shape("log_softmax_rows", v.shape(), &[e.len()]));
            }
        }
        let c = v.cols();
        for (i, r) in v.data_mut().chunks_mut(c).enumerate() {
            let mask = exclude.as_ref().map(|e| &e[i * c..(i + 1) * c]);
            tensor::log_softmax_in_place(r, tau, mask);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::LogSoftmaxRows(a, tau, exclude), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.sum() / t.len() as f64);
        let ng = self.ng(&[a]);
        self.push(v, Op::Mean(a), ng)
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).concat_rows(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::ConcatRows(a, b), ng))
    }

    /// Fails with [`Error::NonFinite`] naming the first operation that
    /// produced a NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.nodes.iter().find(|n| !n.value.is_finite()) {
            Some(n) => Err(Error::NonFinite { op: n.op.name() }),
            None => Ok(()),
        }
    }

    /// Reverse pass from the scalar `out`.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        if self.value(out).len() != 1 {
            return Err(Error::Contract(alloc::format!(
                "gradient requires a scalar output, got shape {:?}",
                self.value(out).shape()
            )));
        }
        self.check_finite()?;
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::scalar(1.0));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        if grads.iter().flatten().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite { op: "backward" });
        }
        Ok(Gradients { grads, shapes })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g
                .data_mut()
                .iter_mut()
                .zip(delta.data())
                .for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate_with(
        &self,
        grads: &mut [Option<Tensor>],
        v: Var,
        f: impl FnOnce(&mut [f64]),
    ) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.value(v).shape()));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let [m, k] = as_matrix_shape(ta);
                let n = tb.cols();
                self.accumulate_with(grads, *a, |out| {
                    gemm(m, n, k, gd, Layout::Normal, tb.data(), Layout::Transposed, out, true)
                });
                self.accumulate_with(grads, *b, |out| {
                    gemm(k, m, n, ta.data(), Layout::Transposed, gd, Layout::Normal, out, true)
                });
            }
            Op::MatMulT(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let [m, k] = as_matrix_shape(ta);
                let n = tb.rows();
                self.accumulate_with(grads, *a, |out| {
                    gemm(m, n, k, gd, Layout::Normal, tb.data(), Layout::Normal, out, true)
                });
                self.accumulate_with(grads, *b, |out| {
                    gemm(n, m, k, gd, Layout::Transposed, ta.data(), Layout::Normal, out, true)
                });
            }
            Op::AddRow(a, r) => {
                self.accumulate(grads, *a, g.clone());
                let c = g.cols();
                self.accumulate_with(grads, *r, |out| {
                    for row in gd.chunks(c) {
                        out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
                    }
                });
            }
            Op::MulRow(a, r) => {
                let (ta, tr) = (self.value(*a), self.value(*r));
                let c = ta.cols();
                self.accumulate_with(grads, *a, |out| {
                    for (orow, grow) in out.chunks_mut(c).zip(gd.chunks(c)) {
                        for ((o, x), s) in orow.iter_mut().zip(grow).zip(tr.data()) {
                            *o += x * s;
                        }
                    }
                });
                self.accumulate_with(grads, *r, |out| {
                    for (grow, arow) in gd.chunks(c).zip(ta.data().chunks(c)) {
                        for ((o, x), y) in out.iter_mut().zip(grow).zip(arow) {
                            *o += x * y;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                self.accumulate_with(grads, *a, |out| {
                    for ((o, x), y) in out.iter_mut().zip(gd).zip(tb.data()) {
                        *o += x * y;
                    }
                });
                self.accumulate_with(grads, *b, |out| {
                    for ((o, x), y) in out.iter_mut().zip(gd).zip(ta.data()) {
                        *o += x * y;
                    }
                });
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.map(|x| c * x)),
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::Relu(a) => {
                let ta = self.value(*a);
                self.accumulate_with(grads, *a, |out| {
                    for ((o, x), y) in out.iter_mut().zip(gd).zip(ta.data()) {
                        if *y > 0.0 {
                            *o += x;
                        }
                    }
                });
            }
            Op::Softplus(a) => {
                let ta = self.value(*a);
                self.accumulate_with(grads, *a, |out| {
                    for ((o, x), y) in out.iter_mut().zip(gd).zip(ta.data()) {
                        *o += x * sigmoid(*y);
                    }
                });
            }
            Op::Log(a) => {
                let ta = self.value(*a);
                self.accumulate_with(grads, *a, |out| {
                    for ((o, x), y) in out.iter_mut().zip(gd).zip(ta.data()) {
                        if *y > LOG_CLAMP {
                            *o += x / y;
                        }
                    }
                });
            }
            Op::NormalizeRows(a, floor) => {
                let (ta, y) = (self.value(*a), &node.value);
                let c = ta.cols();
                self.accumulate_with(grads, *a, |out| {
                    for i in 0..ta.rows() {
                        let n = tensor::l2_norm(ta.row(i));
                        let gr = &gd[i * c..(i + 1) * c];
                        if n <= *floor {
                            // Below the floor the map is the linear x / floor.
                            for j in 0..c {
                                out[i * c + j] += gr[j] / floor;
                            }
                            continue;
                        }
                        let yr = y.row(i);
                        let gy = tensor::dot(gr, yr);
                        for j in 0..c {
                            out[i * c + j] += (gr[j] - yr[j] * gy) / n;
                        }
                    }
                });
            }
            Op::SoftmaxRows(a, tau) => {
                let p = &node.value;
                let c = p.cols();
                self.accumulate_with(grads, *a, |out| {
                    for i in 0..p.rows() {
                        let pr = p.row(i);
                        let gr = &gd[i * c..(i + 1) * c];
                        let gp = tensor::dot(gr, pr);
                        for j in 0..c {
                            out[i * c + j] += pr[j] * (gr[j] - gp) / tau;
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(a, tau, exclude) => {
                let y = &node.value;
                let c = y.cols();
                let skip = |idx: usize| exclude.as_ref().is_some_and(|e| e[idx]);
                self.accumulate_with(grads, *a, |out| {
                    for i in 0..y.rows() {
                        let mut gsum = 0.0;
                        for j in 0..c {
                            if !skip(i * c + j) {
                                gsum += gd[i * c + j];
                            }
                        }
                        for j in 0..c {
                            let idx = i * c + j;
                            if !skip(idx) {
                                let p = libm::exp(y.data()[idx]);
                                out[idx] += (gd[idx] - p * gsum) / tau;
                            }
                        }
                    }
                });
            }
            Op::Sum(a) => {
                let s = g.item();
                self.accumulate_with(grads, *a, |out| out.iter_mut().for_each(|o| *o += s));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let s = g.item() / n;
                self.accumulate_with(grads, *a, |out| out.iter_mut().for_each(|o| *o += s));
            }
            Op::ConcatRows(a, b) => {
                let split = self.value(*a).len();
                self.accumulate_with(grads, *a, |out| {
                    out.iter_mut().zip(&gd[..split]).for_each(|(o, x)| *o += x)
                });
                self.accumulate_with(grads, *b, |out| {
                    out.iter_mut().zip(&gd[split..]).for_each(|(o, x)| *o += x)
                });
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-x.abs()))
}

/// Gradient of the scalar built by `f` with respect to each of `params`.
pub fn grad<F>(params: &[Tensor], f: F) -> Result<Vec<Tensor>>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    value_and_grad(params, f).map(|(_, g)| g)
}

/// Like [`grad`], also returning the value of the scalar.
pub fn value_and_grad<F>(params: &[Tensor], f: F) -> Result<(f64, Vec<Tensor>)>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.scalar_value(out)?;
    let mut g = tape.backward(out)?;
    let grads = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            let t = g.take(v);
            Tensor::from_parts(p.shape().to_vec(), t.into_data())
        })
        .collect();
    Ok((value, grads))
}

/// Forward evaluation with every input held constant.
pub fn evaluate<F>(params: &[Tensor], f: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.check_finite()?;
    tape.scalar_value(out)
}

/// Largest element-wise relative disagreement between the reverse-mode
/// gradient and central differences:
/// `max |analytic − numeric| / (|numeric| + 1e-8)`.
///
/// Non-differentiable points (a ReLU or hinge exactly at its kink, ties in a
/// max) are outside the contract: the numeric derivative there is the
/// average of the one-sided slopes and will not match.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step <= 1e-2) {
        return Err(Error::param("step", "must lie in (0, 1e-2]"));
    }
    let total: usize = params.iter().map(Tensor::len).sum();
    if total >= 100_000 {
        return Err(Error::param("params", "finite differences limited to < 1e5 elements"));
    }
    let analytic = grad(params, &f)?;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst: f64 = 0.0;
    for (pi, g) in analytic.iter().enumerate() {
        for e in 0..params[pi].len() {
            let orig = params[pi].data()[e];
            work[pi].data_mut()[e] = orig + step;
            let plus = evaluate(&work, &f)?;
            work[pi].data_mut()[e] = orig - step;
            let minus = evaluate(&work, &f)?;
            work[pi].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let rel = (g.data()[e] - numeric).abs() / (numeric.abs() + 1e-8);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal_tensor, seeded};
    use proptest::prelude::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn sum_of_squares() {
        let g = grad(&[t(1, 2, &[1.0, 2.0])], |tp, p| {
            let sq = tp.mul(p[0], p[0])?;
            Ok(tp.sum(sq))
        })
        .unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = grad(&[t(1, 3, &[1.0, -2.0, 5.0])], |tp, _| {
            let c = tp.constant(Tensor::scalar(7.0));
            Ok(tp.sum(c))
        })
        .unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn cube_passes_finite_difference() {
        let err = finite_diff_check(
            |tp, p| {
                let sq = tp.mul(p[0], p[0])?;
                let cube = tp.mul(sq, p[0])?;
                Ok(tp.sum(cube))
            },
            &[Tensor::scalar(1.0)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn kink_is_outside_the_contract() {
        // relu at exactly 0: analytic sub-gradient 0, central difference 0.5.
        let err = finite_diff_check(
            |tp, p| {
                let r = tp.relu(p[0]);
                Ok(tp.sum(r))
            },
            &[Tensor::scalar(0.0)],
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn non_scalar_output_is_a_contract_violation() {
        let r = grad(&[t(1, 2, &[1.0, 2.0])], |_, p| Ok(p[0]));
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn non_finite_names_operation() {
        let r = grad(&[t(1, 1, &[800.0])], |tp, p| {
            let c = tp.constant(Tensor::scalar(1.0));
            let e = tp.softplus(p[0]);
            let big = tp.scale(e, 1e306);
            let s = tp.mul(big, c)?;
            Ok(tp.sum(s))
        });
        assert_eq!(r.unwrap_err(), Error::NonFinite { op: "scale" });
    }

    #[test]
    fn step_and_size_preconditions() {
        let f = |tp: &mut Tape, p: &[Var]| Ok(tp.sum(p[0]));
        assert!(finite_diff_check(f, &[Tensor::scalar(1.0)], 0.0).is_err());
        assert!(finite_diff_check(f, &[Tensor::scalar(1.0)], 0.1).is_err());
        assert!(finite_diff_check(f, &[Tensor::zeros(&[400, 250])], 1e-5).is_err());
    }

    /// Exercises every op in one graph against central differences.
    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = seeded(3, 0);
        for _ in 0..20 {
            let a = normal_tensor(&mut rng, &[3, 4], 1.0);
            let b = normal_tensor(&mut rng, &[4, 5], 1.0);
            let bias = normal_tensor(&mut rng, &[1, 5], 1.0);
            let other = normal_tensor(&mut rng, &[2, 5], 1.0);
            let err = finite_diff_check(
                |tp, p| {
                    let h = tp.matmul(p[0], p[1])?;
                    let h = tp.add_row(h, p[2])?;
                    let sp = tp.softplus(h);
                    let r = tp.relu(h);
                    let h = tp.add(sp, r)?;
                    let h = tp.mul_row(h, p[2])?;
                    let n = tp.normalize_rows(h)?;
                    let o = tp.normalize_rows(p[3])?;
                    let sim = tp.matmul_t(n, o)?;
                    let ls = tp.log_softmax_rows(sim, 0.5, Some(vec![false, true, false, false, true, false]))?;
                    let sm = tp.softmax_rows(sim, 0.7)?;
                    let lg = tp.log(sm);
                    let cat = tp.concat_rows(ls, lg)?;
                    let sq = tp.mul(cat, cat)?;
                    let d = tp.sub(sq, cat)?;
                    let m = tp.mean(d);
                    let m = tp.add_scalar(m, 0.3);
                    Ok(tp.scale(m, 2.0))
                },
                &[a, b, bias, other],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    proptest! {
        #[test]
        fn gradient_is_linear(seed in 0u64..500) {
            let mut rng = seeded(seed, 1);
            let x = normal_tensor(&mut rng, &[2, 3], 1.0);
            let w = normal_tensor(&mut rng, &[3, 2], 1.0);
            let f = |tp: &mut Tape, p: &[Var]| -> Result<Var> {
                let h = tp.matmul(p[0], p[1])?;
                let s = tp.softplus(h);
                Ok(tp.sum(s))
            };
            let g = |tp: &mut Tape, p: &[Var]| -> Result<Var> {
                let n = tp.normalize_rows(p[0])?;
                let sq = tp.mul(n, n)?;
                let l = tp.log_softmax_rows(p[1], 0.3, None)?;
                let a = tp.sum(sq);
                let b = tp.mean(l);
                tp.add(a, b)
            };
            let gf = grad(&[x.clone(), w.clone()], f).unwrap();
            let gg = grad(&[x.clone(), w.clone()], g).unwrap();
            let gsum = grad(&[x, w], |tp, p| {
                let a = f(tp, p)?;
                let b = g(tp, p)?;
                tp.add(a, b)
            }).unwrap();
            for i in 0..2 {
                for ((s, a), b) in gsum[i].data().iter().zip(gf[i].data()).zip(gg[i].data()) {
                    prop_assert!((s - (a + b)).abs() < 1e-10);
                }
            }
        }
    }
}
