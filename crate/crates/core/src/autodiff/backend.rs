//! The operation set shared by the recording tape and the value-only backend.
//!
//! Model, payoff and hedge code is written once against [`Backend`]; training
//! runs it on a [`super::Tape`], large evaluation batches on [`super::Eager`].

use super::matrix::{gemm, pairwise_sum, Matrix};
use super::params::{ParamId, ParamStore};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Softplus,
    Exp,
    Log,
    Sqrt,
    Tanh,
    Square,
}

impl Unary {
    pub(crate) fn name(self) -> &'static str {
        match self {
            Unary::Relu => "relu",
            Unary::Softplus => "softplus",
            Unary::Exp => "exp",
            Unary::Log => "log",
            Unary::Sqrt => "sqrt",
            Unary::Tanh => "tanh",
            Unary::Square => "square",
        }
    }

    #[inline]
    pub(crate) fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Softplus => softplus(x),
            Unary::Exp => x.exp(),
            Unary::Log => x.ln(),
            Unary::Sqrt => x.sqrt(),
            Unary::Tanh => x.tanh(),
            Unary::Square => x * x,
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    #[inline]
    pub(crate) fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Softplus => sigmoid(x),
            Unary::Exp => y,
            Unary::Log => 1.0 / x,
            Unary::Sqrt => 0.5 / y,
            Unary::Tanh => 1.0 - y * y,
            Unary::Square => 2.0 * x,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Binary {
    pub(crate) fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        }
    }

    #[inline]
    pub(crate) fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
            Binary::Div => a / b,
        }
    }
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] for positive arguments.
pub fn softplus_inverse(y: f64) -> f64 {
    // ln(e^y - 1) written to stay accurate for small and large y.
    y + (-(-y).exp_m1()).ln()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// A computation backend over batched 2-D arrays (rows = batch).
///
/// Binary operations broadcast along any dimension of extent 1.
pub trait Backend {
    type Array: Clone;

    fn constant(&mut self, value: Matrix) -> Self::Array;
    fn param(&mut self, store: &ParamStore, id: ParamId) -> Self::Array;
    fn value<'a>(&'a self, x: &'a Self::Array) -> &'a Matrix;

    /// `x·W + B` per row, optionally followed by relu.
    fn affine(
        &mut self,
        x: &Self::Array,
        w: &Self::Array,
        b: &Self::Array,
        act: Activation,
    ) -> Result<Self::Array>;
    fn unary(&mut self, x: &Self::Array, f: Unary) -> Result<Self::Array>;
    fn binary(&mut self, a: &Self::Array, b: &Self::Array, f: Binary) -> Result<Self::Array>;
    fn scale(&mut self, x: &Self::Array, factor: f64) -> Result<Self::Array>;
    fn add_scalar(&mut self, x: &Self::Array, c: f64) -> Result<Self::Array>;
    fn concat_cols(&mut self, xs: &[Self::Array]) -> Result<Self::Array>;
    /// Columns `start..end`.
    fn columns(&mut self, x: &Self::Array, start: usize, end: usize) -> Result<Self::Array>;
    /// Row-wise taming `x / (1 + |x|·√dt)` with `|x|` the Euclidean norm of the row.
    fn tame(&mut self, x: &Self::Array, dt: f64) -> Result<Self::Array>;
    /// Mean over the batch, shape `1 × cols`.
    fn mean(&mut self, x: &Self::Array) -> Result<Self::Array>;
    /// Unbiased variance over the batch, shape `1 × cols`.
    fn sample_variance(&mut self, x: &Self::Array) -> Result<Self::Array>;
    /// Sum of all entries, shape `1 × 1`.
    fn sum(&mut self, x: &Self::Array) -> Result<Self::Array>;
    /// Elementwise maximum over a sequence of equally shaped arrays.
    fn running_max(&mut self, xs: &[Self::Array]) -> Result<Self::Array>;
    /// Same values, no dependence on any parameter.
    fn detach(&mut self, x: &Self::Array) -> Self::Array;

    fn shape(&self, x: &Self::Array) -> (usize, usize) {
        self.value(x).shape()
    }
    fn relu(&mut self, x: &Self::Array) -> Result<Self::Array> {
        self.unary(x, Unary::Relu)
    }
    fn softplus(&mut self, x: &Self::Array) -> Result<Self::Array> {
        self.unary(x, Unary::Softplus)
    }
    fn exp(&mut self, x: &Self::Array) -> Result<Self::Array> {
        self.unary(x, Unary::Exp)
    }
    fn log(&mut self, x: &Self::Array) -> Result<Self::Array> {
        self.unary(x, Unary::Log)
    }
    fn sqrt(&mut self, x: &Self::Array) -> Result<Self::Array> {
        self.unary(x, Unary::Sqrt)
    }
    fn tanh(&mut self, x: &Self::Array) -> Result<Self::Array> {
        self.unary(x, Unary::Tanh)
    }
    fn square(&mut self, x: &Self::Array) -> Result<Self::Array> {
        self.unary(x, Unary::Square)
    }
    fn add(&mut self, a: &Self::Array, b: &Self::Array) -> Result<Self::Array> {
        self.binary(a, b, Binary::Add)
    }
    fn sub(&mut self, a: &Self::Array, b: &Self::Array) -> Result<Self::Array> {
        self.binary(a, b, Binary::Sub)
    }
    fn mul(&mut self, a: &Self::Array, b: &Self::Array) -> Result<Self::Array> {
        self.binary(a, b, Binary::Mul)
    }
    fn div(&mut self, a: &Self::Array, b: &Self::Array) -> Result<Self::Array> {
        self.binary(a, b, Binary::Div)
    }
}

// Forward kernels shared by both backends.

pub(crate) fn check_finite(m: Matrix, op: &'static str) -> Result<Matrix> {
    if m.all_finite() {
        Ok(m)
    } else {
        Err(Error::NonFinite { op })
    }
}

pub(crate) fn affine_forward(x: &Matrix, w: &Matrix, b: &Matrix, act: Activation) -> Result<Matrix> {
    let (n, i) = x.shape();
    let (wi, o) = w.shape();
    if i != wi || b.shape() != (1, o) {
        return Err(shape_err(
            "affine",
            format!(
                "x {:?}, W {:?}, B {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            ),
        ));
    }
    let mut data = Vec::with_capacity(n * o);
    for _ in 0..n {
        data.extend_from_slice(b.as_slice());
    }
    gemm(n, i, o, 1.0, x.as_slice(), false, w.as_slice(), false, 1.0, &mut data);
    if act == Activation::Relu {
        data.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    check_finite(Matrix::new(n, o, data)?, "affine")
}

pub(crate) fn unary_forward(x: &Matrix, f: Unary) -> Result<Matrix> {
    check_finite(x.map(|v| f.apply(v)), f.name())
}

pub(crate) fn broadcast_shape(a: (usize, usize), b: (usize, usize), op: &'static str) -> Result<(usize, usize)> {
    let dim = |p: usize, q: usize| -> Option<usize> {
        if p == q {
            Some(p)
        } else if p == 1 {
            Some(q)
        } else if q == 1 {
            Some(p)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(shape_err(op, format!("cannot broadcast {a:?} with {b:?}"))),
    }
}

#[inline]
pub(crate) fn bget(m: &Matrix, i: usize, j: usize) -> f64 {
    let r = if m.rows() == 1 { 0 } else { i };
    let c = if m.cols() == 1 { 0 } else { j };
    m.get(r, c)
}

pub(crate) fn binary_forward(a: &Matrix, b: &Matrix, f: Binary) -> Result<Matrix> {
    let (r, c) = broadcast_shape(a.shape(), b.shape(), f.name())?;
    let out = if a.shape() == b.shape() {
        let data = a
            .as_slice()
            .iter()
            .zip(b.as_slice())
            .map(|(&x, &y)| f.apply(x, y))
            .collect();
        Matrix::new(r, c, data)?
    } else {
        Matrix::from_fn(r, c, |i, j| f.apply(bget(a, i, j), bget(b, i, j)))
    };
    check_finite(out, f.name())
}

pub(crate) fn concat_forward(xs: &[&Matrix]) -> Result<Matrix> {
    let first = xs.first().ok_or_else(|| shape_err("concat_cols", "no inputs"))?;
    let n = first.rows();
    if xs.iter().any(|x| x.rows() != n) {
        return Err(shape_err("concat_cols", "row counts differ"));
    }
    let width: usize = xs.iter().map(|x| x.cols()).sum();
    let mut data = Vec::with_capacity(n * width);
    for i in 0..n {
        for x in xs {
            data.extend_from_slice(x.row_slice(i));
        }
    }
    Matrix::new(n, width, data)
}

pub(crate) fn columns_forward(x: &Matrix, start: usize, end: usize) -> Result<Matrix> {
    if start >= end || end > x.cols() {
        return Err(shape_err(
            "columns",
            format!("range {start}..{end} of {} columns", x.cols()),
        ));
    }
    Ok(Matrix::from_fn(x.rows(), end - start, |i, j| x.get(i, start + j)))
}

#[inline]
pub(crate) fn row_norm(row: &[f64]) -> f64 {
    if row.len() == 1 {
        row[0].abs()
    } else {
        row.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub(crate) fn tame_forward(x: &Matrix, dt: f64) -> Result<Matrix> {
    if !(dt > 0.0) {
        return Err(crate::error::invalid(format!("taming step must be positive, got {dt}")));
    }
    let s = dt.sqrt();
    let c = x.cols();
    let mut out = x.clone();
    for row in out.as_mut_slice().chunks_exact_mut(c.max(1)) {
        let d = 1.0 + row_norm(row) * s;
        row.iter_mut().for_each(|v| *v /= d);
    }
    check_finite(out, "tame")
}

pub(crate) fn mean_forward(x: &Matrix) -> Result<Matrix> {
    if x.rows() == 0 {
        return Err(Error::EmptyBatch { op: "mean" });
    }
    let n = x.rows() as f64;
    let sums = x.column_sums();
    check_finite(Matrix::row(sums.into_iter().map(|s| s / n).collect()), "mean")
}

pub(crate) fn variance_forward(x: &Matrix) -> Result<(Matrix, Matrix)> {
    if x.rows() < 2 {
        return Err(Error::EmptyBatch {
            op: "sample_variance",
        });
    }
    let mean = mean_forward(x)?;
    let n = x.rows();
    let vars = (0..x.cols())
        .map(|j| {
            let m = mean.get(0, j);
            let sq: Vec<f64> = (0..n).map(|i| (x.get(i, j) - m).powi(2)).collect();
            pairwise_sum(&sq) / (n as f64 - 1.0)
        })
        .collect();
    Ok((check_finite(Matrix::row(vars), "sample_variance")?, mean))
}

pub(crate) fn sum_forward(x: &Matrix) -> Result<Matrix> {
    check_finite(Matrix::scalar(pairwise_sum(x.as_slice())), "sum")
}

/// Returns the maxima and, per element, the first sequence index attaining it.
pub(crate) fn running_max_forward(xs: &[&Matrix]) -> Result<(Matrix, Vec<u32>)> {
    let first = xs.first().ok_or(Error::EmptyBatch { op: "running_max" })?;
    if xs.iter().any(|x| x.shape() != first.shape()) {
        return Err(shape_err("running_max", "sequence shapes differ"));
    }
    let mut out = (*first).clone();
    let mut arg = vec![0u32; first.len()];
    for (k, x) in xs.iter().enumerate().skip(1) {
        for ((o, a), &v) in out.as_mut_slice().iter_mut().zip(arg.iter_mut()).zip(x.as_slice()) {
            if v > *o {
                *o = v;
                *a = k as u32;
            }
        }
    }
    Ok((check_finite(out, "running_max")?, arg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softplus_closed_forms() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((softplus(50.0) - 50.0).abs() < 1e-12);
        assert!(softplus(-800.0) >= 0.0);
        assert!(softplus(800.0).is_finite());
        assert!((softplus(softplus_inverse(0.2)) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape((5, 1), (1, 3), "t").unwrap(), (5, 3));
        assert_eq!(broadcast_shape((5, 3), (5, 3), "t").unwrap(), (5, 3));
        assert!(broadcast_shape((5, 3), (4, 3), "t").is_err());
    }

    #[test]
    fn tame_scalar_step() {
        // 1 + 2*0.25/(1 + 2*0.5) = 1.25
        let y = tame_forward(&Matrix::scalar(2.0), 0.25).unwrap();
        assert_eq!(1.0 + y.get(0, 0) * 0.25, 1.25);
    }
}
