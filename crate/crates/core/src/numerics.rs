//! Dense real-valued vectors and matrices plus the handful of operations the
//! recurrent network needs: products, activations, softmax, cross-entropy,
//! Glorot initialization and a central-difference gradient oracle.
//!
//! Everything is generic over [`Real`], so the same code runs in `f32` for
//! training and inference and in `f64` for gradient checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Deref, DerefMut};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Default step for [`finite_difference_check`].
pub const FD_EPSILON: f64 = 1e-4;

/// Scalar type used by the numeric kernels.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Sum + Send + Sync + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite real")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// The pseudorandom generator used for every stochastic decision in the crate
/// (ChaCha with 8 rounds, seeded from a 64-bit value).
pub type SeededRng = ChaCha8Rng;

pub fn seeded_rng(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mixes a base seed with a stream index (SplitMix64 finalizer) so that
/// independent consumers draw from unrelated generators.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Vector<T> {
    data: Vec<T>,
}

impl<T: Real> Vector<T> {
    pub fn zeros(len: usize) -> Self {
        Vector {
            data: vec![T::zero(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn cast<U: Real>(&self) -> Vector<U> {
        Vector {
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl<T> From<Vec<T>> for Vector<T> {
    fn from(data: Vec<T>) -> Self {
        Vector { data }
    }
}

impl<T> Deref for Vector<T> {
    type Target = [T];

    fn deref(&self) -> &[T] {
        &self.data
    }
}

impl<T> DerefMut for Vector<T> {
    fn deref_mut(&mut self) -> &mut [T] {
        &mut self.data
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Matrix::new",
                format!("{} elements ({rows}x{cols})", rows * cols),
                data.len(),
            ));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::dim("Matrix::from_rows", cols, row.len()));
            }
            data.extend_from_slice(row);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    /// A single-row matrix holding `v`.
    pub fn from_row(v: &[T]) -> Self {
        Matrix {
            rows: 1,
            cols: v.len(),
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: T) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Element-wise combination of two equally shaped matrices.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                "Matrix::zip_map",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                "Matrix::add_assign",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }
}

pub fn matvec<T: Real>(m: &Matrix<T>, v: &[T]) -> Result<Vector<T>> {
    if m.cols != v.len() {
        return Err(Error::dim("matvec", m.cols, v.len()));
    }
    Ok((0..m.rows).map(|r| dot(m.row(r), v)).collect::<Vec<_>>().into())
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// `a · bᵀ`, i.e. every row of `a` pushed through the linear map `b`.
pub fn matmul_nt<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return Err(Error::dim("matmul_nt", a.cols, b.cols));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        let or = out.row_mut(i);
        for (j, o) in or.iter_mut().enumerate() {
            *o = dot(ar, b.row(j));
        }
    }
    Ok(out)
}

/// `a · b`.
pub fn matmul_nn<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return Err(Error::dim("matmul_nn", a.cols, b.rows));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik != T::zero() {
                axpy(aik, b.row(k), out.row_mut(i));
            }
        }
    }
    Ok(out)
}

/// `acc += aᵀ · b`; the outer-product accumulation used for weight gradients.
pub fn add_matmul_tn<T: Real>(acc: &mut Matrix<T>, a: &Matrix<T>, b: &Matrix<T>) -> Result<()> {
    if a.rows != b.rows || acc.rows != a.cols || acc.cols != b.cols {
        return Err(Error::dim(
            "add_matmul_tn",
            format!("{}x{}", a.cols, b.cols),
            format!("{}x{} (batch {} vs {})", acc.rows, acc.cols, a.rows, b.rows),
        ));
    }
    for r in 0..a.rows {
        let br = b.row(r);
        for i in 0..a.cols {
            let ari = a.data[r * a.cols + i];
            if ari != T::zero() {
                axpy(ari, br, acc.row_mut(i));
            }
        }
    }
    Ok(())
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Real>(x: T) -> T {
    // Split on sign so neither branch overflows.
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(v: &[T]) -> Vector<T> {
    v.iter().map(|&x| sigmoid_scalar(x)).collect::<Vec<_>>().into()
}

pub fn tanh<T: Real>(v: &[T]) -> Vector<T> {
    v.iter().map(|&x| x.tanh()).collect::<Vec<_>>().into()
}

pub fn hadamard<T: Real>(a: &[T], b: &[T]) -> Result<Vector<T>> {
    if a.len() != b.len() {
        return Err(Error::dim("hadamard", a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(&x, &y)| x * y).collect::<Vec<_>>().into())
}

/// Numerically stable softmax (the maximum is subtracted before exponentiating).
pub fn softmax<T: Real>(logits: &[T]) -> Vector<T> {
    let mut out = logits.to_vec();
    softmax_in_place(&mut out);
    out.into()
}

pub(crate) fn softmax_in_place<T: Real>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum = sum + *x;
    }
    for x in v.iter_mut() {
        *x = *x / sum;
    }
}

/// Row-wise softmax of a batch of logits.
pub fn softmax_rows<T: Real>(logits: &Matrix<T>) -> Matrix<T> {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Cross-entropy of a probability vector against a class index.
///
/// Returns the loss `-ln p[target]` (with `p` floored at [`PROB_FLOOR`]) and
/// the gradient with respect to the pre-softmax logits, `p - onehot(target)`.
pub fn cross_entropy<T: Real>(pred: &[T], target: usize) -> Result<(T, Vector<T>)> {
    if target >= pred.len() {
        return Err(Error::OutOfRange {
            index: target,
            len: pred.len(),
        });
    }
    // `max` would swallow a NaN, which must reach the divergence check.
    let p = pred[target];
    let loss = if p.is_nan() { p } else { -p.max(T::lit(PROB_FLOOR)).ln() };
    let mut grad = pred.to_vec();
    grad[target] = grad[target] - T::one();
    Ok((loss, grad.into()))
}

/// Index of the largest component; ties go to the lowest index.
pub fn argmax<T: Real>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn glorot_bound(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

/// Glorot/Xavier uniform initialization: entries i.i.d. in `(-b, b)` with
/// `b = sqrt(6 / (rows + cols))`.
pub fn glorot_uniform<T: Real>(rows: usize, cols: usize, seed: u64) -> Matrix<T> {
    glorot_uniform_with(rows, cols, &mut seeded_rng(seed))
}

pub fn glorot_uniform_with<T: Real, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Matrix<T> {
    let b = glorot_bound(rows, cols);
    let dist = Uniform::new(-b, b);
    let data = (0..rows * cols).map(|_| T::lit(dist.sample(rng))).collect();
    Matrix { rows, cols, data }
}

/// Compares an analytic gradient with central differences of `f`.
///
/// Returns the worst coordinate's `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_difference_check<F>(
    f: F,
    params: &[f64],
    analytic: &[f64],
    epsilon: f64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    difference_check(f, params, analytic, epsilon, false)
}

/// Same comparison as [`finite_difference_check`], with the numeric
/// derivative Richardson-extrapolated from central differences at `epsilon`
/// and `epsilon / 2`: `(4 D(ε/2) - D(ε)) / 3`. The error falls to
/// `O(ε⁴)`, which keeps components of order 1e-7 and below meaningful.
pub fn finite_difference_check_extrapolated<F>(
    f: F,
    params: &[f64],
    analytic: &[f64],
    epsilon: f64,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    difference_check(f, params, analytic, epsilon, true)
}

fn difference_check<F>(
    mut f: F,
    params: &[f64],
    analytic: &[f64],
    epsilon: f64,
    extrapolate: bool,
) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if params.len() != analytic.len() {
        return Err(Error::dim(
            "finite_difference_check",
            params.len(),
            analytic.len(),
        ));
    }
    if !(epsilon > 0.0) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let mut point = params.to_vec();
    let mut central = |point: &mut [f64], i: usize, h: f64| -> Result<f64> {
        let orig = point[i];
        point[i] = orig + h;
        let plus = f(point);
        point[i] = orig - h;
        let minus = f(point);
        point[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {i} evaluated to {plus} / {minus}"
            )));
        }
        Ok((plus - minus) / (2.0 * h))
    };
    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut numeric = central(&mut point, i, epsilon)?;
        if extrapolate {
            let half = central(&mut point, i, epsilon / 2.0)?;
            numeric = (4.0 * half - numeric) / 3.0;
        }
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
