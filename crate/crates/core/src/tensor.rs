//! Minimal dense-array substrate: `(batch, position, feature)` sequence
//! buffers, a row-major matrix, pointwise activations, GEMM and a seeded RNG.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension {name} must be at least 1")]
    EmptyDimension { name: &'static str },
    #[error("flat buffer size overflows usize for shape {0:?}")]
    Overflow((usize, usize, usize)),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn name(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl std::str::FromStr for DType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(format!("unknown dtype `{other}` (expected f32 or f64)")),
        }
    }
}

/// Floating-point element type of every buffer in the crate.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    const DTYPE: DType;

    /// Converts an `f64` constant; exact for f64, rounded for f32.
    fn lit(v: f64) -> Self;

    fn to_f64_lossy(self) -> f64;

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;

    /// `c = alpha * a * b + beta * c` on strided views. See [`gemm`].
    ///
    /// # Safety
    ///
    /// Every strided index of `a` (m × k), `b` (k × n) and `c` (m × n) must be
    /// in bounds, and `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;
    fn lit(v: f64) -> Self {
        v as f32
    }
    fn to_f64_lossy(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;
    fn lit(v: f64) -> Self {
        v
    }
    fn to_f64_lossy(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Strided view description for [`gemm`]: `rows x cols` starting at `offset`.
#[derive(Debug, Clone, Copy)]
pub struct View {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl View {
    pub fn row_major(offset: usize, rows: usize, cols: usize, row_stride: usize) -> Self {
        View { offset, rows, cols, row_stride, col_stride: 1 }
    }

    pub fn t(self) -> Self {
        View {
            offset: self.offset,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// Bounds-checked `c = alpha * a * b + beta * c` over strided views.
///
/// Panics if a view reaches past its buffer or the inner dimensions disagree.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    alpha: T,
    a: &[T],
    av: View,
    b: &[T],
    bv: View,
    beta: T,
    c: &mut [T],
    cv: View,
) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension");
    assert_eq!(av.rows, cv.rows, "gemm output rows");
    assert_eq!(bv.cols, cv.cols, "gemm output cols");
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    assert!(av.last_index() < a.len().max(1) || av.cols == 0);
    assert!(bv.last_index() < b.len().max(1) || bv.rows == 0);
    assert!(cv.last_index() < c.len());
    if av.cols == 0 {
        // k = 0: only the beta scaling applies.
        for i in 0..cv.rows {
            for j in 0..cv.cols {
                let idx = cv.offset + i * cv.row_stride + j * cv.col_stride;
                c[idx] = if beta == T::zero() { T::zero() } else { beta * c[idx] };
            }
        }
        return;
    }
    // SAFETY: every index touched lies within the asserted view bounds.
    unsafe {
        T::gemm_raw(
            av.rows,
            av.cols,
            bv.cols,
            alpha,
            a.as_ptr().add(av.offset),
            av.row_stride as isize,
            av.col_stride as isize,
            b.as_ptr().add(bv.offset),
            bv.row_stride as isize,
            bv.col_stride as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.row_stride as isize,
            cv.col_stride as isize,
        )
    }
}

/// Rank-3 buffer indexed `(b, l, d)`, row-major with `d` innermost.
#[derive(Clone, PartialEq)]
pub struct SequenceBatch<T> {
    data: Vec<T>,
    batch: usize,
    len: usize,
    width: usize,
}

impl<T: Debug> Debug for SequenceBatch<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SequenceBatch")
            .field("shape", &(self.batch, self.len, self.width))
            .field("data", &self.data)
            .finish()
    }
}

/// `max` that propagates NaN instead of skipping it.
#[inline]
pub fn nan_max<T: Scalar>(a: T, b: T) -> T {
    if a.is_nan() || b.is_nan() {
        T::nan()
    } else {
        a.max(b)
    }
}

fn checked_len(batch: usize, len: usize, width: usize) -> Result<usize, TensorError> {
    if batch == 0 {
        return Err(TensorError::EmptyDimension { name: "batch" });
    }
    if len == 0 {
        return Err(TensorError::EmptyDimension { name: "length" });
    }
    if width == 0 {
        return Err(TensorError::EmptyDimension { name: "width" });
    }
    batch
        .checked_mul(len)
        .and_then(|n| n.checked_mul(width))
        .ok_or(TensorError::Overflow((batch, len, width)))
}

impl<T: Scalar> SequenceBatch<T> {
    pub fn zeros(batch: usize, len: usize, width: usize) -> Result<Self, TensorError> {
        let n = checked_len(batch, len, width)?;
        Ok(SequenceBatch { data: vec![T::zero(); n], batch, len, width })
    }

    /// Validating constructor: rejects wrong lengths and non-finite entries.
    pub fn from_vec(
        batch: usize,
        len: usize,
        width: usize,
        data: Vec<T>,
    ) -> Result<Self, TensorError> {
        let n = checked_len(batch, len, width)?;
        if data.len() != n {
            return Err(TensorError::Shape(format!(
                "buffer of {} elements for shape ({batch}, {len}, {width})",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(SequenceBatch { data, batch, len, width })
    }

    pub fn from_fn(
        batch: usize,
        len: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self, TensorError> {
        let n = checked_len(batch, len, width)?;
        let mut data = Vec::with_capacity(n);
        for b in 0..batch {
            for l in 0..len {
                for d in 0..width {
                    data.push(f(b, l, d));
                }
            }
        }
        Self::from_vec(batch, len, width, data)
    }

    /// Standard-normal fill scaled by `std`, drawn in flat order from `rng`.
    pub fn randn(
        batch: usize,
        len: usize,
        width: usize,
        std: f64,
        rng: &mut Rng,
    ) -> Result<Self, TensorError> {
        let mut out = Self::zeros(batch, len, width)?;
        rng.fill_normal(&mut out.data, std);
        Ok(out)
    }

    pub fn uniform(
        batch: usize,
        len: usize,
        width: usize,
        bound: f64,
        rng: &mut Rng,
    ) -> Result<Self, TensorError> {
        let mut out = Self::zeros(batch, len, width)?;
        rng.fill_uniform(&mut out.data, -bound, bound);
        Ok(out)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch, self.len, self.width)
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn offset(&self, b: usize, l: usize) -> usize {
        (b * self.len + l) * self.width
    }

    #[inline]
    pub fn at(&self, b: usize, l: usize) -> &[T] {
        let o = self.offset(b, l);
        &self.data[o..o + self.width]
    }

    #[inline]
    pub fn at_mut(&mut self, b: usize, l: usize) -> &mut [T] {
        let o = self.offset(b, l);
        let w = self.width;
        &mut self.data[o..o + w]
    }

    /// All positions of one batch entry, `len * width` values.
    pub fn row(&self, b: usize) -> &[T] {
        let n = self.len * self.width;
        &self.data[b * n..(b + 1) * n]
    }

    pub fn row_mut(&mut self, b: usize) -> &mut [T] {
        let n = self.len * self.width;
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// NaN anywhere yields NaN.
    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| nan_max(m, v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff shape");
        self.data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |m, (a, b)| nan_max(m, (*a - *b).abs()))
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        SequenceBatch {
            data: self.data.iter().map(|&v| f(v)).collect(),
            batch: self.batch,
            len: self.len,
            width: self.width,
        }
    }

    /// Copy with the position axis reversed.
    pub fn reversed(&self) -> Self {
        let mut out = self.clone();
        for b in 0..self.batch {
            for l in 0..self.len {
                out.at_mut(b, self.len - 1 - l).copy_from_slice(self.at(b, l));
            }
        }
        out
    }

    /// Feature slice `[start, start + width)` of every position.
    pub fn narrow(&self, start: usize, width: usize) -> Result<Self, TensorError> {
        if start + width > self.width || width == 0 {
            return Err(TensorError::Shape(format!(
                "narrow [{start}, {}) of width {}",
                start + width,
                self.width
            )));
        }
        Self::from_fn(self.batch, self.len, width, |b, l, d| self.at(b, l)[start + d])
    }

    pub fn cast<U: Scalar>(&self) -> SequenceBatch<U> {
        SequenceBatch {
            data: self.data.iter().map(|v| U::lit(v.to_f64_lossy())).collect(),
            batch: self.batch,
            len: self.len,
            width: self.width,
        }
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(TensorError::Shape("ragged matrix rows".into()));
        }
        Ok(Matrix { rows: rows.len(), cols, data: rows.concat() })
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }
}

/// `out[b, l] = w · x[b, l]` for every position.
pub fn matvec_batched<T: Scalar>(
    w: &Matrix<T>,
    x: &SequenceBatch<T>,
) -> Result<SequenceBatch<T>, TensorError> {
    if w.cols != x.width() {
        return Err(TensorError::Shape(format!(
            "matrix is {}x{} but inputs have width {}",
            w.rows,
            w.cols,
            x.width()
        )));
    }
    let (b, l, din) = x.shape();
    let mut out = SequenceBatch::zeros(b, l, w.rows)?;
    let rows = b * l;
    gemm(
        T::one(),
        x.data(),
        View::row_major(0, rows, din, din),
        &w.data,
        View::row_major(0, w.rows, w.cols, w.cols).t(),
        T::zero(),
        out.data_mut(),
        View::row_major(0, rows, w.rows, w.rows),
    );
    Ok(out)
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn sigmoid_prime<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() - s)
}

#[inline]
pub fn tanh_prime<T: Scalar>(x: T) -> T {
    let t = x.tanh();
    T::one() - t * t
}

#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x * sigmoid(x)
}

#[inline]
pub fn silu_prime<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementOp {
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    SigmoidPrime,
    TanhPrime,
}

impl ElementOp {
    pub fn is_binary(self) -> bool {
        matches!(self, ElementOp::Add | ElementOp::Sub | ElementOp::Mul)
    }
}

/// Second operand of a binary [`elementwise`] op.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a, T> {
    Batch(&'a SequenceBatch<T>),
    /// Per-feature vector broadcast over `(b, l)`.
    Feature(&'a [T]),
}

pub fn elementwise<T: Scalar>(
    op: ElementOp,
    a: &SequenceBatch<T>,
    b: Option<Operand<'_, T>>,
) -> Result<SequenceBatch<T>, TensorError> {
    let unary = |f: fn(T) -> T| -> Result<SequenceBatch<T>, TensorError> {
        if b.is_some() {
            return Err(TensorError::Shape(format!("{op:?} takes a single operand")));
        }
        Ok(a.map(f))
    };
    match op {
        ElementOp::Sigmoid => return unary(sigmoid),
        ElementOp::Tanh => return unary(|v: T| v.tanh()),
        ElementOp::SigmoidPrime => return unary(sigmoid_prime),
        ElementOp::TanhPrime => return unary(tanh_prime),
        _ => {}
    }
    let f = match op {
        ElementOp::Add => |x: T, y: T| x + y,
        ElementOp::Sub => |x: T, y: T| x - y,
        _ => |x: T, y: T| x * y,
    };
    let mut out = a.clone();
    match b {
        None => return Err(TensorError::Shape(format!("{op:?} needs a second operand"))),
        Some(Operand::Batch(other)) => {
            if other.shape() != a.shape() {
                return Err(TensorError::Shape(format!(
                    "{:?} vs {:?}",
                    a.shape(),
                    other.shape()
                )));
            }
            for (o, &y) in out.data.iter_mut().zip(&other.data) {
                *o = f(*o, y);
            }
        }
        Some(Operand::Feature(v)) => {
            if v.len() != a.width() {
                return Err(TensorError::Shape(format!(
                    "feature vector of length {} against width {}",
                    v.len(),
                    a.width()
                )));
            }
            for chunk in out.data.chunks_exact_mut(a.width()) {
                for (o, &y) in chunk.iter_mut().zip(v) {
                    *o = f(*o, y);
                }
            }
        }
    }
    Ok(out)
}

/// Seeded ChaCha8 stream; identical seeds give identical draws everywhere.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
    seed: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { inner: ChaCha8Rng::seed_from_u64(seed), seed }
    }

    /// Independent stream keyed by `(seed, stream)`, e.g. one per sample.
    pub fn fork(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng { inner, seed: self.seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.inner.gen::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn fill_normal<T: Scalar>(&mut self, out: &mut [T], std: f64) {
        for v in out {
            *v = T::lit(std * self.normal());
        }
    }

    pub fn fill_uniform<T: Scalar>(&mut self, out: &mut [T], lo: f64, hi: f64) {
        for v in out {
            *v = T::lit(self.uniform(lo, hi));
        }
    }

    pub fn shuffle<U>(&mut self, items: &mut [U]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
