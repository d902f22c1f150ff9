//! Structured per-position Jacobians of a recurrence step.
//!
//! Three layouts ship: [`Layout::Diagonal`] (`d` values per position),
//! [`Layout::BlockDiag2x2`] (four length-`d` diagonals `J_cc, J_ch, J_hc, J_hh`
//! acting on a state ordered `[c; h]`) and [`Layout::Dense`] (`d * d`
//! row-major). The reduction solvers only ever touch them through
//! [`JacobianStructure`], which is also the hook for new structures.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Rng, Scalar};

/// Largest state width accepted by the dense layout.
pub const DENSE_MAX_WIDTH: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JacobianError {
    #[error("layout mismatch: {0:?} vs {1:?}")]
    LayoutMismatch(Layout, Layout),
    #[error("width mismatch: expected {expected}, got {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("dense Jacobians are capped at width {DENSE_MAX_WIDTH}, got {0}")]
    DenseTooLarge(usize),
    #[error("position ({0}, {1}) out of range")]
    OutOfRange(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Layout {
    Diagonal,
    BlockDiag2x2,
    Dense,
}

impl Layout {
    pub fn payload_len(self, d: usize) -> usize {
        match self {
            Layout::Diagonal => d,
            Layout::BlockDiag2x2 => 4 * d,
            Layout::Dense => d * d,
        }
    }

    /// Width of the state vector the Jacobian acts on.
    pub fn state_width(self, d: usize) -> usize {
        match self {
            Layout::BlockDiag2x2 => 2 * d,
            _ => d,
        }
    }

    pub fn structure<T: Scalar>(self) -> &'static dyn JacobianStructure<T> {
        match self {
            Layout::Diagonal => &Diagonal,
            Layout::BlockDiag2x2 => &BlockDiag2x2,
            Layout::Dense => &Dense,
        }
    }
}

/// Reduction primitives the solvers need from a Jacobian representation.
///
/// Slices passed in always have exactly `payload_len(d)` (Jacobians) or
/// `state_width(d)` (vectors) elements.
pub trait JacobianStructure<T: Scalar>: Send + Sync {
    fn payload_len(&self, d: usize) -> usize;
    fn state_width(&self, d: usize) -> usize;
    /// `out = j2 * j1`.
    fn compose(&self, d: usize, j2: &[T], j1: &[T], out: &mut [T]);
    /// `out = j * v`.
    fn apply(&self, d: usize, j: &[T], v: &[T], out: &mut [T]);
    /// `acc += j * v`.
    fn apply_add(&self, d: usize, j: &[T], v: &[T], acc: &mut [T]);
    fn transpose(&self, d: usize, j: &[T], out: &mut [T]);
    fn identity(&self, d: usize, out: &mut [T]);
    /// Row-major expansion into `state_width(d)^2` values.
    fn to_dense(&self, d: usize, j: &[T], out: &mut [T]);
}

pub struct Diagonal;
pub struct BlockDiag2x2;
pub struct Dense;

impl<T: Scalar> JacobianStructure<T> for Diagonal {
    fn payload_len(&self, d: usize) -> usize {
        d
    }
    fn state_width(&self, d: usize) -> usize {
        d
    }
    #[inline]
    fn compose(&self, _d: usize, j2: &[T], j1: &[T], out: &mut [T]) {
        for ((o, &a), &b) in out.iter_mut().zip(j2).zip(j1) {
            *o = a * b;
        }
    }
    #[inline]
    fn apply(&self, _d: usize, j: &[T], v: &[T], out: &mut [T]) {
        for ((o, &a), &x) in out.iter_mut().zip(j).zip(v) {
            *o = a * x;
        }
    }
    #[inline]
    fn apply_add(&self, _d: usize, j: &[T], v: &[T], acc: &mut [T]) {
        for ((o, &a), &x) in acc.iter_mut().zip(j).zip(v) {
            *o += a * x;
        }
    }
    fn transpose(&self, _d: usize, j: &[T], out: &mut [T]) {
        out.copy_from_slice(j);
    }
    fn identity(&self, _d: usize, out: &mut [T]) {
        out.fill(T::one());
    }
    fn to_dense(&self, d: usize, j: &[T], out: &mut [T]) {
        out.fill(T::zero());
        for i in 0..d {
            out[i * d + i] = j[i];
        }
    }
}

impl<T: Scalar> JacobianStructure<T> for BlockDiag2x2 {
    fn payload_len(&self, d: usize) -> usize {
        4 * d
    }
    fn state_width(&self, d: usize) -> usize {
        2 * d
    }
    #[inline]
    fn compose(&self, d: usize, j2: &[T], j1: &[T], out: &mut [T]) {
        let (a, rest) = j2.split_at(d);
        let (b, rest) = rest.split_at(d);
        let (c, e) = rest.split_at(d);
        let (p, rest) = j1.split_at(d);
        let (q, rest) = rest.split_at(d);
        let (r, s) = rest.split_at(d);
        let (occ, rest) = out.split_at_mut(d);
        let (och, rest) = rest.split_at_mut(d);
        let (ohc, ohh) = rest.split_at_mut(d);
        for i in 0..d {
            occ[i] = a[i] * p[i] + b[i] * r[i];
            och[i] = a[i] * q[i] + b[i] * s[i];
            ohc[i] = c[i] * p[i] + e[i] * r[i];
            ohh[i] = c[i] * q[i] + e[i] * s[i];
        }
    }
    #[inline]
    fn apply(&self, d: usize, j: &[T], v: &[T], out: &mut [T]) {
        let (vc, vh) = v.split_at(d);
        let (oc, oh) = out.split_at_mut(d);
        for i in 0..d {
            oc[i] = j[i] * vc[i] + j[d + i] * vh[i];
            oh[i] = j[2 * d + i] * vc[i] + j[3 * d + i] * vh[i];
        }
    }
    #[inline]
    fn apply_add(&self, d: usize, j: &[T], v: &[T], acc: &mut [T]) {
        let (vc, vh) = v.split_at(d);
        let (oc, oh) = acc.split_at_mut(d);
        for i in 0..d {
            oc[i] += j[i] * vc[i] + j[d + i] * vh[i];
            oh[i] += j[2 * d + i] * vc[i] + j[3 * d + i] * vh[i];
        }
    }
    fn transpose(&self, d: usize, j: &[T], out: &mut [T]) {
        out[..d].copy_from_slice(&j[..d]);
        out[d..2 * d].copy_from_slice(&j[2 * d..3 * d]);
        out[2 * d..3 * d].copy_from_slice(&j[d..2 * d]);
        out[3 * d..].copy_from_slice(&j[3 * d..]);
    }
    fn identity(&self, d: usize, out: &mut [T]) {
        out[..d].fill(T::one());
        out[d..3 * d].fill(T::zero());
        out[3 * d..].fill(T::one());
    }
    fn to_dense(&self, d: usize, j: &[T], out: &mut [T]) {
        let w = 2 * d;
        out.fill(T::zero());
        for i in 0..d {
            out[i * w + i] = j[i];
            out[i * w + d + i] = j[d + i];
            out[(d + i) * w + i] = j[2 * d + i];
            out[(d + i) * w + d + i] = j[3 * d + i];
        }
    }
}

impl<T: Scalar> JacobianStructure<T> for Dense {
    fn payload_len(&self, d: usize) -> usize {
        d * d
    }
    fn state_width(&self, d: usize) -> usize {
        d
    }
    fn compose(&self, d: usize, j2: &[T], j1: &[T], out: &mut [T]) {
        out.fill(T::zero());
        for i in 0..d {
            let row = &mut out[i * d..(i + 1) * d];
            for k in 0..d {
                let a = j2[i * d + k];
                for (o, &b) in row.iter_mut().zip(&j1[k * d..(k + 1) * d]) {
                    *o += a * b;
                }
            }
        }
    }
    fn apply(&self, d: usize, j: &[T], v: &[T], out: &mut [T]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = j[i * d..(i + 1) * d].iter().zip(v).map(|(&a, &x)| a * x).sum();
        }
    }
    fn apply_add(&self, d: usize, j: &[T], v: &[T], acc: &mut [T]) {
        for (i, o) in acc.iter_mut().enumerate() {
            *o += j[i * d..(i + 1) * d].iter().zip(v).map(|(&a, &x)| a * x).sum();
        }
    }
    fn transpose(&self, d: usize, j: &[T], out: &mut [T]) {
        for i in 0..d {
            for k in 0..d {
                out[k * d + i] = j[i * d + k];
            }
        }
    }
    fn identity(&self, d: usize, out: &mut [T]) {
        out.fill(T::zero());
        for i in 0..d {
            out[i * d + i] = T::one();
        }
    }
    fn to_dense(&self, _d: usize, j: &[T], out: &mut [T]) {
        out.copy_from_slice(j);
    }
}

/// A single structured Jacobian.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianEntry<T> {
    pub layout: Layout,
    pub d: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> JacobianEntry<T> {
    pub fn new(layout: Layout, d: usize, data: Vec<T>) -> Result<Self, JacobianError> {
        check_dense(layout, d)?;
        let expected = layout.payload_len(d);
        if data.len() != expected {
            return Err(JacobianError::WidthMismatch { expected, got: data.len() });
        }
        Ok(JacobianEntry { layout, d, data })
    }

    pub fn identity(layout: Layout, d: usize) -> Self {
        let mut data = vec![T::zero(); layout.payload_len(d)];
        layout.structure::<T>().identity(d, &mut data);
        JacobianEntry { layout, d, data }
    }

    pub fn state_width(&self) -> usize {
        self.layout.state_width(self.d)
    }

    /// Matrix product `self * rhs` in the shared layout.
    pub fn compose(&self, rhs: &Self) -> Result<Self, JacobianError> {
        self.check_same(rhs)?;
        let mut data = vec![T::zero(); self.data.len()];
        self.layout.structure::<T>().compose(self.d, &self.data, &rhs.data, &mut data);
        Ok(JacobianEntry { layout: self.layout, d: self.d, data })
    }

    pub fn apply(&self, v: &[T]) -> Result<Vec<T>, JacobianError> {
        let w = self.state_width();
        if v.len() != w {
            return Err(JacobianError::WidthMismatch { expected: w, got: v.len() });
        }
        let mut out = vec![T::zero(); w];
        self.layout.structure::<T>().apply(self.d, &self.data, v, &mut out);
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![T::zero(); self.data.len()];
        self.layout.structure::<T>().transpose(self.d, &self.data, &mut data);
        JacobianEntry { layout: self.layout, d: self.d, data }
    }

    /// Exact dense expansion (`Dense` layout of width `state_width()`).
    pub fn to_dense(&self) -> Self {
        let w = self.state_width();
        let mut data = vec![T::zero(); w * w];
        self.layout.structure::<T>().to_dense(self.d, &self.data, &mut data);
        JacobianEntry { layout: Layout::Dense, d: w, data }
    }

    fn check_same(&self, other: &Self) -> Result<(), JacobianError> {
        if self.layout != other.layout {
            return Err(JacobianError::LayoutMismatch(self.layout, other.layout));
        }
        if self.d != other.d {
            return Err(JacobianError::WidthMismatch { expected: self.d, got: other.d });
        }
        Ok(())
    }
}

fn check_dense(layout: Layout, d: usize) -> Result<(), JacobianError> {
    if layout == Layout::Dense && d > DENSE_MAX_WIDTH {
        return Err(JacobianError::DenseTooLarge(d));
    }
    Ok(())
}

/// Jacobians for every `(b, l)` of a batch, laid out `(B, L, payload)`.
///
/// The entry stored at position `l` is `∂f/∂h` evaluated at `(h_{l-1}, x_l)`,
/// i.e. the multiplier of `δh_{l-1}` in row `l` of the bi-diagonal system.
/// The entry at `l = 0` multiplies the fixed zero initial state and is never
/// read by the solvers' results.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuredJacobianSeq<T> {
    layout: Layout,
    batch: usize,
    len: usize,
    d: usize,
    data: Vec<T>,
}

impl<T: Scalar> StructuredJacobianSeq<T> {
    pub fn zeros(layout: Layout, batch: usize, len: usize, d: usize) -> Result<Self, JacobianError> {
        check_dense(layout, d)?;
        let n = batch * len * layout.payload_len(d);
        Ok(StructuredJacobianSeq { layout, batch, len, d, data: vec![T::zero(); n] })
    }

    pub fn identity(layout: Layout, batch: usize, len: usize, d: usize) -> Result<Self, JacobianError> {
        let mut out = Self::zeros(layout, batch, len, d)?;
        let s = layout.structure::<T>();
        let p = layout.payload_len(d);
        for e in out.data.chunks_exact_mut(p) {
            s.identity(d, e);
        }
        Ok(out)
    }

    pub fn from_vec(
        layout: Layout,
        batch: usize,
        len: usize,
        d: usize,
        data: Vec<T>,
    ) -> Result<Self, JacobianError> {
        check_dense(layout, d)?;
        let expected = batch * len * layout.payload_len(d);
        if data.len() != expected {
            return Err(JacobianError::WidthMismatch { expected, got: data.len() });
        }
        Ok(StructuredJacobianSeq { layout, batch, len, d, data })
    }

    /// Entries uniform in `[-bound, bound]`, drawn in flat order.
    pub fn random(
        layout: Layout,
        batch: usize,
        len: usize,
        d: usize,
        bound: f64,
        rng: &mut Rng,
    ) -> Result<Self, JacobianError> {
        let mut out = Self::zeros(layout, batch, len, d)?;
        rng.fill_uniform(&mut out.data, -bound, bound);
        Ok(out)
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn seq_len(&self) -> usize {
        self.len
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn payload_len(&self) -> usize {
        self.layout.payload_len(self.d)
    }

    pub fn state_width(&self) -> usize {
        self.layout.state_width(self.d)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    #[inline]
    pub fn entry(&self, b: usize, l: usize) -> &[T] {
        let p = self.payload_len();
        let o = (b * self.len + l) * p;
        &self.data[o..o + p]
    }

    #[inline]
    pub fn entry_mut(&mut self, b: usize, l: usize) -> &mut [T] {
        let p = self.payload_len();
        let o = (b * self.len + l) * p;
        &mut self.data[o..o + p]
    }

    pub fn row(&self, b: usize) -> &[T] {
        let n = self.len * self.payload_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn get(&self, b: usize, l: usize) -> Result<JacobianEntry<T>, JacobianError> {
        if b >= self.batch || l >= self.len {
            return Err(JacobianError::OutOfRange(b, l));
        }
        Ok(JacobianEntry { layout: self.layout, d: self.d, data: self.entry(b, l).to_vec() })
    }

    pub fn set(&mut self, b: usize, l: usize, e: &JacobianEntry<T>) -> Result<(), JacobianError> {
        if e.layout != self.layout {
            return Err(JacobianError::LayoutMismatch(self.layout, e.layout));
        }
        if e.d != self.d {
            return Err(JacobianError::WidthMismatch { expected: self.d, got: e.d });
        }
        if b >= self.batch || l >= self.len {
            return Err(JacobianError::OutOfRange(b, l));
        }
        self.entry_mut(b, l).copy_from_slice(&e.data);
        Ok(())
    }

    /// Dense expansion of every entry.
    pub fn to_dense(&self) -> Result<Self, JacobianError> {
        let w = self.state_width();
        let mut out = Self::zeros(Layout::Dense, self.batch, self.len, w)?;
        let s = self.layout.structure::<T>();
        let p = self.payload_len();
        for (src, dst) in self.data.chunks_exact(p).zip(out.data.chunks_exact_mut(w * w)) {
            s.to_dense(self.d, src, dst);
        }
        Ok(out)
    }

    /// Transposes every entry in place.
    pub fn transpose_entries(&mut self) {
        let s = self.layout.structure::<T>();
        let p = self.payload_len();
        let mut tmp = vec![T::zero(); p];
        for e in self.data.chunks_exact_mut(p) {
            s.transpose(self.d, e, &mut tmp);
            e.copy_from_slice(&tmp);
        }
    }
}
