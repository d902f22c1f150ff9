//! Solvers for the block bi-diagonal system
//!
//! ```text
//! δh_l = J_l δh_{l-1} + r_l,   l = 0..L-1,   δh_{-1} = 0
//! ```
//!
//! where `J_l` is the Jacobian stored at position `l` (see
//! [`StructuredJacobianSeq`]). Algorithm 1b's `A_l = -J` and
//! `δh_l <- δh_l - A_l δh_{l-s}` is the same update with the sign folded in.
//!
//! * [`solve_sequential`]: forward substitution, the reference oracle.
//! * [`solve_parallel_naive`]: `ceil(log2 L)` rounds of pairwise reduction.
//! * [`solve_parallel_hybrid`]: chunked forward substitution, a reduction
//!   over chunk tails inside each segment, and either sequential segments
//!   (carrying the boundary state) or a cross-segment reduction followed by a
//!   per-segment fix-up.
//! * [`solve_backward`]: the transposed, reversed system of the backward pass,
//!   routed through the hybrid solver.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jacobians::{JacobianStructure, StructuredJacobianSeq};
use crate::pool;
use crate::tensor::{Scalar, SequenceBatch, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScanError {
    #[error("Jacobians cover {jac:?} (batch, length) but right-hand side is {rhs:?}")]
    LengthMismatch { jac: (usize, usize), rhs: (usize, usize) },
    #[error("state width mismatch: Jacobians act on {expected}, right-hand side has {got}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("invalid scan config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Hybrid solver hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanConfig {
    /// Positions forward-substituted by one worker task.
    pub chunk_size: usize,
    pub workers: usize,
    /// Above this many segments the cross-segment reduction kicks in.
    pub max_sequential_segments: usize,
    /// Chunks per segment (the analog of threads per block).
    pub segment_chunks: usize,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            chunk_size: 2,
            workers: pool::available_workers(),
            max_sequential_segments: 16,
            segment_chunks: 256,
        }
    }
}

impl ScanConfig {
    pub fn new(chunk_size: usize, workers: usize, max_sequential_segments: usize) -> Self {
        ScanConfig { chunk_size, workers, max_sequential_segments, ..Default::default() }
    }

    pub fn validate(&self) -> Result<(), ScanError> {
        for (name, v) in [
            ("chunk_size", self.chunk_size),
            ("workers", self.workers),
            ("max_sequential_segments", self.max_sequential_segments),
            ("segment_chunks", self.segment_chunks),
        ] {
            if v == 0 {
                return Err(ScanError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    pub fn segment_len(&self) -> usize {
        self.chunk_size * self.segment_chunks
    }
}

/// Instrumentation for a solve: position-level compose/apply counts and the
/// number of rounds of the deepest single reduction.
#[derive(Debug, Default)]
pub struct StepCounter {
    compose: AtomicU64,
    apply: AtomicU64,
    depth: AtomicU64,
}

impl StepCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn compose_count(&self) -> u64 {
        self.compose.load(Ordering::Relaxed)
    }

    pub fn apply_count(&self) -> u64 {
        self.apply.load(Ordering::Relaxed)
    }

    pub fn parallel_depth(&self) -> u64 {
        self.depth.load(Ordering::Relaxed)
    }

    fn record(&self, s: &Stats) {
        self.compose.fetch_add(s.compose, Ordering::Relaxed);
        self.apply.fetch_add(s.apply, Ordering::Relaxed);
        self.depth.fetch_max(s.depth, Ordering::Relaxed);
    }
}

#[derive(Debug, Default, Clone, Copy)]
struct Stats {
    compose: u64,
    apply: u64,
    depth: u64,
}

impl Stats {
    fn merge(self, o: Stats) -> Stats {
        Stats {
            compose: self.compose + o.compose,
            apply: self.apply + o.apply,
            depth: self.depth.max(o.depth),
        }
    }
}

/// Rayon tasks never get fewer than this many chunks; keeps scheduling
/// overhead below the per-position arithmetic.
const MIN_TASK_CHUNKS: usize = 32;

fn check_shapes<T: Scalar>(
    jac: &StructuredJacobianSeq<T>,
    rhs: &SequenceBatch<T>,
) -> Result<(), ScanError> {
    if (jac.batch(), jac.seq_len()) != (rhs.batch(), rhs.seq_len()) {
        return Err(ScanError::LengthMismatch {
            jac: (jac.batch(), jac.seq_len()),
            rhs: (rhs.batch(), rhs.seq_len()),
        });
    }
    if jac.state_width() != rhs.width() {
        return Err(ScanError::WidthMismatch { expected: jac.state_width(), got: rhs.width() });
    }
    Ok(())
}

/// Forward substitution, one position at a time.
pub fn solve_sequential<T: Scalar>(
    jac: &StructuredJacobianSeq<T>,
    rhs: &SequenceBatch<T>,
) -> Result<SequenceBatch<T>, ScanError> {
    check_shapes(jac, rhs)?;
    let s = jac.layout().structure::<T>();
    let (d, w) = (jac.d(), rhs.width());
    let mut out = rhs.clone();
    for b in 0..rhs.batch() {
        sequential_row(s, d, w, jac.row(b), out.row_mut(b));
    }
    Ok(out)
}

/// `out` holds the right-hand side on entry and the solution on exit.
fn sequential_row<T: Scalar>(
    s: &dyn JacobianStructure<T>,
    d: usize,
    w: usize,
    jac: &[T],
    out: &mut [T],
) {
    let p = s.payload_len(d);
    let len = out.len() / w;
    for l in 1..len {
        let (prev, cur) = out.split_at_mut(l * w);
        s.apply_add(d, &jac[l * p..(l + 1) * p], &prev[(l - 1) * w..], &mut cur[..w]);
    }
}

/// Pairwise reduction: round `i` (offset `s = 2^i`) updates every `l >= s` with
/// `b_l += A_l b_{l-s}` and `A_l <- A_l A_{l-s}` from the previous round's values.
pub fn solve_parallel_naive<T: Scalar>(
    jac: &StructuredJacobianSeq<T>,
    rhs: &SequenceBatch<T>,
    workers: usize,
    counter: Option<&StepCounter>,
) -> Result<SequenceBatch<T>, ScanError> {
    check_shapes(jac, rhs)?;
    let s = jac.layout().structure::<T>();
    let (d, w, p) = (jac.d(), rhs.width(), jac.payload_len());
    let len = rhs.seq_len();
    let mut out = rhs.clone();
    let pool = pool::pool(workers);
    let stats = pool.install(|| {
        out.data_mut()
            .par_chunks_mut(len * w)
            .zip(jac.data().par_chunks(len * p))
            .map(|(row, jrow)| naive_row(s, d, w, jrow, row))
            .reduce(Stats::default, Stats::merge)
    });
    if let Some(c) = counter {
        c.record(&stats);
    }
    Ok(out)
}

fn naive_row<T: Scalar>(
    s: &dyn JacobianStructure<T>,
    d: usize,
    w: usize,
    jac: &[T],
    out: &mut [T],
) -> Stats {
    let p = s.payload_len(d);
    let len = out.len() / w;
    let mut stats = Stats::default();
    let (mut a, mut a_next) = (jac.to_vec(), jac.to_vec());
    let mut b_next = out.to_vec();
    let mut b: &mut [T] = out;
    let mut b_next: &mut [T] = &mut b_next;
    let mut offset = 1;
    let mut swapped = false;
    while offset < len {
        let (a_ref, b_ref) = (&a, &*b);
        a_next
            .par_chunks_mut(p)
            .zip(b_next.par_chunks_mut(w))
            .enumerate()
            .with_min_len(256)
            .for_each(|(l, (an, bn))| {
                let (al, bl) = (&a_ref[l * p..(l + 1) * p], &b_ref[l * w..(l + 1) * w]);
                bn.copy_from_slice(bl);
                if l >= offset {
                    let m = l - offset;
                    s.apply_add(d, al, &b_ref[m * w..(m + 1) * w], bn);
                    s.compose(d, al, &a_ref[m * p..(m + 1) * p], an);
                } else {
                    an.copy_from_slice(al);
                }
            });
        let updated = (len - offset) as u64;
        stats.compose += updated;
        stats.apply += updated;
        stats.depth += 1;
        std::mem::swap(&mut a, &mut a_next);
        std::mem::swap(&mut b, &mut b_next);
        swapped = !swapped;
        offset *= 2;
    }
    if swapped {
        b_next.copy_from_slice(b);
    }
    stats
}

/// Owns a worker pool and a validated [`ScanConfig`].
#[derive(Clone)]
pub struct ScanSolver {
    cfg: ScanConfig,
    pool: Arc<ThreadPool>,
}

impl std::fmt::Debug for ScanSolver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ScanSolver").field("cfg", &self.cfg).finish()
    }
}

impl ScanSolver {
    pub fn new(cfg: ScanConfig) -> Result<Self, ScanError> {
        cfg.validate()?;
        Ok(ScanSolver { cfg, pool: pool::pool(cfg.workers) })
    }

    pub fn config(&self) -> &ScanConfig {
        &self.cfg
    }

    pub fn pool(&self) -> &ThreadPool {
        &self.pool
    }

    pub fn hybrid<T: Scalar>(
        &self,
        jac: &StructuredJacobianSeq<T>,
        rhs: &SequenceBatch<T>,
        counter: Option<&StepCounter>,
    ) -> Result<SequenceBatch<T>, ScanError> {
        check_shapes(jac, rhs)?;
        let mut out = rhs.clone();
        self.hybrid_raw(
            jac.layout().structure::<T>(),
            jac.d(),
            rhs.seq_len(),
            jac.data(),
            out.data_mut(),
            counter,
        );
        Ok(out)
    }

    /// Hybrid solve over raw buffers for any [`JacobianStructure`]:
    /// `jac` is `(B, seq_len, payload)` and `rhs_out` is `(B, seq_len, state_width)`,
    /// holding the right-hand side on entry and the solution on exit.
    pub fn hybrid_raw<T: Scalar>(
        &self,
        s: &dyn JacobianStructure<T>,
        d: usize,
        seq_len: usize,
        jac: &[T],
        rhs_out: &mut [T],
        counter: Option<&StepCounter>,
    ) {
        let (p, w) = (s.payload_len(d), s.state_width(d));
        assert_eq!(jac.len() % p, 0);
        let positions = jac.len() / p;
        assert_eq!(rhs_out.len(), positions * w, "hybrid_raw buffer sizes");
        if positions == 0 || seq_len == 0 {
            return;
        }
        assert_eq!(positions % seq_len, 0, "hybrid_raw: positions not a multiple of seq_len");
        let cfg = &self.cfg;
        let stats = self.pool.install(|| {
            rhs_out
                .par_chunks_mut(seq_len * w)
                .zip(jac.par_chunks(seq_len * p))
                .map(|(o, j)| hybrid_row(s, d, cfg, j, o))
                .reduce(Stats::default, Stats::merge)
        });
        if let Some(c) = counter {
            c.record(&stats);
        }
    }

    /// Solves the backward recurrence
    /// `g_{l-1} = J_lᵀ g_l + direct_{l-1}`, `g_{L-1} = direct_{L-1}`.
    ///
    /// Reversing positions turns it into a forward system whose Jacobian at
    /// reversed position `m >= 1` is `J_{L-m}ᵀ`, which the hybrid solver handles.
    pub fn backward<T: Scalar>(
        &self,
        jac: &StructuredJacobianSeq<T>,
        grads_direct: &SequenceBatch<T>,
        counter: Option<&StepCounter>,
    ) -> Result<SequenceBatch<T>, ScanError> {
        check_shapes(jac, grads_direct)?;
        let rev_jac = reversed_transposed(jac);
        let rev = grads_direct.reversed();
        let solved = self.hybrid(&rev_jac, &rev, counter)?;
        Ok(solved.reversed())
    }
}

/// `out[m] = jac[L - m]ᵀ` for `m >= 1`, zero at `m = 0`.
fn reversed_transposed<T: Scalar>(jac: &StructuredJacobianSeq<T>) -> StructuredJacobianSeq<T> {
    let s = jac.layout().structure::<T>();
    let len = jac.seq_len();
    let mut out = StructuredJacobianSeq::zeros(jac.layout(), jac.batch(), len, jac.d())
        .expect("same shape as an existing sequence");
    for b in 0..jac.batch() {
        for m in 1..len {
            s.transpose(jac.d(), jac.entry(b, len - m), out.entry_mut(b, m));
        }
    }
    out
}

fn hybrid_row<T: Scalar>(
    s: &dyn JacobianStructure<T>,
    d: usize,
    cfg: &ScanConfig,
    jac: &[T],
    out: &mut [T],
) -> Stats {
    let (p, w) = (s.payload_len(d), s.state_width(d));
    let len = out.len() / w;
    let seg_len = cfg.segment_len();
    let n_segs = len.div_ceil(seg_len);
    let mut abar = vec![T::zero(); jac.len()];
    let mut stats = Stats::default();

    if n_segs <= cfg.max_sequential_segments {
        let mut carry: Option<Vec<T>> = None;
        for seg in 0..n_segs {
            let (lo, hi) = (seg * seg_len, ((seg + 1) * seg_len).min(len));
            let (st, _) = solve_segment(
                s,
                d,
                cfg.chunk_size,
                &jac[lo * p..hi * p],
                &mut out[lo * w..hi * w],
                &mut abar[lo * p..hi * p],
                carry.as_deref(),
            );
            stats = stats.merge(st);
            carry = Some(out[(hi - 1) * w..hi * w].to_vec());
        }
        return stats;
    }

    // Cross-segment path: independent segment solves with zero carry.
    let results: Vec<(Stats, Vec<T>)> = out
        .par_chunks_mut(seg_len * w)
        .zip(abar.par_chunks_mut(seg_len * p))
        .zip(jac.par_chunks(seg_len * p))
        .map(|((o, a), j)| solve_segment(s, d, cfg.chunk_size, j, o, a, None))
        .collect();
    let mut tails_a = Vec::with_capacity(n_segs * p);
    let mut tails_b = Vec::with_capacity(n_segs * w);
    for (seg, (st, tail_scan)) in results.iter().enumerate() {
        stats = stats.merge(*st);
        let hi = ((seg + 1) * seg_len).min(len);
        tails_a.extend_from_slice(&tail_scan[tail_scan.len() - p..]);
        tails_b.extend_from_slice(&out[(hi - 1) * w..hi * w]);
    }
    let cross = scan_tails(s, d, &mut tails_a, &mut tails_b, n_segs);
    stats.compose += cross.compose;
    stats.apply += cross.apply;
    stats.depth = stats.depth.max(cross.depth);

    let c = cfg.chunk_size;
    let tails_b = &tails_b;
    let fix: Stats = out
        .par_chunks_mut(seg_len * w)
        .zip(abar.par_chunks(seg_len * p))
        .zip(results.par_iter())
        .enumerate()
        .skip(1)
        .map(|(seg, ((o, a), (_, tail_scan)))| {
            let carry = &tails_b[(seg - 1) * w..seg * w];
            let mut st = Stats::default();
            let mut v = vec![T::zero(); w];
            for (k, (oc, ac)) in o.chunks_mut(c * w).zip(a.chunks(c * p)).enumerate() {
                if k == 0 {
                    v.copy_from_slice(carry);
                } else {
                    s.apply(d, &tail_scan[(k - 1) * p..k * p], carry, &mut v);
                    st.apply += 1;
                }
                for (oi, ai) in oc.chunks_mut(w).zip(ac.chunks(p)) {
                    s.apply_add(d, ai, &v, oi);
                    st.apply += 1;
                }
            }
            st
        })
        .reduce(Stats::default, Stats::merge);
    stats.compose += fix.compose;
    stats.apply += fix.apply;
    stats
}

/// Solves one segment given the state just before it (`None` = zero).
///
/// On return `out` holds the solution, `abar[l]` the product of the Jacobians
/// from the start of `l`'s chunk up to `l`, and the returned vector the
/// scanned chunk-tail Jacobians (products from the segment start).
fn solve_segment<T: Scalar>(
    s: &dyn JacobianStructure<T>,
    d: usize,
    c: usize,
    jac: &[T],
    out: &mut [T],
    abar: &mut [T],
    carry: Option<&[T]>,
) -> (Stats, Vec<T>) {
    let (p, w) = (s.payload_len(d), s.state_width(d));
    let len = out.len() / w;
    let n_chunks = len.div_ceil(c);
    let mut stats = Stats::default();

    // (i) forward substitution inside every chunk
    let st: Stats = out
        .par_chunks_mut(c * w)
        .zip(abar.par_chunks_mut(c * p))
        .zip(jac.par_chunks(c * p))
        .with_min_len(MIN_TASK_CHUNKS)
        .map(|((o, a), j)| {
            let n = o.len() / w;
            a[..p].copy_from_slice(&j[..p]);
            for i in 1..n {
                let (prev, cur) = o.split_at_mut(i * w);
                s.apply_add(d, &j[i * p..(i + 1) * p], &prev[(i - 1) * w..], &mut cur[..w]);
                let (aprev, acur) = a.split_at_mut(i * p);
                s.compose(d, &j[i * p..(i + 1) * p], &aprev[(i - 1) * p..], &mut acur[..p]);
            }
            let k = (n - 1) as u64;
            Stats { compose: k, apply: k, depth: 0 }
        })
        .reduce(Stats::default, Stats::merge);
    stats = stats.merge(st);

    // (ii) reduction over chunk tails
    let tail_pos = |k: usize| ((k + 1) * c).min(len) - 1;
    let mut ta = Vec::with_capacity(n_chunks * p);
    let mut tb = Vec::with_capacity(n_chunks * w);
    for k in 0..n_chunks {
        let t = tail_pos(k);
        ta.extend_from_slice(&abar[t * p..(t + 1) * p]);
        tb.extend_from_slice(&out[t * w..(t + 1) * w]);
    }
    let st = scan_tails(s, d, &mut ta, &mut tb, n_chunks);
    stats.compose += st.compose;
    stats.apply += st.apply;
    stats.depth = stats.depth.max(st.depth);
    if let Some(cv) = carry {
        for k in 0..n_chunks {
            s.apply_add(d, &ta[k * p..(k + 1) * p], cv, &mut tb[k * w..(k + 1) * w]);
        }
        stats.apply += n_chunks as u64;
    }

    // back-substitution of chunk interiors from the previous chunk's tail
    let tb_ref = &tb;
    let st: Stats = out
        .par_chunks_mut(c * w)
        .zip(abar.par_chunks(c * p))
        .enumerate()
        .with_min_len(MIN_TASK_CHUNKS)
        .map(|(k, (o, a))| {
            let n = o.len() / w;
            o[(n - 1) * w..].copy_from_slice(&tb_ref[k * w..(k + 1) * w]);
            let v = if k == 0 { carry } else { Some(&tb_ref[(k - 1) * w..k * w]) };
            let Some(v) = v else { return Stats::default() };
            for i in 0..n - 1 {
                s.apply_add(d, &a[i * p..(i + 1) * p], v, &mut o[i * w..(i + 1) * w]);
            }
            Stats { compose: 0, apply: (n - 1) as u64, depth: 0 }
        })
        .reduce(Stats::default, Stats::merge);
    stats = stats.merge(st);
    (stats, ta)
}

/// In-place pairwise reduction of `n` equations `x_k = a_k x_{k-1} + b_k`
/// (`x_{-1} = 0`). On return `b_k = x_k` and `a_k` is the product `a_k ... a_0`.
fn scan_tails<T: Scalar>(
    s: &dyn JacobianStructure<T>,
    d: usize,
    a: &mut Vec<T>,
    b: &mut Vec<T>,
    n: usize,
) -> Stats {
    let (p, w) = (s.payload_len(d), s.state_width(d));
    let mut stats = Stats::default();
    if n <= 1 {
        return stats;
    }
    let mut a_next = a.clone();
    let mut b_next = b.clone();
    let mut offset = 1;
    while offset < n {
        let (ar, br) = (&*a, &*b);
        a_next
            .par_chunks_mut(p)
            .zip(b_next.par_chunks_mut(w))
            .enumerate()
            .with_min_len(MIN_TASK_CHUNKS)
            .for_each(|(k, (an, bn))| {
                let (ak, bk) = (&ar[k * p..(k + 1) * p], &br[k * w..(k + 1) * w]);
                bn.copy_from_slice(bk);
                if k >= offset {
                    let m = k - offset;
                    s.apply_add(d, ak, &br[m * w..(m + 1) * w], bn);
                    s.compose(d, ak, &ar[m * p..(m + 1) * p], an);
                } else {
                    an.copy_from_slice(ak);
                }
            });
        let updated = (n - offset) as u64;
        stats.compose += updated;
        stats.apply += updated;
        stats.depth += 1;
        std::mem::swap(a, &mut a_next);
        std::mem::swap(b, &mut b_next);
        offset *= 2;
    }
    stats
}

/// Hybrid solve with `cfg`, using the shared pool for `cfg.workers`.
pub fn solve_parallel_hybrid<T: Scalar>(
    jac: &StructuredJacobianSeq<T>,
    rhs: &SequenceBatch<T>,
    cfg: &ScanConfig,
    counter: Option<&StepCounter>,
) -> Result<SequenceBatch<T>, ScanError> {
    ScanSolver::new(*cfg)?.hybrid(jac, rhs, counter)
}

/// Backward recurrence through [`ScanSolver::backward`].
pub fn solve_backward<T: Scalar>(
    jac: &StructuredJacobianSeq<T>,
    grads_direct: &SequenceBatch<T>,
    cfg: &ScanConfig,
    counter: Option<&StepCounter>,
) -> Result<SequenceBatch<T>, ScanError> {
    ScanSolver::new(*cfg)?.backward(jac, grads_direct, counter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jacobians::Layout;
    use crate::tensor::Rng;

    const LAYOUTS: [Layout; 3] = [Layout::Diagonal, Layout::BlockDiag2x2, Layout::Dense];

    fn problem(
        layout: Layout,
        b: usize,
        l: usize,
        d: usize,
        seed: u64,
    ) -> (StructuredJacobianSeq<f64>, SequenceBatch<f64>) {
        let mut rng = Rng::new(seed);
        // dense entries scaled so that the spectral norm stays below 0.9
        let bound = if layout == Layout::Dense { 0.9 / d as f64 } else { 0.45 };
        let jac = StructuredJacobianSeq::random(layout, b, l, d, bound, &mut rng).unwrap();
        let rhs = SequenceBatch::randn(b, l, layout.state_width(d), 1.0, &mut rng).unwrap();
        (jac, rhs)
    }

    /// Independent dense forward loop over explicit matrices.
    fn dense_oracle(jac: &StructuredJacobianSeq<f64>, rhs: &SequenceBatch<f64>) -> SequenceBatch<f64> {
        let dense = jac.to_dense().unwrap();
        let w = rhs.width();
        let mut out = rhs.clone();
        for b in 0..rhs.batch() {
            for l in 1..rhs.seq_len() {
                let prev = out.at(b, l - 1).to_vec();
                let m = dense.entry(b, l);
                let cur = out.at_mut(b, l);
                for i in 0..w {
                    for j in 0..w {
                        cur[i] += m[i * w + j] * prev[j];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn sequential_hand_unroll() {
        let jac = StructuredJacobianSeq::from_vec(Layout::Diagonal, 1, 3, 1, vec![9.0, 0.5, 0.5])
            .unwrap();
        let rhs = SequenceBatch::from_vec(1, 3, 1, vec![1.0, 1.0, 1.0]).unwrap();
        let out = solve_sequential(&jac, &rhs).unwrap();
        assert_eq!(out.data(), &[1.0, 1.5, 1.75]);
    }

    #[test]
    fn zero_jacobians_pass_rhs_through() {
        for layout in LAYOUTS {
            let (_, rhs) = problem(layout, 2, 7, 3, 1);
            let jac = StructuredJacobianSeq::zeros(layout, 2, 7, 3).unwrap();
            assert_eq!(solve_sequential(&jac, &rhs).unwrap(), rhs);
            assert_eq!(solve_parallel_naive(&jac, &rhs, 2, None).unwrap(), rhs);
            let cfg = ScanConfig::new(2, 2, 16);
            assert_eq!(solve_parallel_hybrid(&jac, &rhs, &cfg, None).unwrap(), rhs);
            assert_eq!(solve_backward(&jac, &rhs, &cfg, None).unwrap(), rhs);
        }
    }

    #[test]
    fn single_position_is_untouched() {
        for layout in LAYOUTS {
            let (jac, rhs) = problem(layout, 3, 1, 2, 5);
            let c = StepCounter::new();
            assert_eq!(solve_parallel_naive(&jac, &rhs, 1, Some(&c)).unwrap(), rhs);
            assert_eq!(c.parallel_depth(), 0);
            let cfg = ScanConfig::new(3, 1, 1);
            assert_eq!(solve_parallel_hybrid(&jac, &rhs, &cfg, None).unwrap(), rhs);
        }
    }

    #[test]
    fn shape_errors() {
        let (jac, _) = problem(Layout::Diagonal, 1, 4, 2, 0);
        let rhs = SequenceBatch::<f64>::zeros(1, 5, 2).unwrap();
        assert!(matches!(solve_sequential(&jac, &rhs), Err(ScanError::LengthMismatch { .. })));
        let rhs = SequenceBatch::<f64>::zeros(1, 4, 3).unwrap();
        assert!(matches!(
            solve_parallel_naive(&jac, &rhs, 1, None),
            Err(ScanError::WidthMismatch { expected: 2, got: 3 })
        ));
        let rhs = SequenceBatch::<f64>::zeros(1, 4, 2).unwrap();
        let bad = ScanConfig { chunk_size: 0, ..ScanConfig::default() };
        assert!(matches!(
            solve_parallel_hybrid(&jac, &rhs, &bad, None),
            Err(ScanError::InvalidConfig(_))
        ));
    }

    #[test]
    fn sequential_matches_dense_oracle() {
        for layout in LAYOUTS {
            let (jac, rhs) = problem(layout, 2, 33, 3, 11);
            let got = solve_sequential(&jac, &rhs).unwrap();
            assert!(got.max_abs_diff(&dense_oracle(&jac, &rhs)) < 1e-12);
        }
    }

    #[test]
    fn naive_matches_sequential_diagonal_sweep() {
        for seed in 0..500u64 {
            let l = [2, 3, 5, 8, 17, 64][seed as usize % 6];
            let (jac, rhs) = problem(Layout::Diagonal, 1, l, 3, seed);
            let seq = solve_sequential(&jac, &rhs).unwrap();
            let par = solve_parallel_naive(&jac, &rhs, 1, None).unwrap();
            assert!(par.max_abs_diff(&seq) < 1e-12, "seed {seed} L {l}");
        }
    }

    #[test]
    fn naive_depth_is_ceil_log2() {
        for (l, depth) in [(1, 0), (2, 1), (3, 2), (4, 2), (8, 3), (9, 4), (1000, 10)] {
            let (jac, rhs) = problem(Layout::Diagonal, 1, l, 1, 3);
            let c = StepCounter::new();
            solve_parallel_naive(&jac, &rhs, 1, Some(&c)).unwrap();
            assert_eq!(c.parallel_depth(), depth, "L = {l}");
        }
    }

    #[test]
    fn hybrid_unit_chunks_match_naive() {
        for layout in LAYOUTS {
            for l in [1, 2, 3, 7, 31, 64] {
                let (jac, rhs) = problem(layout, 2, l, 2, l as u64);
                let cfg = ScanConfig::new(1, 1, 1);
                let hyb = solve_parallel_hybrid(&jac, &rhs, &cfg, None).unwrap();
                let naive = solve_parallel_naive(&jac, &rhs, 1, None).unwrap();
                assert!(hyb.max_abs_diff(&naive) < 1e-12);
            }
        }
    }

    #[test]
    fn hybrid_single_chunk_is_bitwise_sequential() {
        for layout in LAYOUTS {
            for l in [1, 5, 100] {
                let (jac, rhs) = problem(layout, 2, l, 3, 7);
                let cfg = ScanConfig { chunk_size: l, workers: 1, ..ScanConfig::default() };
                let hyb = solve_parallel_hybrid(&jac, &rhs, &cfg, None).unwrap();
                assert_eq!(hyb, solve_sequential(&jac, &rhs).unwrap());
            }
        }
    }

    #[test]
    fn hybrid_block_diag_l1000() {
        let cfg = ScanConfig::new(4, 8, 4);
        for seed in 0..500u64 {
            let (jac, rhs) = problem(Layout::BlockDiag2x2, 1, 1000, 1, seed);
            let seq = solve_sequential(&jac, &rhs).unwrap();
            let hyb = solve_parallel_hybrid(&jac, &rhs, &cfg, None).unwrap();
            assert!(hyb.max_abs_diff(&seq) < 1e-10, "seed {seed}");
        }
    }

    #[test]
    fn hybrid_regimes_all_layouts() {
        // segment counts on both sides of max_sequential_segments, ragged tails
        let cfgs = [
            ScanConfig { chunk_size: 2, workers: 2, max_sequential_segments: 16, segment_chunks: 4 },
            ScanConfig { chunk_size: 3, workers: 3, max_sequential_segments: 2, segment_chunks: 5 },
            ScanConfig { chunk_size: 1, workers: 1, max_sequential_segments: 1, segment_chunks: 2 },
            ScanConfig { chunk_size: 8, workers: 4, max_sequential_segments: 16, segment_chunks: 256 },
        ];
        let lens = [1, 2, 3, 4, 5, 6, 7, 8, 9, 31, 64, 257, 1000];
        for layout in LAYOUTS {
            for (i, cfg) in cfgs.iter().enumerate() {
                for &l in &lens {
                    let (jac, rhs) = problem(layout, 2, l, 3, (i * 10_000 + l) as u64);
                    let seq = solve_sequential(&jac, &rhs).unwrap();
                    let hyb = solve_parallel_hybrid(&jac, &rhs, cfg, None).unwrap();
                    assert!(hyb.max_abs_diff(&seq) < 1e-10, "{layout:?} {cfg:?} L {l}");
                }
            }
        }
    }

    #[test]
    fn f32_agrees_with_sequential() {
        let cfg = ScanConfig { chunk_size: 2, workers: 2, max_sequential_segments: 2, segment_chunks: 8 };
        for layout in LAYOUTS {
            let (jac, rhs) = problem(layout, 2, 4096, 2, 99);
            let jac32 = StructuredJacobianSeq::from_vec(
                layout,
                2,
                4096,
                2,
                jac.data().iter().map(|&v| v as f32).collect(),
            )
            .unwrap();
            let rhs32 = rhs.cast::<f32>();
            let seq = solve_sequential(&jac32, &rhs32).unwrap();
            let hyb = solve_parallel_hybrid(&jac32, &rhs32, &cfg, None).unwrap();
            assert!(hyb.max_abs_diff(&seq) < 1e-4);
        }
    }

    fn reverse_loop(jac: &StructuredJacobianSeq<f64>, g: &SequenceBatch<f64>) -> SequenceBatch<f64> {
        let dense = jac.to_dense().unwrap();
        let w = g.width();
        let len = g.seq_len();
        let mut out = g.clone();
        for b in 0..g.batch() {
            for l in (1..len).rev() {
                let next = out.at(b, l).to_vec();
                let m = dense.entry(b, l);
                let cur = out.at_mut(b, l - 1);
                for j in 0..w {
                    for i in 0..w {
                        cur[j] += m[i * w + j] * next[i];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn backward_matches_reverse_loop() {
        let cfg = ScanConfig { chunk_size: 2, workers: 2, max_sequential_segments: 2, segment_chunks: 4 };
        for seed in 0..500u64 {
            let l = 1 + (seed as usize * 7) % 40;
            let (jac, g) = problem(Layout::Diagonal, 2, l, 2, seed);
            let got = solve_backward(&jac, &g, &cfg, None).unwrap();
            assert!(got.max_abs_diff(&reverse_loop(&jac, &g)) < 1e-12, "seed {seed}");
        }
        for layout in [Layout::BlockDiag2x2, Layout::Dense] {
            let (jac, g) = problem(layout, 2, 77, 3, 4);
            let got = solve_backward(&jac, &g, &cfg, None).unwrap();
            assert!(got.max_abs_diff(&reverse_loop(&jac, &g)) < 1e-12);
        }
    }

    #[test]
    fn backward_index_shift_identity() {
        // reverse(solve_sequential(J', reverse(g))) with J'_m = J_{L-m}
        let (jac, g) = problem(Layout::Diagonal, 1, 9, 2, 8);
        let len = 9;
        let mut shifted = StructuredJacobianSeq::zeros(Layout::Diagonal, 1, len, 2).unwrap();
        for m in 1..len {
            shifted.entry_mut(0, m).copy_from_slice(jac.entry(0, len - m));
        }
        let expect = solve_sequential(&shifted, &g.reversed()).unwrap().reversed();
        let got = solve_backward(&jac, &g, &ScanConfig::default(), None).unwrap();
        assert!(got.max_abs_diff(&expect) < 1e-14);
    }

    #[test]
    fn hybrid_work_within_twice_naive() {
        for l in [2, 3, 4, 8, 9, 1000, 4096] {
            let (jac, rhs) = problem(Layout::Diagonal, 1, l, 1, 2);
            let (cn, ch) = (StepCounter::new(), StepCounter::new());
            solve_parallel_naive(&jac, &rhs, 1, Some(&cn)).unwrap();
            solve_parallel_hybrid(&jac, &rhs, &ScanConfig::default(), Some(&ch)).unwrap();
            assert!(ch.compose_count() <= 2 * cn.compose_count(), "L {l}");
        }
    }

    #[test]
    fn worker_count_does_not_change_bits() {
        for layout in LAYOUTS {
            let (jac, rhs) = problem(layout, 3, 1500, 2, 21);
            let base = ScanConfig { chunk_size: 3, workers: 1, max_sequential_segments: 2, segment_chunks: 16 };
            let one = solve_parallel_hybrid(&jac, &rhs, &base, None).unwrap();
            for workers in [2, 3, 8] {
                let cfg = ScanConfig { workers, ..base };
                assert_eq!(solve_parallel_hybrid(&jac, &rhs, &cfg, None).unwrap(), one);
                assert_eq!(
                    solve_parallel_naive(&jac, &rhs, workers, None).unwrap(),
                    solve_parallel_naive(&jac, &rhs, 1, None).unwrap()
                );
            }
        }
    }
}
