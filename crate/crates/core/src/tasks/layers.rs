//! Row-wise layers of the task models with hand-written backward passes.
//!
//! Activations are flat row-major buffers with one row per `(b, l)` position.
//! Backward functions accumulate (`+=`) into parameter and input gradients.

use crate::tensor::{gemm, silu, silu_prime, Scalar, View};

pub const RMS_EPS: f64 = 1e-6;

/// `y = x / sqrt(mean(x²) + eps) ⊙ scale` per row; stores `1/rms` per row.
pub fn rmsnorm_forward<T: Scalar>(x: &[T], width: usize, scale: &[T], y: &mut [T], inv: &mut [T]) {
    let eps = T::lit(RMS_EPS);
    let n = T::lit(width as f64);
    for ((xr, yr), r) in x.chunks_exact(width).zip(y.chunks_exact_mut(width)).zip(inv.iter_mut()) {
        let ms = xr.iter().map(|&v| v * v).sum::<T>() / n;
        *r = T::one() / (ms + eps).sqrt();
        for ((o, &v), &s) in yr.iter_mut().zip(xr).zip(scale) {
            *o = v * *r * s;
        }
    }
}

pub fn rmsnorm_backward<T: Scalar>(
    x: &[T],
    width: usize,
    scale: &[T],
    inv: &[T],
    dy: &[T],
    dx: &mut [T],
    dscale: &mut [T],
) {
    let n = T::lit(width as f64);
    for (((xr, dyr), dxr), &r) in
        x.chunks_exact(width).zip(dy.chunks_exact(width)).zip(dx.chunks_exact_mut(width)).zip(inv)
    {
        let mut dot = T::zero();
        for i in 0..width {
            dot += dyr[i] * scale[i] * xr[i];
            dscale[i] += dyr[i] * xr[i] * r;
        }
        let k = r * r * r * dot / n;
        for i in 0..width {
            dxr[i] += r * scale[i] * dyr[i] - k * xr[i];
        }
    }
}

/// `y = x Wᵀ + b` with `W` of shape `(out, in)`.
pub fn linear_forward<T: Scalar>(
    x: &[T],
    rows: usize,
    w: &[T],
    bias: Option<&[T]>,
    out_w: usize,
    in_w: usize,
    y: &mut [T],
) {
    gemm(
        T::one(),
        x,
        View::row_major(0, rows, in_w, in_w),
        w,
        View::row_major(0, out_w, in_w, in_w).t(),
        T::zero(),
        y,
        View::row_major(0, rows, out_w, out_w),
    );
    if let Some(b) = bias {
        for yr in y.chunks_exact_mut(out_w) {
            for (o, &v) in yr.iter_mut().zip(b) {
                *o += v;
            }
        }
    }
}

/// Accumulates `dW += dyᵀ x`, `db += Σ dy` and, if given, `dx += dy W`.
#[allow(clippy::too_many_arguments)]
pub fn linear_backward<T: Scalar>(
    x: &[T],
    rows: usize,
    w: &[T],
    out_w: usize,
    in_w: usize,
    dy: &[T],
    dx: Option<&mut [T]>,
    dw: &mut [T],
    db: Option<&mut [T]>,
) {
    gemm(
        T::one(),
        dy,
        View::row_major(0, rows, out_w, out_w).t(),
        x,
        View::row_major(0, rows, in_w, in_w),
        T::one(),
        dw,
        View::row_major(0, out_w, in_w, in_w),
    );
    if let Some(db) = db {
        for dyr in dy.chunks_exact(out_w) {
            for (o, &v) in db.iter_mut().zip(dyr) {
                *o += v;
            }
        }
    }
    if let Some(dx) = dx {
        gemm(
            T::one(),
            dy,
            View::row_major(0, rows, out_w, out_w),
            w,
            View::row_major(0, out_w, in_w, in_w),
            T::one(),
            dx,
            View::row_major(0, rows, in_w, in_w),
        );
    }
}

/// Depthwise causal convolution followed by SiLU:
/// `q[l, c] = b[c] + Σ_k w[c, k] x[l - k, c]`, `y = silu(q)`. Positions before
/// the start of each sequence read zeros.
#[allow(clippy::too_many_arguments)]
pub fn causal_conv_forward<T: Scalar>(
    x: &[T],
    batch: usize,
    len: usize,
    ch: usize,
    w: &[T],
    b: &[T],
    kernel: usize,
    q: &mut [T],
    y: &mut [T],
) {
    for bi in 0..batch {
        for l in 0..len {
            let o = (bi * len + l) * ch;
            for c in 0..ch {
                let mut s = b[c];
                for k in 0..kernel.min(l + 1) {
                    s += w[c * kernel + k] * x[o - k * ch + c];
                }
                q[o + c] = s;
                y[o + c] = silu(s);
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn causal_conv_backward<T: Scalar>(
    x: &[T],
    batch: usize,
    len: usize,
    ch: usize,
    w: &[T],
    kernel: usize,
    q: &[T],
    dy: &[T],
    dx: &mut [T],
    dw: &mut [T],
    db: &mut [T],
) {
    for bi in 0..batch {
        for l in 0..len {
            let o = (bi * len + l) * ch;
            for c in 0..ch {
                let dq = dy[o + c] * silu_prime(q[o + c]);
                db[c] += dq;
                for k in 0..kernel.min(l + 1) {
                    dw[c * kernel + k] += dq * x[o - k * ch + c];
                    dx[o - k * ch + c] += dq * w[c * kernel + k];
                }
            }
        }
    }
}

/// Sinusoidal encoding: `sin(l / 10000^(2i/d))` at even features, `cos` at
/// odd ones.
pub fn positional_encoding<T: Scalar>(len: usize, width: usize) -> Vec<T> {
    let mut pe = vec![T::zero(); len * width];
    for l in 0..len {
        for i in 0..width {
            let freq = 10000f64.powf(-((i / 2 * 2) as f64) / width as f64);
            let a = l as f64 * freq;
            pe[l * width + i] = T::lit(if i % 2 == 0 { a.sin() } else { a.cos() });
        }
    }
    pe
}

/// Mean softmax cross-entropy over masked rows. Returns the loss and writes
/// `∂loss/∂logits` into `dlogits` (zero on unmasked rows).
pub fn cross_entropy<T: Scalar>(
    logits: &[T],
    vocab: usize,
    targets: &[u32],
    mask: &[bool],
    dlogits: &mut [T],
) -> f64 {
    let count = mask.iter().filter(|&&m| m).count();
    dlogits.iter_mut().for_each(|v| *v = T::zero());
    if count == 0 {
        return 0.0;
    }
    let inv = T::lit(1.0 / count as f64);
    let mut loss = 0.0;
    for (i, (row, drow)) in logits.chunks_exact(vocab).zip(dlogits.chunks_exact_mut(vocab)).enumerate() {
        if !mask[i] {
            continue;
        }
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut z = T::zero();
        for (d, &v) in drow.iter_mut().zip(row) {
            *d = (v - m).exp();
            z += *d;
        }
        let t = targets[i] as usize;
        loss += (z.ln() + m - row[t]).to_f64_lossy();
        for d in drow.iter_mut() {
            *d = *d / z * inv;
        }
        drow[t] -= inv;
    }
    loss / count as f64
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
