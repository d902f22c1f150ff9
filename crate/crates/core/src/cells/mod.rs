//! Recurrent cells: the step `f(h_{l-1}, x_l)`, its structured Jacobian and
//! the local derivatives needed by the backward pass.
//!
//! Every cell splits its work in two: an input *drive* `B x_l + b` that does
//! not depend on the state (one GEMM over all positions) and a per-position
//! state update that sees `h_{l-1}` and the drive. Heads share nothing: the
//! input matrices are block-diagonal over heads, and the state update is
//! elementwise, so a multi-head cell's Jacobian keeps the single-head
//! structure over the full width.

mod custom;
mod gru;
mod lstm;
mod ssm;

pub use custom::{fd_jacobian, CustomCell, JacobianFn, StepFn};
pub use gru::ParaGru;
pub use lstm::ParaLstm;
pub use ssm::LinearSsm;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::jacobians::{JacobianError, Layout};
use crate::params::{ParamError, ParamSet};
use crate::tensor::{gemm, Rng, Scalar, SequenceBatch, TensorError, View};

#[derive(Debug, Error)]
pub enum CellError {
    #[error("invalid cell dimensions: {0}")]
    Dims(String),
    #[error("input width {got} does not match the cell's {expected}")]
    InputWidth { expected: usize, got: usize },
    #[error("non-finite cell output at batch {batch}, position {pos}")]
    NonFinite { batch: usize, pos: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Jacobian(#[from] JacobianError),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    ParaGru,
    ParaLstm,
    Ssm,
    Custom,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::ParaGru => "paragru",
            CellKind::ParaLstm => "paralstm",
            CellKind::Ssm => "ssm",
            CellKind::Custom => "custom",
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paragru" | "gru" => Ok(CellKind::ParaGru),
            "paralstm" | "lstm" => Ok(CellKind::ParaLstm),
            "ssm" => Ok(CellKind::Ssm),
            "custom" => Ok(CellKind::Custom),
            other => Err(format!("unknown cell `{other}` (paragru, paralstm, ssm, custom)")),
        }
    }
}

/// Widths of a cell. `hidden` is the full hidden width (all heads); the
/// LSTM's state is `[c; h]`, twice that.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellDims {
    pub input: usize,
    pub hidden: usize,
    pub heads: usize,
}

impl CellDims {
    pub fn new(input: usize, hidden: usize, heads: usize) -> Self {
        CellDims { input, hidden, heads }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn head_input(&self) -> usize {
        self.input / self.heads
    }

    pub fn validate(&self) -> Result<(), CellError> {
        if self.input == 0 || self.hidden == 0 || self.heads == 0 {
            return Err(CellError::Dims(format!("{self:?} has a zero width")));
        }
        if self.hidden % self.heads != 0 || self.input % self.heads != 0 {
            return Err(CellError::Dims(format!(
                "input {} and hidden {} must both divide into {} heads",
                self.input, self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

/// Initialization and norm-clipping policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CellInit {
    /// Max L2 norm of each head's slice of every state/peephole vector;
    /// `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for CellInit {
    fn default() -> Self {
        CellInit { clip_norm: Some(0.5) }
    }
}

/// A recurrence step with a structured Jacobian.
///
/// Slices passed to the per-position methods have exactly `state_width()`
/// (states), `drive_width()` (drives) and `layout().payload_len(jac_d())`
/// (Jacobians) elements.
pub trait Cell<T: Scalar>: Send + Sync {
    fn kind(&self) -> CellKind;
    fn layout(&self) -> Layout;
    fn dims(&self) -> CellDims;
    /// `d` of the Jacobian layout.
    fn jac_d(&self) -> usize {
        self.dims().hidden
    }
    fn state_width(&self) -> usize {
        self.layout().state_width(self.jac_d())
    }
    /// Width of the part of the state exposed as output (the `h` of `[c; h]`).
    fn output_width(&self) -> usize {
        self.dims().hidden
    }
    /// Offset of the output part inside the state.
    fn output_offset(&self) -> usize {
        self.state_width() - self.output_width()
    }
    fn input_width(&self) -> usize {
        self.dims().input
    }
    fn drive_width(&self) -> usize;

    fn params(&self) -> &ParamSet<T>;
    fn params_mut(&mut self) -> &mut ParamSet<T>;
    /// Number of leading scalars in `params()` that enter the state update
    /// (state and peephole vectors); the remainder feeds the drive.
    fn state_param_len(&self) -> usize;

    /// `B x + b` for every position, `(B, L, drive_width)`.
    fn drive(&self, x: &SequenceBatch<T>) -> Result<SequenceBatch<T>, CellError>;
    /// Accumulates input-side parameter gradients into `grads` and returns
    /// `d x` given `d drive`.
    fn drive_backward(
        &self,
        x: &SequenceBatch<T>,
        d_drive: &SequenceBatch<T>,
        grads: &mut ParamSet<T>,
    ) -> Result<SequenceBatch<T>, CellError>;

    fn step(&self, h_prev: &[T], drive: &[T], out: &mut [T]);
    /// Step and Jacobian `∂f/∂h_prev` in one pass.
    fn step_jacobian(&self, h_prev: &[T], drive: &[T], out: &mut [T], jac: &mut [T]);
    /// Given `g = ∂L/∂f(h_prev, drive)`, writes `∂L/∂drive` into `d_drive`
    /// and adds this position's state-parameter gradient into `d_state`.
    fn step_vjp(&self, h_prev: &[T], drive: &[T], g: &[T], d_drive: &mut [T], d_state: &mut [T]);

    /// Post-update projection (norm clipping and range constraints).
    fn project(&mut self);

    fn clone_box(&self) -> Box<dyn Cell<T>>;
}

impl<T: Scalar> Clone for Box<dyn Cell<T>> {
    fn clone(&self) -> Self {
        self.clone_box()
    }
}

/// Builds a freshly initialized cell of the given kind. `Custom` is not
/// constructible here; see [`CustomCell`].
pub fn init_cell<T: Scalar>(
    kind: CellKind,
    dims: CellDims,
    init: CellInit,
    rng: &mut Rng,
) -> Result<Box<dyn Cell<T>>, CellError> {
    Ok(match kind {
        CellKind::ParaGru => Box::new(ParaGru::init(dims, init, rng)?),
        CellKind::ParaLstm => Box::new(ParaLstm::init(dims, init, rng)?),
        CellKind::Ssm => Box::new(LinearSsm::init(dims, init, rng)?),
        CellKind::Custom => {
            return Err(CellError::Dims("custom cells are built with CustomCell::new".into()))
        }
    })
}

/// Left-to-right unroll from `h_0 = 0`. The reference for every parallel path
/// and the inference path.
pub fn sequential_apply<T: Scalar>(
    cell: &dyn Cell<T>,
    x: &SequenceBatch<T>,
) -> Result<SequenceBatch<T>, CellError> {
    let drive = cell.drive(x)?;
    sequential_from_drive(cell, &drive)
}

pub fn sequential_from_drive<T: Scalar>(
    cell: &dyn Cell<T>,
    drive: &SequenceBatch<T>,
) -> Result<SequenceBatch<T>, CellError> {
    let w = cell.state_width();
    let (batch, len, _) = drive.shape();
    let mut h = SequenceBatch::zeros(batch, len, w)?;
    let zero = vec![T::zero(); w];
    for b in 0..batch {
        let row = h.row_mut(b);
        for l in 0..len {
            let (prev, cur) = row.split_at_mut(l * w);
            let hp = if l == 0 { &zero[..] } else { &prev[(l - 1) * w..] };
            cell.step(hp, drive.at(b, l), &mut cur[..w]);
            if cur[..w].iter().any(|v| !v.is_finite()) {
                return Err(CellError::NonFinite { batch: b, pos: l });
            }
        }
    }
    Ok(h)
}

/// Checks `x` against the cell's input width.
pub(crate) fn check_input<T: Scalar>(x: &SequenceBatch<T>, expected: usize) -> Result<(), CellError> {
    if x.width() != expected {
        return Err(CellError::InputWidth { expected, got: x.width() });
    }
    Ok(())
}

/// Block-diagonal input projection shared by the gated cells: gate `g` reads
/// `B_g` of shape `(heads, head_dim, head_input)` and bias `b_g`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct GateInputs {
    pub dims: CellDims,
    pub n_gates: usize,
    /// Index in the parameter set of the first gate's matrix; matrices and
    /// biases then alternate `B_0, b_0, B_1, b_1, ...`.
    pub first: usize,
}

impl GateInputs {
    pub fn register<T: Scalar>(
        params: &mut ParamSet<T>,
        dims: CellDims,
        gates: &[&str],
    ) -> Result<Self, CellError> {
        let first = params.specs().len();
        let (h, dh, di) = (dims.heads, dims.head_dim(), dims.head_input());
        for g in gates {
            params.add(&format!("B_{g}"), &[h, dh, di], true)?;
            params.add(&format!("b_{g}"), &[dims.hidden], false)?;
        }
        Ok(GateInputs { dims, n_gates: gates.len(), first })
    }

    pub fn width(&self) -> usize {
        self.n_gates * self.dims.hidden
    }

    /// Kaiming-uniform matrices (bound `sqrt(6 / fan_in)`), zero biases.
    pub fn init<T: Scalar>(&self, params: &mut ParamSet<T>, rng: &mut Rng) {
        let bound = (6.0 / self.dims.head_input() as f64).sqrt();
        for g in 0..self.n_gates {
            rng.fill_uniform(params.at_mut(self.first + 2 * g), -bound, bound);
            params.at_mut(self.first + 2 * g + 1).fill(T::zero());
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &SequenceBatch<T>,
    ) -> Result<SequenceBatch<T>, CellError> {
        check_input(x, self.dims.input)?;
        let (batch, len, din) = x.shape();
        let n = batch * len;
        let dw = self.width();
        let d = self.dims.hidden;
        let (dh, di) = (self.dims.head_dim(), self.dims.head_input());
        let mut out = SequenceBatch::zeros(batch, len, dw)?;
        for g in 0..self.n_gates {
            let bias = params.at(self.first + 2 * g + 1);
            for row in out.data_mut().chunks_exact_mut(dw) {
                row[g * d..(g + 1) * d].copy_from_slice(bias);
            }
            let m = params.at(self.first + 2 * g);
            for head in 0..self.dims.heads {
                gemm(
                    T::one(),
                    x.data(),
                    View::row_major(head * di, n, di, din),
                    m,
                    View::row_major(head * dh * di, dh, di, di).t(),
                    T::one(),
                    out.data_mut(),
                    View::row_major(g * d + head * dh, n, dh, dw),
                );
            }
        }
        Ok(out)
    }

    pub fn backward<T: Scalar>(
        &self,
        params: &ParamSet<T>,
        x: &SequenceBatch<T>,
        d_drive: &SequenceBatch<T>,
        grads: &mut ParamSet<T>,
    ) -> Result<SequenceBatch<T>, CellError> {
        let (batch, len, din) = x.shape();
        let n = batch * len;
        let dw = self.width();
        let d = self.dims.hidden;
        let (dh, di) = (self.dims.head_dim(), self.dims.head_input());
        let mut dx = SequenceBatch::zeros(batch, len, din)?;
        for g in 0..self.n_gates {
            let m = params.at(self.first + 2 * g);
            for head in 0..self.dims.heads {
                let dd = View::row_major(g * d + head * dh, n, dh, dw);
                // dB = ddᵀ x
                gemm(
                    T::one(),
                    d_drive.data(),
                    dd.t(),
                    x.data(),
                    View::row_major(head * di, n, di, din),
                    T::one(),
                    grads.at_mut(self.first + 2 * g),
                    View::row_major(head * dh * di, dh, di, di),
                );
                // dx += dd B
                gemm(
                    T::one(),
                    d_drive.data(),
                    dd,
                    m,
                    View::row_major(head * dh * di, dh, di, di),
                    T::one(),
                    dx.data_mut(),
                    View::row_major(head * di, n, di, din),
                );
            }
            let db = grads.at_mut(self.first + 2 * g + 1);
            column_sums_into(d_drive.data(), dw, g * d, d, db);
        }
        Ok(dx)
    }
}

/// `out[j] += Σ_rows data[row * stride + start + j]`, summed in a fixed
/// blocked order so the result does not depend on thread scheduling.
pub(crate) fn column_sums_into<T: Scalar>(
    data: &[T],
    stride: usize,
    start: usize,
    width: usize,
    out: &mut [T],
) {
    const BLOCK: usize = 64;
    let rows = data.len() / stride;
    let partials: Vec<Vec<T>> = (0..rows.div_ceil(BLOCK))
        .into_par_iter()
        .map(|blk| {
            let mut acc = vec![T::zero(); width];
            for r in blk * BLOCK..((blk + 1) * BLOCK).min(rows) {
                let row = &data[r * stride + start..r * stride + start + width];
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            acc
        })
        .collect();
    for p in partials {
        for (o, v) in out.iter_mut().zip(p) {
            *o += v;
        }
    }
}

/// Xavier-Gaussian fill (`std = 1/sqrt(head_dim)`, i.e. fan-in = fan-out =
/// head_dim) followed by per-head clipping.
pub(crate) fn init_state_vector<T: Scalar>(
    v: &mut [T],
    heads: usize,
    clip: Option<f64>,
    rng: &mut Rng,
) {
    let dh = v.len() / heads;
    rng.fill_normal(v, 1.0 / (dh as f64).sqrt());
    clip_per_head(v, heads, clip);
}

/// Rescales each head's slice whose L2 norm exceeds `clip`.
pub fn clip_per_head<T: Scalar>(v: &mut [T], heads: usize, clip: Option<f64>) {
    let Some(clip) = clip else { return };
    let dh = v.len() / heads;
    for chunk in v.chunks_exact_mut(dh) {
        let norm = chunk.iter().map(|x| x.to_f64_lossy().powi(2)).sum::<f64>().sqrt();
        if norm > clip {
            let s = T::lit(clip / norm);
            for x in chunk.iter_mut() {
                *x *= s;
            }
        }
    }
}
