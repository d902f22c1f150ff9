//! Gradients through a Newton-solved recurrence.
//!
//! State gradients obey the linear backward recurrence
//! `∇h_{l-1} = J_lᵀ ∇h_l + ∂L/∂h_{l-1}`, solved with the same reduction as
//! the forward linear systems. Parameter and input gradients then follow
//! from each step's local derivatives, treating the converged `h` as an
//! exact fixed point.

use rayon::prelude::*;
use thiserror::Error;

use crate::cells::{Cell, CellError};
use crate::jacobians::StructuredJacobianSeq;
use crate::newton::jacobians_at;
use crate::params::ParamSet;
use crate::scan::{ScanConfig, ScanError, ScanSolver};
use crate::tensor::{Scalar, SequenceBatch};

#[derive(Debug, Error)]
pub enum BackpropError {
    #[error("non-finite gradient in {0}")]
    NonFinite(&'static str),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Scan(#[from] ScanError),
}

#[derive(Debug, Clone)]
pub struct GradientBundle<T> {
    pub d_params: ParamSet<T>,
    pub d_x: SequenceBatch<T>,
    pub d_h: SequenceBatch<T>,
}

/// Positions per block in the deterministic parameter-gradient reduction.
const BLOCK: usize = 64;

/// `∇_{h_l} L` for all positions given the direct terms `∂L/∂h_l`.
pub fn backward_states<T: Scalar>(
    cell: &dyn Cell<T>,
    h: &SequenceBatch<T>,
    drive: &SequenceBatch<T>,
    grad_out: &SequenceBatch<T>,
    solver: &ScanSolver,
) -> Result<SequenceBatch<T>, BackpropError> {
    check(cell, h, grad_out)?;
    let jac = solver.pool().install(|| jacobians_at(cell, h, drive))?;
    backward_states_with_jacobians(&jac, grad_out, solver)
}

/// [`backward_states`] with the step Jacobians at `h` already at hand
/// (see `newton_with_jacobians`).
pub fn backward_states_with_jacobians<T: Scalar>(
    jac: &StructuredJacobianSeq<T>,
    grad_out: &SequenceBatch<T>,
    solver: &ScanSolver,
) -> Result<SequenceBatch<T>, BackpropError> {
    let out = solver.backward(jac, grad_out, None)?;
    if !out.all_finite() {
        return Err(BackpropError::NonFinite("state gradients"));
    }
    Ok(out)
}

/// Reverse loop `∇h_{l-1} = J_lᵀ ∇h_l + g_{l-1}`, one position at a time.
pub fn backward_states_sequential<T: Scalar>(
    cell: &dyn Cell<T>,
    h: &SequenceBatch<T>,
    drive: &SequenceBatch<T>,
    grad_out: &SequenceBatch<T>,
) -> Result<SequenceBatch<T>, BackpropError> {
    check(cell, h, grad_out)?;
    let w = cell.state_width();
    let d = cell.jac_d();
    let s = cell.layout().structure::<T>();
    let p = s.payload_len(d);
    let (batch, len, _) = h.shape();
    let (mut j, mut jt, mut f) = (vec![T::zero(); p], vec![T::zero(); p], vec![T::zero(); w]);
    let mut out = grad_out.clone();
    for b in 0..batch {
        for l in (1..len).rev() {
            cell.step_jacobian(h.at(b, l - 1), drive.at(b, l), &mut f, &mut j);
            s.transpose(d, &j, &mut jt);
            let next = out.at(b, l).to_vec();
            s.apply_add(d, &jt, &next, out.at_mut(b, l - 1));
        }
    }
    if !out.all_finite() {
        return Err(BackpropError::NonFinite("state gradients"));
    }
    Ok(out)
}

fn check<T: Scalar>(
    cell: &dyn Cell<T>,
    h: &SequenceBatch<T>,
    g: &SequenceBatch<T>,
) -> Result<(), BackpropError> {
    if h.shape() != g.shape() || h.width() != cell.state_width() {
        return Err(BackpropError::Shape(format!(
            "states {:?}, gradients {:?}, cell state width {}",
            h.shape(),
            g.shape(),
            cell.state_width()
        )));
    }
    Ok(())
}

/// Parameter and input gradients from state gradients `∇_{h_l} L`.
pub fn backward_params<T: Scalar>(
    cell: &dyn Cell<T>,
    h: &SequenceBatch<T>,
    x: &SequenceBatch<T>,
    drive: &SequenceBatch<T>,
    state_grads: &SequenceBatch<T>,
) -> Result<GradientBundle<T>, BackpropError> {
    check(cell, h, state_grads)?;
    let w = cell.state_width();
    let (batch, len, dw) = drive.shape();
    let sp = cell.state_param_len();
    let mut d_drive = SequenceBatch::zeros(batch, len, dw).map_err(CellError::from)?;
    let zero = vec![T::zero(); w];
    let hd = h.data();
    let gd = state_grads.data();
    let partials: Vec<Vec<T>> = d_drive
        .data_mut()
        .par_chunks_mut(BLOCK * dw)
        .enumerate()
        .map(|(blk, dd)| {
            let mut acc = vec![T::zero(); sp];
            for (i, ddp) in dd.chunks_exact_mut(dw).enumerate() {
                let pos = blk * BLOCK + i;
                let hp = if pos % len == 0 { &zero[..] } else { &hd[(pos - 1) * w..pos * w] };
                cell.step_vjp(
                    hp,
                    &drive.data()[pos * dw..(pos + 1) * dw],
                    &gd[pos * w..(pos + 1) * w],
                    ddp,
                    &mut acc,
                );
            }
            acc
        })
        .collect();
    let mut d_params = cell.params().zeros_like();
    {
        let head = &mut d_params.data_mut()[..sp];
        for part in partials {
            for (o, v) in head.iter_mut().zip(part) {
                *o += v;
            }
        }
    }
    let d_x = cell.drive_backward(x, &d_drive, &mut d_params)?;
    if !d_params.all_finite() {
        return Err(BackpropError::NonFinite("parameter gradients"));
    }
    if !d_x.all_finite() {
        return Err(BackpropError::NonFinite("input gradients"));
    }
    Ok(GradientBundle { d_params, d_x, d_h: state_grads.clone() })
}

/// `backward_states` followed by `backward_params`.
pub fn backward<T: Scalar>(
    cell: &dyn Cell<T>,
    h: &SequenceBatch<T>,
    x: &SequenceBatch<T>,
    grad_out: &SequenceBatch<T>,
    cfg: &ScanConfig,
) -> Result<GradientBundle<T>, BackpropError> {
    let solver = ScanSolver::new(*cfg)?;
    let drive = cell.drive(x)?;
    let d_h = backward_states(cell, h, &drive, grad_out, &solver)?;
    solver.pool().install(|| backward_params(cell, h, x, &drive, &d_h))
}
