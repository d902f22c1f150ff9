//! Newton's method on the stacked system `h_l - f(h_{l-1}, x_l) = 0`,
//! `l = 0..L-1`, `h_{-1} = 0`.
//!
//! Each iteration evaluates residuals `r_l = f(h_{l-1}, x_l) - h_l` and step
//! Jacobians in one pass over all positions, solves the block bi-diagonal
//! system `δh_l = J_l δh_{l-1} + r_l` with the hybrid scan, and updates
//! `h += δh`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cells::{Cell, CellError};
use crate::jacobians::StructuredJacobianSeq;
use crate::scan::{ScanConfig, ScanError, ScanSolver, StepCounter};
use crate::tensor::{nan_max, DType, Scalar, SequenceBatch};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NewtonConfig {
    pub n_its: usize,
    /// Inf-norm residual tolerance.
    pub tol: f64,
    pub early_stop: bool,
    pub scan: ScanConfig,
}

impl NewtonConfig {
    pub fn default_tol(dtype: DType) -> f64 {
        match dtype {
            DType::F32 => 1e-6,
            DType::F64 => 1e-12,
        }
    }

    /// Fixed three iterations, no early stop.
    pub fn training(dtype: DType) -> Self {
        NewtonConfig {
            n_its: 3,
            tol: Self::default_tol(dtype),
            early_stop: false,
            scan: ScanConfig::default(),
        }
    }

    pub fn verify(dtype: DType) -> Self {
        NewtonConfig { early_stop: true, ..Self::training(dtype) }
    }

    pub fn validate(&self) -> Result<(), NewtonError> {
        if self.n_its == 0 {
            return Err(NewtonError::Config("n_its must be >= 1".into()));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(NewtonError::Config("tol must be > 0".into()));
        }
        self.scan.validate()?;
        Ok(())
    }
}

impl Default for NewtonConfig {
    fn default() -> Self {
        Self::training(DType::F64)
    }
}

/// Inf-norm residual before the first update and after every update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NewtonTrace {
    pub residual_per_iter: Vec<f64>,
    pub iterations_run: usize,
}

impl NewtonTrace {
    pub fn final_residual(&self) -> f64 {
        *self.residual_per_iter.last().unwrap_or(&f64::NAN)
    }

    pub fn converged(&self, tol: f64) -> bool {
        self.final_residual() < tol
    }

    /// One `{"iteration": k, "residual": r}` object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (k, r) in self.residual_per_iter.iter().enumerate() {
            let line = serde_json::json!({ "iteration": k, "residual": r });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Error)]
pub enum NewtonError {
    #[error("Newton iteration diverged (residuals {:?})", .trace.residual_per_iter)]
    Diverged { trace: NewtonTrace },
    #[error("invalid Newton config: {0}")]
    Config(String),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Scan(#[from] ScanError),
}

/// Positions per rayon task in the per-position passes.
const MIN_POSITIONS: usize = 64;

/// `h_l = f(0, x_l)` for every position independently.
pub fn initial_guess<T: Scalar>(
    cell: &dyn Cell<T>,
    drive: &SequenceBatch<T>,
) -> Result<SequenceBatch<T>, CellError> {
    let w = cell.state_width();
    let (batch, len, dw) = drive.shape();
    let mut h = SequenceBatch::zeros(batch, len, w)?;
    let zero = vec![T::zero(); w];
    h.data_mut()
        .par_chunks_mut(w)
        .zip(drive.data().par_chunks(dw))
        .with_min_len(MIN_POSITIONS)
        .for_each(|(out, d)| cell.step(&zero, d, out));
    if let Some(i) = h.data().iter().position(|v| !v.is_finite()) {
        let pos = i / w;
        return Err(CellError::NonFinite { batch: pos / len, pos: pos % len });
    }
    Ok(h)
}

/// `max |h_l - f(h_{l-1}, x_l)|` over batch, positions and features.
pub fn residual_norm<T: Scalar>(
    cell: &dyn Cell<T>,
    h: &SequenceBatch<T>,
    x: &SequenceBatch<T>,
) -> Result<T, CellError> {
    let drive = cell.drive(x)?;
    Ok(residual_from_drive(cell, h, &drive))
}

pub fn residual_from_drive<T: Scalar>(
    cell: &dyn Cell<T>,
    h: &SequenceBatch<T>,
    drive: &SequenceBatch<T>,
) -> T {
    let w = cell.state_width();
    let (_, len, dw) = drive.shape();
    let hd = h.data();
    let zero = vec![T::zero(); w];
    (0..hd.len() / w)
        .into_par_iter()
        .with_min_len(MIN_POSITIONS)
        .map_init(
            || vec![T::zero(); w],
            |f, p| {
                let hp = if p % len == 0 { &zero[..] } else { &hd[(p - 1) * w..p * w] };
                cell.step(hp, &drive.data()[p * dw..(p + 1) * dw], f);
                f.iter()
                    .zip(&hd[p * w..(p + 1) * w])
                    .fold(T::zero(), |m, (&a, &b)| nan_max(m, (a - b).abs()))
            },
        )
        .reduce(T::zero, nan_max)
}

/// Fused pass: `r_l = f(h_{l-1}, x_l) - h_l` and `J_l` at `h_{l-1}`.
/// Returns the inf-norm of `r`.
fn linearize<T: Scalar>(
    cell: &dyn Cell<T>,
    h: &SequenceBatch<T>,
    drive: &SequenceBatch<T>,
    r: &mut SequenceBatch<T>,
    jac: &mut StructuredJacobianSeq<T>,
) -> T {
    let w = cell.state_width();
    let p = jac.payload_len();
    let (_, len, dw) = drive.shape();
    let hd = h.data();
    let zero = vec![T::zero(); w];
    r.data_mut()
        .par_chunks_mut(w)
        .zip(jac.data_mut().par_chunks_mut(p))
        .enumerate()
        .with_min_len(MIN_POSITIONS)
        .map(|(pos, (rp, jp))| {
            let hp = if pos % len == 0 { &zero[..] } else { &hd[(pos - 1) * w..pos * w] };
            cell.step_jacobian(hp, &drive.data()[pos * dw..(pos + 1) * dw], rp, jp);
            let mut m = T::zero();
            for (rv, &hv) in rp.iter_mut().zip(&hd[pos * w..(pos + 1) * w]) {
                *rv -= hv;
                m = nan_max(m, rv.abs());
            }
            m
        })
        .reduce(T::zero, nan_max)
}

/// Step Jacobians at `h_{l-1}` for every position (the backward pass needs
/// them at the converged states).
pub fn jacobians_at<T: Scalar>(
    cell: &dyn Cell<T>,
    h: &SequenceBatch<T>,
    drive: &SequenceBatch<T>,
) -> Result<StructuredJacobianSeq<T>, CellError> {
    let w = cell.state_width();
    let (batch, len, dw) = drive.shape();
    let mut jac = StructuredJacobianSeq::zeros(cell.layout(), batch, len, cell.jac_d())?;
    let p = jac.payload_len();
    let hd = h.data();
    let zero = vec![T::zero(); w];
    jac.data_mut()
        .par_chunks_mut(p)
        .enumerate()
        .with_min_len(MIN_POSITIONS)
        .for_each_init(
            || vec![T::zero(); w],
            |f, (pos, jp)| {
                let hp = if pos % len == 0 { &zero[..] } else { &hd[(pos - 1) * w..pos * w] };
                cell.step_jacobian(hp, &drive.data()[pos * dw..(pos + 1) * dw], f, jp);
            },
        );
    Ok(jac)
}

/// Newton solve from inputs `x`.
pub fn newton_forward<T: Scalar>(
    cell: &dyn Cell<T>,
    x: &SequenceBatch<T>,
    cfg: &NewtonConfig,
) -> Result<(SequenceBatch<T>, NewtonTrace), NewtonError> {
    let drive = cell.drive(x)?;
    let solver = ScanSolver::new(cfg.scan)?;
    newton_from_drive(cell, &drive, cfg, &solver, None)
}

/// Newton solve from a precomputed drive (`Cell::drive`).
pub fn newton_from_drive<T: Scalar>(
    cell: &dyn Cell<T>,
    drive: &SequenceBatch<T>,
    cfg: &NewtonConfig,
    solver: &ScanSolver,
    counter: Option<&StepCounter>,
) -> Result<(SequenceBatch<T>, NewtonTrace), NewtonError> {
    let (h, trace, _) = solve(cell, drive, cfg, solver, counter, false)?;
    Ok((h, trace))
}

/// As [`newton_from_drive`], also returning the step Jacobians at the final
/// iterate (what the backward pass linearizes around). They come out of the
/// pass that evaluates the final residual.
pub fn newton_with_jacobians<T: Scalar>(
    cell: &dyn Cell<T>,
    drive: &SequenceBatch<T>,
    cfg: &NewtonConfig,
    solver: &ScanSolver,
    counter: Option<&StepCounter>,
) -> Result<(SequenceBatch<T>, NewtonTrace, StructuredJacobianSeq<T>), NewtonError> {
    solve(cell, drive, cfg, solver, counter, true)
}

fn solve<T: Scalar>(
    cell: &dyn Cell<T>,
    drive: &SequenceBatch<T>,
    cfg: &NewtonConfig,
    solver: &ScanSolver,
    counter: Option<&StepCounter>,
    final_jacobians: bool,
) -> Result<(SequenceBatch<T>, NewtonTrace, StructuredJacobianSeq<T>), NewtonError> {
    cfg.validate()?;
    let (batch, len, _) = drive.shape();
    let run = || {
        let mut trace = NewtonTrace::default();
        let mut h = initial_guess(cell, drive)?;
        let mut r = SequenceBatch::zeros(batch, len, cell.state_width()).map_err(CellError::from)?;
        let mut jac = StructuredJacobianSeq::zeros(cell.layout(), batch, len, cell.jac_d())
            .map_err(CellError::from)?;
        let s = cell.layout().structure::<T>();
        for k in 0..cfg.n_its {
            let norm = linearize(cell, &h, drive, &mut r, &mut jac).to_f64_lossy();
            trace.residual_per_iter.push(norm);
            if !norm.is_finite() {
                return Err(NewtonError::Diverged { trace });
            }
            if cfg.early_stop && norm < cfg.tol {
                return Ok((h, trace, jac));
            }
            solver.hybrid_raw(s, cell.jac_d(), len, jac.data(), r.data_mut(), counter);
            for (hv, &dv) in h.data_mut().iter_mut().zip(r.data()) {
                *hv += dv;
            }
            trace.iterations_run = k + 1;
        }
        let norm = if final_jacobians {
            linearize(cell, &h, drive, &mut r, &mut jac)
        } else {
            residual_from_drive(cell, &h, drive)
        }
        .to_f64_lossy();
        trace.residual_per_iter.push(norm);
        if !norm.is_finite() {
            return Err(NewtonError::Diverged { trace });
        }
        Ok((h, trace, jac))
    };
    solver.pool().install(run)
}
