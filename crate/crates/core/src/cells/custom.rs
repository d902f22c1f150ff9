//! Adapter for user-supplied step functions. Without an analytic Jacobian the
//! cell falls back to central finite differences and the dense scan path.

use std::sync::Arc;

use super::{Cell, CellDims, CellError, CellKind};
use crate::jacobians::{JacobianEntry, Layout, DENSE_MAX_WIDTH};
use crate::params::ParamSet;
use crate::tensor::{Scalar, SequenceBatch};

/// `step(h_prev, x, out)`.
pub type StepFn<T> = Arc<dyn Fn(&[T], &[T], &mut [T]) + Send + Sync>;
/// `jac(h_prev, x, out)`, `out` row-major `width x width`.
pub type JacobianFn<T> = Arc<dyn Fn(&[T], &[T], &mut [T]) + Send + Sync>;

/// A cell defined by closures. The input is fed to the step unchanged (no
/// learnable input projection) and the cell has no trainable parameters.
#[derive(Clone)]
pub struct CustomCell<T> {
    width: usize,
    input: usize,
    step: StepFn<T>,
    jac: Option<JacobianFn<T>>,
    params: ParamSet<T>,
}

impl<T> std::fmt::Debug for CustomCell<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CustomCell")
            .field("width", &self.width)
            .field("input", &self.input)
            .field("analytic_jacobian", &self.jac.is_some())
            .finish()
    }
}

impl<T: Scalar> CustomCell<T> {
    pub fn new(width: usize, input: usize, step: StepFn<T>) -> Result<Self, CellError> {
        if width == 0 || input == 0 {
            return Err(CellError::Dims("custom cell widths must be >= 1".into()));
        }
        if width > DENSE_MAX_WIDTH {
            return Err(CellError::Dims(format!(
                "custom cell width {width} exceeds the dense limit {DENSE_MAX_WIDTH}"
            )));
        }
        Ok(CustomCell { width, input, step, jac: None, params: ParamSet::new() })
    }

    /// Replaces the finite-difference Jacobian.
    pub fn with_jacobian(mut self, jac: JacobianFn<T>) -> Self {
        self.jac = Some(jac);
        self
    }

    pub fn has_analytic_jacobian(&self) -> bool {
        self.jac.is_some()
    }
}

/// Default step for [`fd_jacobian`]: `cbrt(eps) * max(1, |h|_inf)`.
pub fn default_fd_step<T: Scalar>(h: &[T]) -> T {
    let scale = h.iter().fold(T::one(), |m, v| m.max(v.abs()));
    T::epsilon().cbrt() * scale
}

/// Dense `∂step/∂h` at `(h_prev, x)` by central differences, one column per
/// state feature.
pub fn fd_jacobian<T: Scalar>(
    step: &dyn Fn(&[T], &[T], &mut [T]),
    h_prev: &[T],
    x: &[T],
    eps: Option<T>,
) -> Result<JacobianEntry<T>, CellError> {
    let n = h_prev.len();
    let mut out = vec![T::zero(); n * n];
    fd_columns(step, h_prev, x, eps.unwrap_or_else(|| default_fd_step(h_prev)), &mut out);
    if out.iter().any(|v| !v.is_finite()) {
        return Err(CellError::NonFinite { batch: 0, pos: 0 });
    }
    Ok(JacobianEntry::new(Layout::Dense, n, out)?)
}

fn fd_columns<T: Scalar>(
    step: &dyn Fn(&[T], &[T], &mut [T]),
    h_prev: &[T],
    x: &[T],
    eps: T,
    out: &mut [T],
) {
    let n = h_prev.len();
    let mut hp = h_prev.to_vec();
    let (mut fp, mut fm) = (vec![T::zero(); n], vec![T::zero(); n]);
    let two_eps = eps + eps;
    for j in 0..n {
        hp[j] = h_prev[j] + eps;
        step(&hp, x, &mut fp);
        hp[j] = h_prev[j] - eps;
        step(&hp, x, &mut fm);
        hp[j] = h_prev[j];
        for i in 0..n {
            out[i * n + j] = (fp[i] - fm[i]) / two_eps;
        }
    }
}

impl<T: Scalar> Cell<T> for CustomCell<T> {
    fn kind(&self) -> CellKind {
        CellKind::Custom
    }
    fn layout(&self) -> Layout {
        Layout::Dense
    }
    fn dims(&self) -> CellDims {
        CellDims::new(self.input, self.width, 1)
    }
    fn drive_width(&self) -> usize {
        self.input
    }
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
    fn state_param_len(&self) -> usize {
        0
    }

    fn drive(&self, x: &SequenceBatch<T>) -> Result<SequenceBatch<T>, CellError> {
        super::check_input(x, self.input)?;
        Ok(x.clone())
    }

    fn drive_backward(
        &self,
        _x: &SequenceBatch<T>,
        d_drive: &SequenceBatch<T>,
        _grads: &mut ParamSet<T>,
    ) -> Result<SequenceBatch<T>, CellError> {
        Ok(d_drive.clone())
    }

    fn step(&self, h_prev: &[T], drive: &[T], out: &mut [T]) {
        (self.step)(h_prev, drive, out)
    }

    fn step_jacobian(&self, h_prev: &[T], drive: &[T], out: &mut [T], jac: &mut [T]) {
        (self.step)(h_prev, drive, out);
        match &self.jac {
            Some(j) => j(h_prev, drive, jac),
            None => fd_columns(&*self.step, h_prev, drive, default_fd_step(h_prev), jac),
        }
    }

    /// Finite differences with respect to the input.
    fn step_vjp(&self, h_prev: &[T], drive: &[T], g: &[T], d_drive: &mut [T], _d_state: &mut [T]) {
        let eps = default_fd_step(drive);
        let two_eps = eps + eps;
        let mut xp = drive.to_vec();
        let (mut fp, mut fm) = (vec![T::zero(); self.width], vec![T::zero(); self.width]);
        for j in 0..self.input {
            xp[j] = drive[j] + eps;
            (self.step)(h_prev, &xp, &mut fp);
            xp[j] = drive[j] - eps;
            (self.step)(h_prev, &xp, &mut fm);
            xp[j] = drive[j];
            d_drive[j] = g.iter().zip(fp.iter().zip(&fm)).map(|(&gi, (&a, &b))| gi * (a - b)).sum::<T>()
                / two_eps;
        }
    }

    fn project(&mut self) {}

    fn clone_box(&self) -> Box<dyn Cell<T>> {
        Box::new(self.clone())
    }
}
