//! Diagonal linear recurrence `h' = a ⊙ h + B x + b`. Its Jacobian `diag(a)`
//! does not depend on the state, so a single Newton step is exact.

use super::{Cell, CellDims, CellError, CellInit, CellKind, GateInputs};
use crate::jacobians::Layout;
use crate::params::ParamSet;
use crate::tensor::{Rng, Scalar, SequenceBatch};

#[derive(Debug, Clone)]
pub struct LinearSsm<T> {
    dims: CellDims,
    init: CellInit,
    params: ParamSet<T>,
    inputs: GateInputs,
}

impl<T: Scalar> LinearSsm<T> {
    pub fn zeros(dims: CellDims, init: CellInit) -> Result<Self, CellError> {
        dims.validate()?;
        let mut params = ParamSet::new();
        params.add("a", &[dims.hidden], true)?;
        let inputs = GateInputs::register(&mut params, dims, &["x"])?;
        Ok(LinearSsm { dims, init, params, inputs })
    }

    pub fn init(dims: CellDims, init: CellInit, rng: &mut Rng) -> Result<Self, CellError> {
        let mut cell = Self::zeros(dims, init)?;
        super::init_state_vector(cell.params.at_mut(0), dims.heads, init.clip_norm, rng);
        cell.inputs.init(&mut cell.params, rng);
        cell.project();
        Ok(cell)
    }
}

impl<T: Scalar> Cell<T> for LinearSsm<T> {
    fn kind(&self) -> CellKind {
        CellKind::Ssm
    }
    fn layout(&self) -> Layout {
        Layout::Diagonal
    }
    fn dims(&self) -> CellDims {
        self.dims
    }
    fn drive_width(&self) -> usize {
        self.dims.hidden
    }
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
    fn state_param_len(&self) -> usize {
        self.dims.hidden
    }

    fn drive(&self, x: &SequenceBatch<T>) -> Result<SequenceBatch<T>, CellError> {
        self.inputs.forward(&self.params, x)
    }

    fn drive_backward(
        &self,
        x: &SequenceBatch<T>,
        d_drive: &SequenceBatch<T>,
        grads: &mut ParamSet<T>,
    ) -> Result<SequenceBatch<T>, CellError> {
        self.inputs.backward(&self.params, x, d_drive, grads)
    }

    #[inline]
    fn step(&self, h_prev: &[T], drive: &[T], out: &mut [T]) {
        for ((o, (&a, &h)), &u) in out.iter_mut().zip(self.params.at(0).iter().zip(h_prev)).zip(drive) {
            *o = a * h + u;
        }
    }

    #[inline]
    fn step_jacobian(&self, h_prev: &[T], drive: &[T], out: &mut [T], jac: &mut [T]) {
        self.step(h_prev, drive, out);
        jac.copy_from_slice(self.params.at(0));
    }

    fn step_vjp(&self, h_prev: &[T], _drive: &[T], g: &[T], d_drive: &mut [T], d_state: &mut [T]) {
        d_drive.copy_from_slice(g);
        for ((s, &gi), &h) in d_state.iter_mut().zip(g).zip(h_prev) {
            *s += gi * h;
        }
    }

    /// Per-head clipping, then `a` is kept inside `[-1, 1]` so the
    /// recurrence cannot blow up.
    fn project(&mut self) {
        let a = self.params.at_mut(0);
        super::clip_per_head(a, self.dims.heads, self.init.clip_norm);
        for v in a.iter_mut() {
            *v = v.max(-T::one()).min(T::one());
        }
    }

    fn clone_box(&self) -> Box<dyn Cell<T>> {
        Box::new(self.clone())
    }
}
