//! Diagonal GRU:
//!
//! ```text
//! z = σ(a_z ⊙ h + B_z x + b_z)
//! r = σ(a_r ⊙ h + B_r x + b_r)
//! c = tanh(a_c ⊙ (h ⊙ r) + B_c x + b_c)
//! h' = (1 - z) ⊙ h + z ⊙ c
//! ```

use super::{Cell, CellDims, CellError, CellInit, CellKind, GateInputs};
use crate::jacobians::Layout;
use crate::params::ParamSet;
use crate::tensor::{sigmoid, Rng, Scalar, SequenceBatch};

#[derive(Debug, Clone)]
pub struct ParaGru<T> {
    dims: CellDims,
    init: CellInit,
    params: ParamSet<T>,
    inputs: GateInputs,
}

// Parameter indices of the state vectors.
const A_Z: usize = 0;
const A_R: usize = 1;
const A_C: usize = 2;

impl<T: Scalar> ParaGru<T> {
    /// All parameters zero.
    pub fn zeros(dims: CellDims, init: CellInit) -> Result<Self, CellError> {
        dims.validate()?;
        let mut params = ParamSet::new();
        for name in ["a_z", "a_r", "a_c"] {
            params.add(name, &[dims.hidden], true)?;
        }
        let inputs = GateInputs::register(&mut params, dims, &["z", "r", "c"])?;
        Ok(ParaGru { dims, init, params, inputs })
    }

    pub fn init(dims: CellDims, init: CellInit, rng: &mut Rng) -> Result<Self, CellError> {
        let mut cell = Self::zeros(dims, init)?;
        for i in [A_Z, A_R, A_C] {
            super::init_state_vector(cell.params.at_mut(i), dims.heads, init.clip_norm, rng);
        }
        cell.inputs.init(&mut cell.params, rng);
        Ok(cell)
    }

    pub fn clip_norm(&self) -> Option<f64> {
        self.init.clip_norm
    }

    #[inline]
    fn vectors(&self) -> (&[T], &[T], &[T]) {
        (self.params.at(A_Z), self.params.at(A_R), self.params.at(A_C))
    }
}

impl<T: Scalar> Cell<T> for ParaGru<T> {
    fn kind(&self) -> CellKind {
        CellKind::ParaGru
    }
    fn layout(&self) -> Layout {
        Layout::Diagonal
    }
    fn dims(&self) -> CellDims {
        self.dims
    }
    fn drive_width(&self) -> usize {
        3 * self.dims.hidden
    }
    fn params(&self) -> &ParamSet<T> {
        &self.params
    }
    fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }
    fn state_param_len(&self) -> usize {
        3 * self.dims.hidden
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
        let d = self.dims.hidden;
        let (a_z, a_r, a_c) = self.vectors();
        let (dz, rest) = drive.split_at(d);
        let (dr, dc) = rest.split_at(d);
        for i in 0..d {
            let h = h_prev[i];
            let z = sigmoid(a_z[i] * h + dz[i]);
            let r = sigmoid(a_r[i] * h + dr[i]);
            let c = (a_c[i] * (h * r) + dc[i]).tanh();
            out[i] = (T::one() - z) * h + z * c;
        }
    }

    #[inline]
    fn step_jacobian(&self, h_prev: &[T], drive: &[T], out: &mut [T], jac: &mut [T]) {
        let d = self.dims.hidden;
        let one = T::one();
        let (a_z, a_r, a_c) = self.vectors();
        let (dz, rest) = drive.split_at(d);
        let (dr, dc) = rest.split_at(d);
        for i in 0..d {
            let h = h_prev[i];
            let z = sigmoid(a_z[i] * h + dz[i]);
            let r = sigmoid(a_r[i] * h + dr[i]);
            let c = (a_c[i] * (h * r) + dc[i]).tanh();
            out[i] = (one - z) * h + z * c;
            let sz = z * (one - z);
            let sr = r * (one - r);
            let tc = one - c * c;
            jac[i] = (one - z) + (c - h) * sz * a_z[i] + z * tc * a_c[i] * (r + h * sr * a_r[i]);
        }
    }

    fn step_vjp(&self, h_prev: &[T], drive: &[T], g: &[T], d_drive: &mut [T], d_state: &mut [T]) {
        let d = self.dims.hidden;
        let one = T::one();
        let (a_z, a_r, a_c) = self.vectors();
        let (dz, rest) = drive.split_at(d);
        let (dr, dc) = rest.split_at(d);
        let (gz, rest) = d_drive.split_at_mut(d);
        let (gr, gc) = rest.split_at_mut(d);
        let (s_z, rest) = d_state.split_at_mut(d);
        let (s_r, s_c) = rest.split_at_mut(d);
        for i in 0..d {
            let h = h_prev[i];
            let z = sigmoid(a_z[i] * h + dz[i]);
            let r = sigmoid(a_r[i] * h + dr[i]);
            let c = (a_c[i] * (h * r) + dc[i]).tanh();
            let d_zhat = g[i] * (c - h) * z * (one - z);
            let d_chat = g[i] * z * (one - c * c);
            let d_rhat = d_chat * a_c[i] * h * r * (one - r);
            gz[i] = d_zhat;
            gr[i] = d_rhat;
            gc[i] = d_chat;
            s_z[i] += d_zhat * h;
            s_r[i] += d_rhat * h;
            s_c[i] += d_chat * h * r;
        }
    }

    fn project(&mut self) {
        let heads = self.dims.heads;
        for i in [A_Z, A_R, A_C] {
            super::clip_per_head(self.params.at_mut(i), heads, self.init.clip_norm);
        }
    }

    fn clone_box(&self) -> Box<dyn Cell<T>> {
        Box::new(self.clone())
    }
}
