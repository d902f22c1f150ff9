//! Diagonal peephole LSTM with coupled input/forget gates, state `[c; h]`:
//!
//! ```text
//! f = σ(a_f ⊙ h + B_f x + c_f ⊙ c_prev + b_f)
//! z = tanh(a_z ⊙ h + B_z x + b_z)
//! c = f ⊙ c_prev + (1 - f) ⊙ z
//! o = σ(a_o ⊙ h + B_o x + c_o ⊙ c + b_o)      (peephole on the new c)
//! h' = o ⊙ tanh(c)
//! ```
//!
//! The Jacobian is 2x2 block-diagonal, blocks stored as `(J_cc, J_ch, J_hc, J_hh)`.

use super::{Cell, CellDims, CellError, CellInit, CellKind, GateInputs};
use crate::jacobians::Layout;
use crate::params::ParamSet;
use crate::tensor::{sigmoid, Rng, Scalar, SequenceBatch};

#[derive(Debug, Clone)]
pub struct ParaLstm<T> {
    dims: CellDims,
    init: CellInit,
    params: ParamSet<T>,
    inputs: GateInputs,
}

const A_F: usize = 0;
const A_Z: usize = 1;
const A_O: usize = 2;
const C_F: usize = 3;
const C_O: usize = 4;

/// Gate values at one feature.
struct Gates<T> {
    f: T,
    z: T,
    c: T,
    o: T,
    tc: T,
}

impl<T: Scalar> ParaLstm<T> {
    pub fn zeros(dims: CellDims, init: CellInit) -> Result<Self, CellError> {
        dims.validate()?;
        let mut params = ParamSet::new();
        for name in ["a_f", "a_z", "a_o", "c_f", "c_o"] {
            params.add(name, &[dims.hidden], true)?;
        }
        let inputs = GateInputs::register(&mut params, dims, &["f", "z", "o"])?;
        Ok(ParaLstm { dims, init, params, inputs })
    }

    pub fn init(dims: CellDims, init: CellInit, rng: &mut Rng) -> Result<Self, CellError> {
        let mut cell = Self::zeros(dims, init)?;
        for i in [A_F, A_Z, A_O, C_F, C_O] {
            super::init_state_vector(cell.params.at_mut(i), dims.heads, init.clip_norm, rng);
        }
        cell.inputs.init(&mut cell.params, rng);
        Ok(cell)
    }

    #[inline]
    fn gates(&self, i: usize, c_prev: T, h: T, df: T, dz: T, dout: T) -> Gates<T> {
        let p = &self.params;
        let f = sigmoid(p.at(A_F)[i] * h + df + p.at(C_F)[i] * c_prev);
        let z = (p.at(A_Z)[i] * h + dz).tanh();
        let c = f * c_prev + (T::one() - f) * z;
        let o = sigmoid(p.at(A_O)[i] * h + dout + p.at(C_O)[i] * c);
        Gates { f, z, c, o, tc: c.tanh() }
    }
}

impl<T: Scalar> Cell<T> for ParaLstm<T> {
    fn kind(&self) -> CellKind {
        CellKind::ParaLstm
    }
    fn layout(&self) -> Layout {
        Layout::BlockDiag2x2
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
        5 * self.dims.hidden
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
    fn step(&self, s_prev: &[T], drive: &[T], out: &mut [T]) {
        let d = self.dims.hidden;
        for i in 0..d {
            let g = self.gates(i, s_prev[i], s_prev[d + i], drive[i], drive[d + i], drive[2 * d + i]);
            out[i] = g.c;
            out[d + i] = g.o * g.tc;
        }
    }

    #[inline]
    fn step_jacobian(&self, s_prev: &[T], drive: &[T], out: &mut [T], jac: &mut [T]) {
        let d = self.dims.hidden;
        let one = T::one();
        let p = &self.params;
        let (a_f, a_z, a_o, c_f, c_o) = (p.at(A_F), p.at(A_Z), p.at(A_O), p.at(C_F), p.at(C_O));
        for i in 0..d {
            let c_prev = s_prev[i];
            let g = self.gates(i, c_prev, s_prev[d + i], drive[i], drive[d + i], drive[2 * d + i]);
            out[i] = g.c;
            out[d + i] = g.o * g.tc;
            let sf = g.f * (one - g.f);
            let so = g.o * (one - g.o);
            let j_cc = g.f + (c_prev - g.z) * sf * c_f[i];
            let j_ch = (c_prev - g.z) * sf * a_f[i] + (one - g.f) * (one - g.z * g.z) * a_z[i];
            let via_c = g.tc * so * c_o[i] + g.o * (one - g.tc * g.tc);
            jac[i] = j_cc;
            jac[d + i] = j_ch;
            jac[2 * d + i] = via_c * j_cc;
            jac[3 * d + i] = g.tc * so * a_o[i] + via_c * j_ch;
        }
    }

    fn step_vjp(&self, s_prev: &[T], drive: &[T], gout: &[T], d_drive: &mut [T], d_state: &mut [T]) {
        let d = self.dims.hidden;
        let one = T::one();
        let p = &self.params;
        let c_o = p.at(C_O);
        for i in 0..d {
            let (c_prev, h) = (s_prev[i], s_prev[d + i]);
            let g = self.gates(i, c_prev, h, drive[i], drive[d + i], drive[2 * d + i]);
            let (gc, gh) = (gout[i], gout[d + i]);
            let d_ohat = gh * g.tc * g.o * (one - g.o);
            let dc = gc + gh * g.o * (one - g.tc * g.tc) + d_ohat * c_o[i];
            let d_fhat = dc * (c_prev - g.z) * g.f * (one - g.f);
            let d_zhat = dc * (one - g.f) * (one - g.z * g.z);
            d_drive[i] = d_fhat;
            d_drive[d + i] = d_zhat;
            d_drive[2 * d + i] = d_ohat;
            d_state[A_F * d + i] += d_fhat * h;
            d_state[A_Z * d + i] += d_zhat * h;
            d_state[A_O * d + i] += d_ohat * h;
            d_state[C_F * d + i] += d_fhat * c_prev;
            d_state[C_O * d + i] += d_ohat * g.c;
        }
    }

    fn project(&mut self) {
        let heads = self.dims.heads;
        for i in [A_F, A_Z, A_O, C_F, C_O] {
            super::clip_per_head(self.params.at_mut(i), heads, self.init.clip_norm);
        }
    }

    fn clone_box(&self) -> Box<dyn Cell<T>> {
        Box::new(self.clone())
    }
}
