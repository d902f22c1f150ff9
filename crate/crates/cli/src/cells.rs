//! Cell construction for the commands, the demonstration custom cell and the
//! fault-injection wrapper used to check that verification catches bugs.

use std::sync::Arc;

use clap::ValueEnum;
use pararnn::cells::{init_cell, Cell, CellDims, CellError, CellInit, CellKind, CustomCell};
use pararnn::jacobians::Layout;
use pararnn::params::ParamSet;
use pararnn::{Rng, Scalar, SequenceBatch};
use serde::{Deserialize, Serialize};

/// `h' = tanh(W h + x)` with a fixed random `W` (entries `N(0, 0.8² / d)`)
/// and its analytic Jacobian `(1 - h'²) W`.
pub fn tanh_rnn<T: Scalar>(width: usize, seed: u64) -> Result<CustomCell<T>, CellError> {
    let mut w = vec![0.0f64; width * width];
    Rng::new(seed).fork(0x7a4e).fill_normal(&mut w, 0.8 / (width as f64).sqrt());
    let w: Arc<Vec<T>> = Arc::new(w.iter().map(|&v| T::lit(v)).collect());
    let ws = w.clone();
    let step = Arc::new(move |h: &[T], x: &[T], out: &mut [T]| {
        let d = h.len();
        for i in 0..d {
            let row = &ws[i * d..(i + 1) * d];
            let z: T = row.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>() + x[i];
            out[i] = z.tanh();
        }
    });
    let jac = Arc::new(move |h: &[T], x: &[T], out: &mut [T]| {
        let d = h.len();
        for i in 0..d {
            let row = &w[i * d..(i + 1) * d];
            let z: T = row.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>() + x[i];
            let t = z.tanh();
            let g = T::one() - t * t;
            for j in 0..d {
                out[i * d + j] = g * row[j];
            }
        }
    });
    Ok(CustomCell::new(width, width, step)?.with_jacobian(jac))
}

/// Fresh cell with the default initialization. `Custom` builds [`tanh_rnn`]
/// of width `dims.hidden` (its input width equals its state width).
pub fn build_cell<T: Scalar>(kind: CellKind, dims: CellDims, seed: u64) -> Result<Box<dyn Cell<T>>, CellError> {
    match kind {
        CellKind::Custom => Ok(Box::new(tanh_rnn::<T>(dims.hidden, seed)?)),
        _ => init_cell(kind, dims, CellInit::default(), &mut Rng::new(seed)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Fault {
    /// Negates every step Jacobian.
    JacobianSign,
}

/// Delegates to the wrapped cell, corrupting it as `fault` says.
pub struct Faulty<T: Scalar> {
    inner: Box<dyn Cell<T>>,
    fault: Fault,
}

impl<T: Scalar> Faulty<T> {
    pub fn wrap(inner: Box<dyn Cell<T>>, fault: Option<Fault>) -> Box<dyn Cell<T>> {
        match fault {
            None => inner,
            Some(fault) => Box::new(Faulty { inner, fault }),
        }
    }
}

impl<T: Scalar> Cell<T> for Faulty<T> {
    fn kind(&self) -> CellKind {
        self.inner.kind()
    }
    fn layout(&self) -> Layout {
        self.inner.layout()
    }
    fn dims(&self) -> CellDims {
        self.inner.dims()
    }
    fn jac_d(&self) -> usize {
        self.inner.jac_d()
    }
    fn state_width(&self) -> usize {
        self.inner.state_width()
    }
    fn output_width(&self) -> usize {
        self.inner.output_width()
    }
    fn output_offset(&self) -> usize {
        self.inner.output_offset()
    }
    fn input_width(&self) -> usize {
        self.inner.input_width()
    }
    fn drive_width(&self) -> usize {
        self.inner.drive_width()
    }
    fn params(&self) -> &ParamSet<T> {
        self.inner.params()
    }
    fn params_mut(&mut self) -> &mut ParamSet<T> {
        self.inner.params_mut()
    }
    fn state_param_len(&self) -> usize {
        self.inner.state_param_len()
    }
    fn drive(&self, x: &SequenceBatch<T>) -> Result<SequenceBatch<T>, CellError> {
        self.inner.drive(x)
    }
    fn drive_backward(
        &self,
        x: &SequenceBatch<T>,
        d_drive: &SequenceBatch<T>,
        grads: &mut ParamSet<T>,
    ) -> Result<SequenceBatch<T>, CellError> {
        self.inner.drive_backward(x, d_drive, grads)
    }
    fn step(&self, h_prev: &[T], drive: &[T], out: &mut [T]) {
        self.inner.step(h_prev, drive, out)
    }
    fn step_jacobian(&self, h_prev: &[T], drive: &[T], out: &mut [T], jac: &mut [T]) {
        self.inner.step_jacobian(h_prev, drive, out, jac);
        match self.fault {
            Fault::JacobianSign => jac.iter_mut().for_each(|v| *v = -*v),
        }
    }
    fn step_vjp(&self, h_prev: &[T], drive: &[T], g: &[T], d_drive: &mut [T], d_state: &mut [T]) {
        self.inner.step_vjp(h_prev, drive, g, d_drive, d_state)
    }
    fn project(&mut self) {
        self.inner.project()
    }
    fn clone_box(&self) -> Box<dyn Cell<T>> {
        Box::new(Faulty { inner: self.inner.clone_box(), fault: self.fault })
    }
}
