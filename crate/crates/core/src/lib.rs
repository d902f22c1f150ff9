//! Sequence-parallel application of nonlinear RNN cells.
//!
//! A recurrence `h_l = f(h_{l-1}, x_l)` is solved for all positions at once:
//! Newton's method linearizes the stacked system, and each linearization is a
//! block bi-diagonal system solved by a parallel reduction whose cost depends
//! on the structure of the step Jacobians (diagonal, 2x2 block-diagonal or
//! dense).

pub mod backprop;
pub mod cells;
pub mod jacobians;
pub mod newton;
pub mod params;
pub mod pool;
pub mod scan;
pub mod tasks;
pub mod tensor;
pub mod trainer;

pub use backprop::{backward, backward_params, backward_states, GradientBundle};
pub use cells::{sequential_apply, Cell, CellDims, CellInit, CellKind};
pub use jacobians::{JacobianEntry, JacobianStructure, Layout, StructuredJacobianSeq};
pub use newton::{newton_forward, NewtonConfig, NewtonTrace};
pub use params::ParamSet;
pub use scan::{
    solve_backward, solve_parallel_hybrid, solve_parallel_naive, solve_sequential, ScanConfig,
    ScanError, ScanSolver, StepCounter,
};
pub use tensor::{DType, Rng, Scalar, SequenceBatch};
