#![allow(dead_code)]

use pararnn::cells::{init_cell, Cell, CellDims, CellInit, CellKind};
use pararnn::{Rng, SequenceBatch};

/// Overwrites every parameter with N(0, scale²) draws.
pub fn randomize(cell: &mut dyn Cell<f64>, rng: &mut Rng, scale: f64) {
    rng.fill_normal(cell.params_mut().data_mut(), scale);
}

pub fn fresh(kind: CellKind, dims: CellDims, seed: u64) -> Box<dyn Cell<f64>> {
    init_cell::<f64>(kind, dims, CellInit::default(), &mut Rng::new(seed)).unwrap()
}

pub fn random_cell(kind: CellKind, dims: CellDims, seed: u64, scale: f64) -> Box<dyn Cell<f64>> {
    let mut rng = Rng::new(seed);
    let mut cell = init_cell::<f64>(kind, dims, CellInit::default(), &mut rng).unwrap();
    randomize(cell.as_mut(), &mut rng, scale);
    cell
}

pub fn inputs(b: usize, l: usize, w: usize, seed: u64) -> SequenceBatch<f64> {
    SequenceBatch::randn(b, l, w, 1.0, &mut Rng::new(seed ^ 0x9e37_79b9)).unwrap()
}

pub fn frob(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `|a - b| / max(|a|, |b|)` in the Frobenius norm, 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = frob(a).max(frob(b));
    if scale == 0.0 {
        0.0
    } else {
        frob(&diff) / scale
    }
}

/// Dense row-major expansion of the cell's Jacobian at one position.
pub fn analytic_dense(cell: &dyn Cell<f64>, h_prev: &[f64], drive: &[f64]) -> Vec<f64> {
    let layout = cell.layout();
    let d = cell.jac_d();
    let mut j = vec![0.0; layout.payload_len(d)];
    let mut out = vec![0.0; cell.state_width()];
    cell.step_jacobian(h_prev, drive, &mut out, &mut j);
    let w = cell.state_width();
    let mut dense = vec![0.0; w * w];
    layout.structure::<f64>().to_dense(d, &j, &mut dense);
    dense
}

/// Central differences of the step with respect to `h_prev`, step `1e-6`.
pub fn fd_dense(cell: &dyn Cell<f64>, h_prev: &[f64], drive: &[f64]) -> Vec<f64> {
    let w = cell.state_width();
    let eps = 1e-6;
    let mut dense = vec![0.0; w * w];
    let (mut fp, mut fm) = (vec![0.0; w], vec![0.0; w]);
    let mut hp = h_prev.to_vec();
    for j in 0..w {
        hp[j] = h_prev[j] + eps;
        cell.step(&hp, drive, &mut fp);
        hp[j] = h_prev[j] - eps;
        cell.step(&hp, drive, &mut fm);
        hp[j] = h_prev[j];
        for i in 0..w {
            dense[i * w + j] = (fp[i] - fm[i]) / (2.0 * eps);
        }
    }
    dense
}
