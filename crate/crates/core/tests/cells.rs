mod common;

use std::sync::Arc;

use common::*;
use pararnn::cells::{
    fd_jacobian, init_cell, sequential_apply, Cell, CellDims, CellInit, CellKind, CustomCell,
    LinearSsm, ParaGru, ParaLstm,
};
use pararnn::tensor::{sigmoid, tanh_prime};
use pararnn::{Rng, SequenceBatch};

fn zero_gru(d: usize) -> ParaGru<f64> {
    ParaGru::zeros(CellDims::new(d, d, 1), CellInit::default()).unwrap()
}

#[test]
fn gru_all_zero_params() {
    let cell = zero_gru(3);
    let h0 = [0.0; 3];
    let drive = [0.0; 9];
    let mut out = [1.0; 3];
    let mut jac = [0.0; 3];
    cell.step_jacobian(&h0, &drive, &mut out, &mut jac);
    assert_eq!(out, [0.0; 3]);
    assert_eq!(jac, [0.5; 3]);
}

#[test]
fn gru_gate_limits() {
    let mut rng = Rng::new(4);
    let dims = CellDims::new(2, 3, 1);
    for bz in [-40.0, 40.0] {
        let mut cell = ParaGru::<f64>::init(dims, CellInit::default(), &mut rng).unwrap();
        rng.fill_normal(cell.params_mut().get_mut("b_c").unwrap(), 1.0);
        cell.params_mut().get_mut("b_z").unwrap().fill(bz);
        let h_prev = [0.3, -0.7, 0.2];
        let x = SequenceBatch::from_vec(1, 1, 2, vec![0.4, -0.1]).unwrap();
        let drive = cell.drive(&x).unwrap();
        let mut out = [0.0; 3];
        cell.step(&h_prev, drive.at(0, 0), &mut out);
        // candidate value with the gate ignored
        let p = cell.params();
        for i in 0..3 {
            let d = drive.at(0, 0);
            let r = sigmoid(p.get("a_r").unwrap()[i] * h_prev[i] + d[3 + i]);
            let c = (p.get("a_c").unwrap()[i] * h_prev[i] * r + d[6 + i]).tanh();
            let expect = if bz < 0.0 { h_prev[i] } else { c };
            assert!((out[i] - expect).abs() < 1e-15, "b_z {bz}: {} vs {expect}", out[i]);
        }
    }
}

#[test]
fn gru_zero_state_vectors_give_one_minus_z() {
    let mut rng = Rng::new(8);
    let mut cell = ParaGru::<f64>::init(CellDims::new(4, 4, 2), CellInit::default(), &mut rng).unwrap();
    for name in ["a_z", "a_r", "a_c"] {
        cell.params_mut().get_mut(name).unwrap().fill(0.0);
    }
    let drive: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
    let h_prev = [0.1, -0.2, 0.3, 0.9];
    let mut out = [0.0; 4];
    let mut jac = [0.0; 4];
    cell.step_jacobian(&h_prev, &drive, &mut out, &mut jac);
    for i in 0..4 {
        assert_eq!(jac[i], 1.0 - sigmoid(drive[i]));
    }
}

#[test]
fn gru_jacobian_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..1000u64 {
        let d = 1 + (seed as usize % 8);
        let cell = random_cell(CellKind::ParaGru, CellDims::new(2, d, 1), seed, 1.0);
        let mut rng = Rng::new(seed + 77);
        let mut h = vec![0.0; d];
        rng.fill_normal(&mut h, 1.0);
        let mut drive = vec![0.0; 3 * d];
        rng.fill_normal(&mut drive, 1.0);
        let err = rel_err(&analytic_dense(cell.as_ref(), &h, &drive), &fd_dense(cell.as_ref(), &h, &drive));
        worst = worst.max(err);
    }
    assert!(worst < 1e-6, "worst relative error {worst:e}");
}

#[test]
fn lstm_all_zero_params() {
    let cell = ParaLstm::<f64>::zeros(CellDims::new(2, 2, 1), CellInit::default()).unwrap();
    let mut out = [1.0; 4];
    cell.step(&[0.0; 4], &[0.0; 6], &mut out);
    assert_eq!(out, [0.0; 4]);
}

#[test]
fn lstm_forget_gate_limits() {
    let mut rng = Rng::new(12);
    let dims = CellDims::new(3, 2, 1);
    for bf in [40.0, -40.0] {
        let mut cell = ParaLstm::<f64>::init(dims, CellInit::default(), &mut rng).unwrap();
        cell.params_mut().get_mut("b_f").unwrap().fill(bf);
        let s_prev = [0.6, -0.4, 0.2, 0.1];
        let x = SequenceBatch::from_vec(1, 1, 3, vec![0.3, -0.2, 0.5]).unwrap();
        let drive = cell.drive(&x).unwrap();
        let drive = drive.at(0, 0);
        let mut out = [0.0; 4];
        cell.step(&s_prev, drive, &mut out);
        let a_z = cell.params().get("a_z").unwrap().to_vec();
        for i in 0..2 {
            let z = (a_z[i] * s_prev[2 + i] + drive[2 + i]).tanh();
            let expect = if bf > 0.0 { s_prev[i] } else { z };
            assert!((out[i] - expect).abs() < 1e-15);
        }
    }
}

#[test]
fn lstm_zero_vectors_reduce_blocks() {
    let mut rng = Rng::new(2);
    let mut cell = ParaLstm::<f64>::init(CellDims::new(2, 3, 1), CellInit::default(), &mut rng).unwrap();
    for name in ["a_f", "a_z", "a_o", "c_f", "c_o"] {
        cell.params_mut().get_mut(name).unwrap().fill(0.0);
    }
    let s_prev = [0.5, -0.3, 0.8, 0.1, 0.2, -0.6];
    let drive: Vec<f64> = (0..9).map(|i| (i as f64 * 0.71).cos()).collect();
    let mut out = [0.0; 6];
    let mut jac = [0.0; 12];
    cell.step_jacobian(&s_prev, &drive, &mut out, &mut jac);
    for i in 0..3 {
        let f = sigmoid(drive[i]);
        let o = sigmoid(drive[6 + i]);
        let c = out[i];
        assert!((jac[i] - f).abs() < 1e-15);
        assert_eq!(jac[3 + i], 0.0);
        assert!((jac[6 + i] - o * tanh_prime(c) * f).abs() < 1e-15);
        assert_eq!(jac[9 + i], 0.0);
    }
}

#[test]
fn lstm_jacobian_matches_finite_differences() {
    let mut worst: f64 = 0.0;
    for seed in 0..1000u64 {
        let d = 1 + (seed as usize % 4);
        let cell = random_cell(CellKind::ParaLstm, CellDims::new(3, d, 1), seed, 1.0);
        let mut rng = Rng::new(seed + 5);
        let mut s = vec![0.0; 2 * d];
        rng.fill_normal(&mut s, 1.0);
        let mut drive = vec![0.0; 3 * d];
        rng.fill_normal(&mut drive, 1.0);
        let a = analytic_dense(cell.as_ref(), &s, &drive);
        let f = fd_dense(cell.as_ref(), &s, &drive);
        worst = worst.max(rel_err(&a, &f));
    }
    assert!(worst < 1e-6, "worst relative error {worst:e}");
}

#[test]
fn fd_jacobian_adapter_matches_analytic_gru() {
    let cell = random_cell(CellKind::ParaGru, CellDims::new(2, 5, 1), 31, 1.0);
    let mut rng = Rng::new(1);
    let mut h = vec![0.0; 5];
    rng.fill_normal(&mut h, 1.0);
    let mut drive = vec![0.0; 15];
    rng.fill_normal(&mut drive, 1.0);
    let step = |hp: &[f64], x: &[f64], out: &mut [f64]| cell.step(hp, x, out);
    let fd = fd_jacobian(&step, &h, &drive, None).unwrap();
    assert!(rel_err(&fd.data, &analytic_dense(cell.as_ref(), &h, &drive)) < 1e-6);
}

#[test]
fn fd_jacobian_linear_and_identity() {
    let a = [0.3, -0.5, 0.9];
    let linear = |hp: &[f64], x: &[f64], out: &mut [f64]| {
        for i in 0..3 {
            out[i] = a[i] * hp[i] + x[i];
        }
    };
    let j = fd_jacobian(&linear, &[0.2, 0.1, -4.0], &[1.0, 2.0, 3.0], None).unwrap();
    for i in 0..3 {
        for k in 0..3 {
            let expect = if i == k { a[i] } else { 0.0 };
            assert!((j.data[i * 3 + k] - expect).abs() < 1e-9);
        }
    }
    let ident = |hp: &[f64], _x: &[f64], out: &mut [f64]| out.copy_from_slice(hp);
    let j = fd_jacobian(&ident, &[0.5, -2.0], &[0.0], None).unwrap();
    for i in 0..2 {
        for k in 0..2 {
            assert!((j.data[i * 2 + k] - if i == k { 1.0 } else { 0.0 }).abs() < 1e-9);
        }
    }
}

#[test]
fn custom_cell_rejects_wide_dense() {
    let step: pararnn::cells::StepFn<f64> = Arc::new(|h, _x, out| out.copy_from_slice(h));
    assert!(CustomCell::new(65, 1, step.clone()).is_err());
    assert!(CustomCell::new(64, 1, step).is_ok());
}

#[test]
fn ssm_memoryless_and_integrator() {
    let dims = CellDims::new(3, 3, 1);
    let mut cell = LinearSsm::<f64>::zeros(dims, CellInit { clip_norm: None }).unwrap();
    let x = inputs(2, 6, 3, 1);
    // a = 0: h_l = B x_l
    let mut rng = Rng::new(3);
    rng.fill_normal(cell.params_mut().get_mut("B_x").unwrap(), 1.0);
    let h = sequential_apply(&cell, &x).unwrap();
    let bx = cell.drive(&x).unwrap();
    assert!(h.max_abs_diff(&bx) == 0.0);
    // a = 1, B = I, x = e_1 at l = 0 only
    cell.params_mut().get_mut("a").unwrap().fill(1.0);
    let b = cell.params_mut().get_mut("B_x").unwrap();
    b.fill(0.0);
    for i in 0..3 {
        b[i * 3 + i] = 1.0;
    }
    let x = SequenceBatch::from_fn(1, 7, 3, |_, l, d| if l == 0 && d == 0 { 1.0 } else { 0.0 }).unwrap();
    let h = sequential_apply(&cell, &x).unwrap();
    for l in 0..7 {
        assert_eq!(h.at(0, l), &[1.0, 0.0, 0.0]);
    }
}

#[test]
fn ssm_closed_form_unroll() {
    let cell = random_cell(CellKind::Ssm, CellDims::new(2, 3, 1), 9, 0.7);
    let x = inputs(1, 5, 2, 9);
    let h = sequential_apply(cell.as_ref(), &x).unwrap();
    let a = cell.params().get("a").unwrap();
    let u = cell.drive(&x).unwrap();
    for l in 0..5 {
        for d in 0..3 {
            let expect: f64 = (0..=l).map(|s| a[d].powi((l - s) as i32) * u.at(0, s)[d]).sum();
            assert!((h.at(0, l)[d] - expect).abs() < 1e-14);
        }
    }
}

#[test]
fn init_biases_zero_and_vectors_clipped() {
    for kind in [CellKind::ParaGru, CellKind::ParaLstm, CellKind::Ssm] {
        let dims = CellDims::new(64, 64, 4);
        let a = fresh(kind, dims, 17);
        let b = fresh(kind, dims, 17);
        assert_eq!(a.params(), b.params());
        for spec in a.params().specs() {
            let v = a.params().get(&spec.name).unwrap();
            if spec.name.starts_with("b_") {
                assert!(v.iter().all(|&x| x == 0.0), "{}", spec.name);
            }
            if spec.name.starts_with("a") || spec.name.starts_with("c_") {
                for head in v.chunks(16) {
                    assert!(frob(head) <= 0.5 + 1e-12, "{} head norm {}", spec.name, frob(head));
                }
            }
        }
    }
}

#[test]
fn heads_are_independent() {
    let dims = CellDims::new(4, 6, 2);
    for kind in [CellKind::ParaGru, CellKind::ParaLstm] {
        let cell = random_cell(kind, dims, 3, 0.8);
        // swap the two heads in every parameter and in the input
        let mut swapped = cell.clone();
        for spec in cell.params().specs() {
            let src = cell.params().get(&spec.name).unwrap();
            let half = src.len() / 2;
            let dst = swapped.params_mut().get_mut(&spec.name).unwrap();
            dst[..half].copy_from_slice(&src[half..]);
            dst[half..].copy_from_slice(&src[..half]);
        }
        let x = inputs(2, 9, 4, 5);
        let xs = SequenceBatch::from_fn(2, 9, 4, |b, l, d| x.at(b, l)[(d + 2) % 4]).unwrap();
        let h = sequential_apply(cell.as_ref(), &x).unwrap();
        let hs = sequential_apply(swapped.as_ref(), &xs).unwrap();
        let w = cell.state_width();
        let branch = cell.output_width();
        for b in 0..2 {
            for l in 0..9 {
                for k in 0..w {
                    // within each branch ([c] or [h]) heads occupy halves
                    let (base, i) = (k / branch * branch, k % branch);
                    let j = base + (i + branch / 2) % branch;
                    assert_eq!(h.at(b, l)[k], hs.at(b, l)[j]);
                }
            }
        }
    }
}

#[test]
fn gru_features_do_not_mix_through_state() {
    let cell = random_cell(CellKind::ParaGru, CellDims::new(3, 5, 1), 21, 1.0);
    let drive: Vec<f64> = (0..15).map(|i| (i as f64).sin()).collect();
    let h_prev = [0.1, 0.2, -0.3, 0.4, -0.5];
    let mut base = [0.0; 5];
    cell.step(&h_prev, &drive, &mut base);
    for dp in 0..5 {
        let mut hp = h_prev;
        hp[dp] += 0.37;
        let mut out = [0.0; 5];
        cell.step(&hp, &drive, &mut out);
        for d in 0..5 {
            if d != dp {
                assert_eq!(out[d], base[d]);
            }
        }
    }
}

/// Local derivative check of `step_vjp` against finite differences of the
/// step with respect to the drive and the state parameters.
#[test]
fn step_vjp_matches_finite_differences() {
    for kind in [CellKind::ParaGru, CellKind::ParaLstm, CellKind::Ssm] {
        for seed in 0..50u64 {
            let d = 1 + seed as usize % 4;
            let mut cell = random_cell(kind, CellDims::new(2, d, 1), seed, 1.0);
            let mut rng = Rng::new(seed);
            let w = cell.state_width();
            let mut h = vec![0.0; w];
            rng.fill_normal(&mut h, 1.0);
            let mut drive = vec![0.0; cell.drive_width()];
            rng.fill_normal(&mut drive, 1.0);
            let mut g = vec![0.0; w];
            rng.fill_normal(&mut g, 1.0);
            let mut d_drive = vec![0.0; drive.len()];
            let mut d_state = vec![0.0; cell.state_param_len()];
            cell.step_vjp(&h, &drive, &g, &mut d_drive, &mut d_state);
            let loss = |c: &dyn Cell<f64>, dr: &[f64]| {
                let mut out = vec![0.0; w];
                c.step(&h, dr, &mut out);
                out.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
            };
            let eps = 1e-6;
            let mut fd = vec![0.0; drive.len()];
            for j in 0..drive.len() {
                let mut p = drive.clone();
                p[j] += eps;
                let mut m = drive.clone();
                m[j] -= eps;
                fd[j] = (loss(cell.as_ref(), &p) - loss(cell.as_ref(), &m)) / (2.0 * eps);
            }
            assert!(rel_err(&d_drive, &fd) < 1e-7, "{kind:?} drive");
            let mut fds = vec![0.0; d_state.len()];
            for j in 0..d_state.len() {
                let orig = cell.params().data()[j];
                cell.params_mut().data_mut()[j] = orig + eps;
                let lp = loss(cell.as_ref(), &drive);
                cell.params_mut().data_mut()[j] = orig - eps;
                let lm = loss(cell.as_ref(), &drive);
                cell.params_mut().data_mut()[j] = orig;
                fds[j] = (lp - lm) / (2.0 * eps);
            }
            assert!(rel_err(&d_state, &fds) < 1e-7, "{kind:?} state params");
        }
    }
}

#[test]
fn init_cell_rejects_custom_and_bad_dims() {
    let mut rng = Rng::new(0);
    assert!(init_cell::<f64>(CellKind::Custom, CellDims::new(1, 1, 1), CellInit::default(), &mut rng).is_err());
    assert!(init_cell::<f64>(CellKind::ParaGru, CellDims::new(3, 4, 2), CellInit::default(), &mut rng).is_err());
}

#[test]
fn sequential_apply_checks_input_width() {
    let cell = fresh(CellKind::ParaGru, CellDims::new(3, 4, 1), 0);
    assert!(sequential_apply(cell.as_ref(), &inputs(1, 2, 2, 0)).is_err());
}
