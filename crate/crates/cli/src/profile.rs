//! Wall-clock comparison of the sequential unroll and the Newton solve.

use std::time::Instant;

use pararnn::cells::{sequential_apply, CellDims, CellKind};
use pararnn::newton::{newton_forward, newton_from_drive, NewtonConfig};
use pararnn::scan::{ScanConfig, ScanSolver, StepCounter};
use pararnn::{DType, Rng, Scalar, SequenceBatch};
use serde::{Deserialize, Serialize};

use crate::cells::build_cell;
use crate::output::Record;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileOptions {
    pub cell: CellKind,
    pub dtype: DType,
    pub lens: Vec<usize>,
    pub d_model: usize,
    pub heads: usize,
    pub batch: usize,
    pub warmups: usize,
    pub repeats: usize,
    pub n_its: usize,
    /// One Newton row per configuration and length.
    pub grid: Vec<ScanConfig>,
    pub seed: u64,
    /// Lengths whose buffers would exceed this are rejected up front.
    pub max_bytes: u64,
}

impl ProfileOptions {
    pub fn new(cell: CellKind, dtype: DType, lens: Vec<usize>, grid: Vec<ScanConfig>) -> Self {
        ProfileOptions {
            cell,
            dtype,
            lens,
            d_model: 256,
            heads: 4,
            batch: 1,
            warmups: 5,
            repeats: 20,
            n_its: 3,
            grid,
            seed: 0,
            max_bytes: 4 << 30,
        }
    }

    /// Bytes held at once by one Newton solve at length `len`: inputs, drive,
    /// iterate, residual, Jacobians and the unroll's output.
    pub fn footprint(&self, len: usize) -> u64 {
        let d = self.d_model as u64;
        let per_position = match self.cell {
            CellKind::ParaGru => d + 3 * d + 3 * d + d,
            CellKind::ParaLstm => d + 3 * d + 3 * (2 * d) + 4 * d,
            CellKind::Ssm => d + d + 3 * d + d,
            CellKind::Custom => d + d + 3 * d + d * d,
        };
        (self.batch as u64) * (len as u64) * per_position * self.dtype.size_of() as u64
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.lens.is_empty() || self.grid.is_empty() {
            return usage("profile needs at least one length and one solver configuration".into());
        }
        if self.lens.contains(&0) || self.batch == 0 || self.repeats == 0 || self.n_its == 0 {
            return usage("lengths, batch, repeats and n_its must be >= 1".into());
        }
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return usage(format!("d_model {} must be a positive multiple of {} heads", self.d_model, self.heads));
        }
        for &len in &self.lens {
            let need = self.footprint(len);
            if need > self.max_bytes {
                return usage(format!(
                    "L = {len} needs about {:.1} GiB, above the {:.1} GiB limit",
                    need as f64 / (1u64 << 30) as f64,
                    self.max_bytes as f64 / (1u64 << 30) as f64
                ));
            }
        }
        for cfg in &self.grid {
            cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        }
        Ok(())
    }
}

/// Min and median of `repeats` timed calls after `warmups` untimed ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub min_s: f64,
    pub median_s: f64,
}

pub fn time_op<E>(warmups: usize, repeats: usize, mut op: impl FnMut() -> Result<(), E>) -> Result<Timing, E> {
    for _ in 0..warmups {
        op()?;
    }
    let mut samples = Vec::with_capacity(repeats);
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        op()?;
        samples.push(t.elapsed().as_secs_f64());
    }
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let median_s = if n % 2 == 1 { samples[n / 2] } else { 0.5 * (samples[n / 2 - 1] + samples[n / 2]) };
    Ok(Timing { min_s: samples[0], median_s })
}

/// One timed operation at one length. `speedup` is the sequential minimum
/// over this row's minimum; step counts come from a separate instrumented
/// solve and are empty for the sequential rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub op: String,
    pub cell: CellKind,
    pub len: usize,
    pub batch: usize,
    pub d_model: usize,
    pub dtype: DType,
    pub seed: u64,
    pub chunk_size: Option<usize>,
    pub workers: usize,
    pub n_its: Option<usize>,
    pub warmups: usize,
    pub repeats: usize,
    pub min_s: f64,
    pub median_s: f64,
    pub speedup: f64,
    pub compose_count: Option<u64>,
    pub apply_count: Option<u64>,
    pub parallel_depth: Option<u64>,
    pub final_residual: Option<f64>,
}

impl Record for BenchRecord {
    const HEADER: &'static [&'static str] = &[
        "op",
        "cell",
        "len",
        "batch",
        "d_model",
        "dtype",
        "seed",
        "chunk_size",
        "workers",
        "n_its",
        "warmups",
        "repeats",
        "min_s",
        "median_s",
        "speedup",
        "compose_count",
        "apply_count",
        "parallel_depth",
        "final_residual",
    ];
}

/// Residual curve of the instrumented solve behind a Newton row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileTrace {
    pub cell: CellKind,
    pub len: usize,
    pub dtype: DType,
    pub seed: u64,
    pub chunk_size: usize,
    pub workers: usize,
    pub iteration: usize,
    pub residual: f64,
}

impl Record for ProfileTrace {
    const HEADER: &'static [&'static str] =
        &["cell", "len", "dtype", "seed", "chunk_size", "workers", "iteration", "residual"];
}

pub const SEQUENTIAL_OP: &str = "sequential_apply";
pub const NEWTON_OP: &str = "newton_forward";

pub fn run_profile(opts: &ProfileOptions) -> Result<(Vec<BenchRecord>, Vec<ProfileTrace>), CliError> {
    opts.validate()?;
    match opts.dtype {
        DType::F32 => profile::<f32>(opts),
        DType::F64 => profile::<f64>(opts),
    }
}

fn profile<T: Scalar>(opts: &ProfileOptions) -> Result<(Vec<BenchRecord>, Vec<ProfileTrace>), CliError> {
    let run = |e: &dyn std::fmt::Display| CliError::Run(e.to_string());
    let dims = CellDims::new(opts.d_model, opts.d_model, opts.heads);
    let cell = build_cell::<T>(opts.cell, dims, opts.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut records = Vec::new();
    let mut traces = Vec::new();
    for &len in &opts.lens {
        let mut rng = Rng::new(opts.seed).fork(len as u64);
        let x = SequenceBatch::<T>::randn(opts.batch, len, cell.input_width(), 1.0, &mut rng).map_err(|e| run(&e))?;
        let seq = time_op(opts.warmups, opts.repeats, || sequential_apply(cell.as_ref(), &x).map(drop))
            .map_err(|e| run(&e))?;
        log::info!("L {len}: sequential min {:.3e} s", seq.min_s);
        let base = BenchRecord {
            op: SEQUENTIAL_OP.into(),
            cell: opts.cell,
            len,
            batch: opts.batch,
            d_model: opts.d_model,
            dtype: opts.dtype,
            seed: opts.seed,
            chunk_size: None,
            workers: 1,
            n_its: None,
            warmups: opts.warmups,
            repeats: opts.repeats,
            min_s: seq.min_s,
            median_s: seq.median_s,
            speedup: 1.0,
            compose_count: None,
            apply_count: None,
            parallel_depth: None,
            final_residual: None,
        };
        records.push(base.clone());
        for scan in &opts.grid {
            let cfg = NewtonConfig { n_its: opts.n_its, early_stop: false, ..NewtonConfig::training(opts.dtype) };
            let cfg = NewtonConfig { scan: *scan, ..cfg };
            let t = time_op(opts.warmups, opts.repeats, || newton_forward(cell.as_ref(), &x, &cfg).map(drop))
                .map_err(|e| run(&e))?;
            let counter = StepCounter::new();
            let solver = ScanSolver::new(*scan).map_err(|e| run(&e))?;
            let drive = cell.drive(&x).map_err(|e| run(&e))?;
            let (_, trace) = newton_from_drive(cell.as_ref(), &drive, &cfg, &solver, Some(&counter)).map_err(|e| run(&e))?;
            log::info!(
                "L {len}, chunk {}, workers {}: Newton min {:.3e} s, speedup {:.2}",
                scan.chunk_size,
                scan.workers,
                t.min_s,
                seq.min_s / t.min_s
            );
            for (k, &r) in trace.residual_per_iter.iter().enumerate() {
                traces.push(ProfileTrace {
                    cell: opts.cell,
                    len,
                    dtype: opts.dtype,
                    seed: opts.seed,
                    chunk_size: scan.chunk_size,
                    workers: scan.workers,
                    iteration: k,
                    residual: r,
                });
            }
            records.push(BenchRecord {
                op: NEWTON_OP.into(),
                chunk_size: Some(scan.chunk_size),
                workers: scan.workers,
                n_its: Some(opts.n_its),
                min_s: t.min_s,
                median_s: t.median_s,
                speedup: seq.min_s / t.min_s,
                compose_count: Some(counter.compose_count()),
                apply_count: Some(counter.apply_count()),
                parallel_depth: Some(counter.parallel_depth()),
                final_residual: Some(trace.final_residual()),
                ..base.clone()
            });
        }
    }
    Ok((records, traces))
}
