//! Newton residual against iteration, for fresh cells on Gaussian inputs or
//! for the cell of a trained model on task data.

use std::path::{Path, PathBuf};

use pararnn::cells::{CellDims, CellKind};
use pararnn::newton::{newton_forward, NewtonConfig, NewtonTrace};
use pararnn::params::{load_checkpoint, read_checkpoint_header};
use pararnn::scan::ScanConfig;
use pararnn::tasks::{generate, Batch, Engine, ForwardMode, ModelConfig, SingleLayerModel, TaskSample, TaskSpec};
use pararnn::{DType, Rng, Scalar, SequenceBatch};
use serde::{Deserialize, Serialize};

use crate::cells::build_cell;
use crate::output::Record;
use crate::CliError;

/// Checkpoint `kind` written by `train`.
pub const MODEL_CHECKPOINT_KIND: &str = "single-layer-model";

/// What `train` stores in the checkpoint header's `config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub model: ModelConfig,
    pub task: TaskSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceOptions {
    pub cell: CellKind,
    pub dtype: DType,
    pub lens: Vec<usize>,
    pub batch: usize,
    pub input: usize,
    pub hidden: usize,
    pub heads: usize,
    /// Iterations run in full; no early stop, so the curve reaches the floor.
    pub n_its: usize,
    pub seed: u64,
    pub scan: ScanConfig,
    pub checkpoint: Option<PathBuf>,
}

impl TraceOptions {
    pub fn new(cell: CellKind, dtype: DType, scan: ScanConfig) -> Self {
        TraceOptions {
            cell,
            dtype,
            lens: vec![256, 512, 1024, 2048],
            batch: 4,
            input: 64,
            hidden: 64,
            heads: 4,
            n_its: 8,
            seed: 0,
            scan,
            checkpoint: None,
        }
    }

    fn newton(&self) -> NewtonConfig {
        NewtonConfig { n_its: self.n_its, tol: NewtonConfig::default_tol(self.dtype), early_stop: false, scan: self.scan }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.lens.is_empty() || self.lens.contains(&0) || self.batch == 0 || self.n_its == 0 {
            return Err(CliError::Usage("newton-trace needs lengths, batch and n_its >= 1".into()));
        }
        self.newton().validate().map_err(|e| CliError::Usage(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub cell: CellKind,
    /// `fresh` or `trained`.
    pub state: String,
    pub len: usize,
    pub dtype: DType,
    pub seed: u64,
    pub workers: usize,
    pub chunk_size: usize,
    pub iteration: usize,
    pub residual: f64,
}

impl Record for TraceRecord {
    const HEADER: &'static [&'static str] =
        &["cell", "state", "len", "dtype", "seed", "workers", "chunk_size", "iteration", "residual"];
}

/// Per-length curve plus the first iteration whose residual is under the
/// dtype's tolerance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceCurve {
    pub len: usize,
    pub residuals: Vec<f64>,
    pub first_converged: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub cell: CellKind,
    pub state: String,
    pub dtype: DType,
    pub tolerance: f64,
    pub curves: Vec<TraceCurve>,
}

impl TraceReport {
    pub fn records(&self, opts: &TraceOptions) -> Vec<TraceRecord> {
        let mut out = Vec::new();
        for c in &self.curves {
            for (k, &r) in c.residuals.iter().enumerate() {
                out.push(TraceRecord {
                    cell: self.cell,
                    state: self.state.clone(),
                    len: c.len,
                    dtype: self.dtype,
                    seed: opts.seed,
                    workers: opts.scan.workers,
                    chunk_size: opts.scan.chunk_size,
                    iteration: k,
                    residual: r,
                });
            }
        }
        out
    }
}

fn curve(len: usize, trace: &NewtonTrace, tol: f64) -> TraceCurve {
    TraceCurve {
        len,
        residuals: trace.residual_per_iter.clone(),
        first_converged: trace.residual_per_iter.iter().position(|&r| r < tol),
    }
}

pub fn run_trace(opts: &TraceOptions) -> Result<TraceReport, CliError> {
    opts.validate()?;
    match &opts.checkpoint {
        None => match opts.dtype {
            DType::F32 => fresh::<f32>(opts),
            DType::F64 => fresh::<f64>(opts),
        },
        Some(path) => {
            let header = read_checkpoint_header(path).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?;
            if header.dtype != opts.dtype {
                return Err(CliError::Usage(format!(
                    "checkpoint holds {} parameters but --dtype is {}",
                    header.dtype.name(),
                    opts.dtype.name()
                )));
            }
            match opts.dtype {
                DType::F32 => trained::<f32>(opts, path),
                DType::F64 => trained::<f64>(opts, path),
            }
        }
    }
}

fn fresh<T: Scalar>(opts: &TraceOptions) -> Result<TraceReport, CliError> {
    let dims = CellDims::new(opts.input, opts.hidden, opts.heads);
    let cell = build_cell::<T>(opts.cell, dims, opts.seed).map_err(|e| CliError::Usage(e.to_string()))?;
    let cfg = opts.newton();
    let mut curves = Vec::new();
    for &len in &opts.lens {
        let mut rng = Rng::new(opts.seed).fork(len as u64);
        let x = SequenceBatch::<T>::randn(opts.batch, len, cell.input_width(), 1.0, &mut rng)
            .map_err(|e| CliError::Run(e.to_string()))?;
        let (_, trace) = newton_forward(cell.as_ref(), &x, &cfg).map_err(|e| CliError::Run(e.to_string()))?;
        curves.push(curve(len, &trace, cfg.tol));
    }
    Ok(TraceReport { cell: opts.cell, state: "fresh".into(), dtype: opts.dtype, tolerance: cfg.tol, curves })
}

/// Loads a model written by `train` and records the Newton trace of its
/// cell on `batch` fresh task samples of each length.
pub fn load_model<T: Scalar>(path: &Path) -> Result<(SingleLayerModel<T>, ModelCheckpoint), CliError> {
    let bad = |m: String| CliError::Run(format!("{}: {m}", path.display()));
    let (header, params) = load_checkpoint::<T>(path).map_err(|e| bad(e.to_string()))?;
    if header.kind != MODEL_CHECKPOINT_KIND {
        return Err(bad(format!("not a model checkpoint (kind `{}`)", header.kind)));
    }
    let meta: ModelCheckpoint = serde_json::from_value(header.config).map_err(|e| bad(e.to_string()))?;
    let mut model = SingleLayerModel::<T>::new(meta.model, &mut Rng::new(header.seed)).map_err(|e| bad(e.to_string()))?;
    model.load_all_params(&params).map_err(|e| bad(e.to_string()))?;
    Ok((model, meta))
}

fn trained<T: Scalar>(opts: &TraceOptions, path: &Path) -> Result<TraceReport, CliError> {
    let (model, meta) = load_model::<T>(path)?;
    let cfg = opts.newton();
    let engine = Engine::new(ForwardMode::Parallel, cfg).map_err(|e| CliError::Run(e.to_string()))?;
    let mut curves = Vec::new();
    for &len in &opts.lens {
        let spec = TaskSpec { len, seed: opts.seed, ..meta.task };
        let samples = generate(&spec, opts.batch).map_err(|e| CliError::Usage(e.to_string()))?;
        let refs: Vec<&TaskSample> = samples.iter().collect();
        let b = Batch::from_samples(&refs).map_err(|e| CliError::Run(e.to_string()))?;
        let cache = model.forward(&b.tokens, b.batch, b.len, &engine).map_err(|e| CliError::Run(e.to_string()))?;
        let trace = cache.trace.ok_or_else(|| CliError::Run("parallel forward returned no trace".into()))?;
        curves.push(curve(len, &trace, cfg.tol));
    }
    Ok(TraceReport { cell: meta.model.cell, state: "trained".into(), dtype: opts.dtype, tolerance: cfg.tol, curves })
}
