//! Best-of-seeds task training with a checkpoint of the best model.

use std::path::Path;

use pararnn::params::save_checkpoint;
use pararnn::tasks::{ModelConfig, SingleLayerModel, TaskSpec};
use pararnn::trainer::{datasets, train_on, TrainConfig, TrainError, TrainReport};
use pararnn::{DType, Rng, Scalar};
use serde::{Deserialize, Serialize};

use crate::output::Record;
use crate::trace::{ModelCheckpoint, MODEL_CHECKPOINT_KIND};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub dtype: DType,
    pub seeds: Vec<u64>,
    /// Skip the remaining seeds once a run reaches this test accuracy.
    pub stop_at: Option<f64>,
    /// Exit status 1 when the best accuracy is below this.
    pub min_accuracy: Option<f64>,
}

/// A run without its per-step curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub steps: usize,
    pub epochs: f64,
    pub num_params: usize,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub stopped_early: bool,
    pub wall_time_s: f64,
}

impl From<&TrainReport> for RunSummary {
    fn from(r: &TrainReport) -> Self {
        RunSummary {
            seed: r.config.seed,
            steps: r.steps,
            epochs: r.epochs,
            num_params: r.num_params,
            initial_accuracy: r.initial_accuracy,
            final_accuracy: r.final_accuracy,
            stopped_early: r.stopped_early,
            wall_time_s: r.wall_time_s,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub runs: Vec<RunSummary>,
    pub diverged: Vec<Diverged>,
    pub best_seed: Option<u64>,
    pub best_accuracy: f64,
    #[serde(skip)]
    pub reports: Vec<TrainReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diverged {
    pub seed: u64,
    pub step: usize,
    pub reason: String,
}

impl TrainOutcome {
    pub fn passed(&self, min_accuracy: Option<f64>) -> bool {
        self.best_seed.is_some() && min_accuracy.is_none_or(|m| self.best_accuracy >= m)
    }

    pub fn records(&self, opts: &TrainOptions) -> Vec<StepRecord> {
        let mut out = Vec::new();
        for r in &self.reports {
            for (i, (&loss, &acc)) in r.loss_curve.iter().zip(&r.accuracy_curve).enumerate() {
                out.push(StepRecord {
                    task: opts.task.kind.name().into(),
                    cell: opts.model.cell.name().into(),
                    dtype: opts.dtype,
                    seed: r.config.seed,
                    workers: opts.config.newton.scan.workers,
                    chunk_size: opts.config.newton.scan.chunk_size,
                    step: i,
                    loss,
                    batch_accuracy: acc,
                });
            }
        }
        out
    }

    pub fn traces(&self, opts: &TrainOptions) -> Vec<StepResidual> {
        let mut out = Vec::new();
        for r in &self.reports {
            for (i, &res) in r.residual_curve.iter().enumerate() {
                if let Some(residual) = res {
                    out.push(StepResidual {
                        task: opts.task.kind.name().into(),
                        cell: opts.model.cell.name().into(),
                        dtype: opts.dtype,
                        seed: r.config.seed,
                        workers: opts.config.newton.scan.workers,
                        chunk_size: opts.config.newton.scan.chunk_size,
                        step: i,
                        residual,
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub task: String,
    pub cell: String,
    pub dtype: DType,
    pub seed: u64,
    pub workers: usize,
    pub chunk_size: usize,
    pub step: usize,
    pub loss: f64,
    pub batch_accuracy: f64,
}

impl Record for StepRecord {
    const HEADER: &'static [&'static str] =
        &["task", "cell", "dtype", "seed", "workers", "chunk_size", "step", "loss", "batch_accuracy"];
}

/// Final Newton residual of each training forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepResidual {
    pub task: String,
    pub cell: String,
    pub dtype: DType,
    pub seed: u64,
    pub workers: usize,
    pub chunk_size: usize,
    pub step: usize,
    pub residual: f64,
}

impl Record for StepResidual {
    const HEADER: &'static [&'static str] =
        &["task", "cell", "dtype", "seed", "workers", "chunk_size", "step", "residual"];
}

/// Trains one model per seed and writes the best one to `checkpoint`.
pub fn run_train(opts: &TrainOptions, checkpoint: Option<&Path>) -> Result<TrainOutcome, CliError> {
    opts.config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    opts.task.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    if opts.seeds.is_empty() {
        return Err(CliError::Usage("train needs at least one seed".into()));
    }
    match opts.dtype {
        DType::F32 => train::<f32>(opts, checkpoint),
        DType::F64 => train::<f64>(opts, checkpoint),
    }
}

fn train<T: Scalar>(opts: &TrainOptions, checkpoint: Option<&Path>) -> Result<TrainOutcome, CliError> {
    let run = |e: &dyn std::fmt::Display| CliError::Run(e.to_string());
    let (train_set, test_set) = datasets(&opts.task, &opts.config).map_err(|e| run(&e))?;
    let mut out = TrainOutcome { runs: Vec::new(), diverged: Vec::new(), best_seed: None, best_accuracy: 0.0, reports: Vec::new() };
    let mut best: Option<SingleLayerModel<T>> = None;
    for &seed in &opts.seeds {
        let mut model = SingleLayerModel::<T>::new(opts.model, &mut Rng::new(seed)).map_err(|e| CliError::Usage(e.to_string()))?;
        let cfg = TrainConfig { seed, ..opts.config };
        match train_on(&mut model, &opts.task, &cfg, &train_set, &test_set) {
            Ok(r) => {
                log::info!(
                    "{} / {} seed {seed}: test accuracy {:.4} after {} steps",
                    opts.task.kind.name(),
                    opts.model.cell.name(),
                    r.final_accuracy,
                    r.steps
                );
                if out.best_seed.is_none() || r.final_accuracy > out.best_accuracy {
                    out.best_seed = Some(seed);
                    out.best_accuracy = r.final_accuracy;
                    best = Some(model);
                }
                out.runs.push(RunSummary::from(&r));
                out.reports.push(r);
            }
            Err(TrainError::Diverged { step, reason, report }) => {
                log::warn!("seed {seed} diverged at step {step}: {reason}");
                out.diverged.push(Diverged { seed, step, reason });
                out.reports.push(*report);
            }
            Err(e) => return Err(run(&e)),
        }
        if opts.stop_at.is_some_and(|t| out.best_accuracy >= t) {
            break;
        }
    }
    if let (Some(path), Some(model), Some(seed)) = (checkpoint, &best, out.best_seed) {
        let meta = serde_json::to_value(ModelCheckpoint { model: opts.model, task: opts.task })?;
        save_checkpoint(path, &model.all_params(), seed, MODEL_CHECKPOINT_KIND, meta).map_err(|e| run(&e))?;
    }
    Ok(out)
}
