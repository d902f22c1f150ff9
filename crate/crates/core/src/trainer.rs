//! AdamW training of the task models.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::newton::NewtonConfig;
use crate::params::ParamSet;
use crate::tasks::layers::cross_entropy;
use crate::tasks::{
    accuracy_counts, generate_range, Batch, Engine, ForwardMode, ModelConfig, ModelError, ModelGrads,
    SingleLayerModel, TaskError, TaskSample, TaskSpec,
};
use crate::tensor::{DType, Rng, Scalar};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String, report: Box<TrainReport> },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied to parameters flagged for decay.
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Truncates training after this many optimizer steps. The cosine
    /// schedule always spans `max_epochs * steps_per_epoch`.
    pub max_steps: Option<usize>,
    pub train_size: usize,
    pub test_size: usize,
    /// Stop after this many consecutive training batches scored at 100%.
    pub patience: usize,
    pub seed: u64,
    pub mode: ForwardMode,
    pub newton: NewtonConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
            batch_size: 16,
            max_epochs: 3000,
            max_steps: None,
            train_size: 10_000,
            test_size: 10_000,
            patience: 20,
            seed: 0,
            mode: ForwardMode::Parallel,
            newton: NewtonConfig::training(DType::F32),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [self.lr, self.beta1, self.beta2, self.eps];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.beta1 >= 1.0 || self.beta2 >= 1.0 {
            return Err(TrainError::Config(format!("bad optimizer settings in {self:?}")));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(TrainError::Config("weight_decay must be >= 0".into()));
        }
        if self.batch_size == 0 || self.train_size < self.batch_size || self.test_size == 0 {
            return Err(TrainError::Config(format!(
                "batch {} needs train_size >= batch and test_size >= 1",
                self.batch_size
            )));
        }
        self.newton.validate().map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.train_size / self.batch_size
    }

    /// Length of the cosine schedule.
    pub fn schedule_steps(&self) -> usize {
        self.max_epochs.saturating_mul(self.steps_per_epoch())
    }

    pub fn total_steps(&self) -> usize {
        let by_epochs = self.schedule_steps();
        self.max_steps.map_or(by_epochs, |m| m.min(by_epochs))
    }
}

/// `lr0 · (1 + cos(π t / total)) / 2`.
pub fn cosine_lr(lr0: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return lr0;
    }
    let t = (step.min(total)) as f64 / total as f64;
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Adam moments for a model's parameters followed by its cell's.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    m: Vec<T>,
    v: Vec<T>,
    decay: Vec<bool>,
    t: i32,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

fn decay_flags<T: Scalar>(p: &ParamSet<T>, out: &mut Vec<bool>) {
    for s in p.specs() {
        out.extend(std::iter::repeat(s.decay).take(s.numel()));
    }
}

impl<T: Scalar> AdamW<T> {
    pub fn new(model: &SingleLayerModel<T>, cfg: &TrainConfig) -> Self {
        let n = model.num_params();
        let mut decay = Vec::with_capacity(n);
        decay_flags(model.params(), &mut decay);
        decay_flags(model.cell().params(), &mut decay);
        AdamW {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            decay,
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn steps(&self) -> usize {
        self.t as usize
    }

    pub fn update(&mut self, model: &mut SingleLayerModel<T>, grads: &ModelGrads<T>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (step, eps) = (T::lit(lr / c1), T::lit(self.eps));
        let inv_c2 = T::lit(1.0 / c2);
        let shrink = T::one() - T::lit(lr * self.weight_decay);
        let n = model.params().len();
        let mut apply = |params: &mut [T], g: &[T], base: usize| {
            for (i, (p, &gi)) in params.iter_mut().zip(g).enumerate() {
                let k = base + i;
                self.m[k] = b1 * self.m[k] + (T::one() - b1) * gi;
                self.v[k] = b2 * self.v[k] + (T::one() - b2) * gi * gi;
                if self.decay[k] {
                    *p *= shrink;
                }
                *p -= step * self.m[k] / ((self.v[k] * inv_c2).sqrt() + eps);
            }
        };
        apply(model.params_mut().data_mut(), grads.model.data(), 0);
        apply(model.cell_mut().params_mut().data_mut(), grads.cell.data(), n);
        model.cell_mut().project();
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    /// Accuracy on the batch's scored positions, before the update.
    pub accuracy: f64,
    /// Final Newton residual of the forward pass (parallel mode).
    pub residual: Option<f64>,
}

/// One forward, backward and AdamW update on `batch`.
pub fn train_step<T: Scalar>(
    model: &mut SingleLayerModel<T>,
    opt: &mut AdamW<T>,
    batch: &Batch,
    lr: f64,
    engine: &Engine,
) -> Result<StepStats, TrainError> {
    let cache = model.forward(&batch.tokens, batch.batch, batch.len, engine)?;
    let vocab = model.config().vocab;
    let mut dlogits = vec![T::zero(); cache.logits.data().len()];
    let loss = cross_entropy(cache.logits.data(), vocab, &batch.targets, &batch.mask, &mut dlogits);
    let (hits, count) = accuracy_counts(&cache.logits, &batch.targets, &batch.score_mask)?;
    let stats = StepStats {
        loss,
        accuracy: if count == 0 { 0.0 } else { hits as f64 / count as f64 },
        residual: cache.trace.as_ref().map(|t| t.final_residual()),
    };
    if !loss.is_finite() {
        return Ok(stats);
    }
    let grads = model.backward(&cache, &dlogits, engine)?;
    opt.update(model, &grads, lr);
    Ok(stats)
}

/// Argmax accuracy over the scored positions of `data`.
pub fn evaluate<T: Scalar>(
    model: &SingleLayerModel<T>,
    data: &[TaskSample],
    engine: &Engine,
) -> Result<f64, TrainError> {
    const EVAL_BATCH: usize = 250;
    let (mut hits, mut count) = (0, 0);
    for chunk in data.chunks(EVAL_BATCH) {
        let refs: Vec<&TaskSample> = chunk.iter().collect();
        let b = Batch::from_samples(&refs)?;
        let logits = model.logits(&b.tokens, b.batch, b.len, engine)?;
        let (h, c) = accuracy_counts(&logits, &b.targets, &b.score_mask)?;
        hits += h;
        count += c;
    }
    if count == 0 {
        return Err(TaskError::Spec("no scored positions in the evaluation set".into()).into());
    }
    Ok(hits as f64 / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub dtype: DType,
    pub num_params: usize,
    pub steps: usize,
    pub epochs: f64,
    pub loss_curve: Vec<f64>,
    /// Training-batch accuracy per step.
    pub accuracy_curve: Vec<f64>,
    /// Final Newton residual of each training forward pass (parallel mode).
    pub residual_curve: Vec<Option<f64>>,
    pub initial_accuracy: f64,
    pub final_accuracy: f64,
    pub stopped_early: bool,
    pub wall_time_s: f64,
}

/// Train and test splits: sample indices `0..train_size` and
/// `train_size..train_size + test_size` of the task's generator.
pub fn datasets(task: &TaskSpec, cfg: &TrainConfig) -> Result<(Vec<TaskSample>, Vec<TaskSample>), TrainError> {
    let train = generate_range(task, 0, cfg.train_size)?;
    let test = generate_range(task, cfg.train_size, cfg.test_size)?;
    Ok((train, test))
}

/// Trains `model` on freshly generated data for `task`.
pub fn train<T: Scalar>(
    model: &mut SingleLayerModel<T>,
    task: &TaskSpec,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let (train_set, test_set) = datasets(task, cfg)?;
    train_on(model, task, cfg, &train_set, &test_set)
}

/// Steps between progress log lines.
const LOG_EVERY: usize = 100;

/// Trains on the given splits.
pub fn train_on<T: Scalar>(
    model: &mut SingleLayerModel<T>,
    task: &TaskSpec,
    cfg: &TrainConfig,
    train_set: &[TaskSample],
    test_set: &[TaskSample],
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let start = Instant::now();
    let engine = Engine::new(cfg.mode, cfg.newton)?;
    let eval_engine = Engine::new(cfg.mode, NewtonConfig { early_stop: false, ..cfg.newton })?;
    let initial_accuracy = evaluate(model, test_set, &eval_engine)?;
    let mut report = TrainReport {
        task: *task,
        model: *model.config(),
        config: *cfg,
        dtype: T::DTYPE,
        num_params: model.num_params(),
        steps: 0,
        epochs: 0.0,
        loss_curve: Vec::new(),
        accuracy_curve: Vec::new(),
        residual_curve: Vec::new(),
        initial_accuracy,
        final_accuracy: initial_accuracy,
        stopped_early: false,
        wall_time_s: 0.0,
    };
    let total = cfg.total_steps();
    let horizon = cfg.schedule_steps();
    let per_epoch = train_set.len() / cfg.batch_size;
    let mut opt = AdamW::new(model, cfg);
    let shuffler = Rng::new(cfg.seed);
    let mut streak = 0;
    'outer: for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        shuffler.fork(epoch as u64).shuffle(&mut order);
        for chunk in order.chunks_exact(cfg.batch_size) {
            if report.steps >= total {
                break 'outer;
            }
            let refs: Vec<&TaskSample> = chunk.iter().map(|&i| &train_set[i]).collect();
            let batch = Batch::from_samples(&refs)?;
            let lr = cosine_lr(cfg.lr, report.steps, horizon);
            let stats = match train_step(model, &mut opt, &batch, lr, &engine) {
                Ok(s) => s,
                Err(TrainError::Model(e)) => {
                    report.wall_time_s = start.elapsed().as_secs_f64();
                    return Err(TrainError::Diverged {
                        step: report.steps,
                        reason: e.to_string(),
                        report: Box::new(report),
                    });
                }
                Err(e) => return Err(e),
            };
            report.loss_curve.push(stats.loss);
            report.accuracy_curve.push(stats.accuracy);
            report.residual_curve.push(stats.residual);
            report.steps += 1;
            report.epochs = report.steps as f64 / per_epoch as f64;
            if !stats.loss.is_finite() {
                report.wall_time_s = start.elapsed().as_secs_f64();
                return Err(TrainError::Diverged {
                    step: report.steps - 1,
                    reason: format!("loss {}", stats.loss),
                    report: Box::new(report),
                });
            }
            if report.steps % LOG_EVERY == 0 {
                let window = &report.loss_curve[report.steps - LOG_EVERY..];
                let acc = &report.accuracy_curve[report.steps - LOG_EVERY..];
                log::info!(
                    "{} seed {}: step {} loss {:.4} batch accuracy {:.3} lr {:.2e}",
                    task.kind.name(),
                    cfg.seed,
                    report.steps,
                    window.iter().sum::<f64>() / LOG_EVERY as f64,
                    acc.iter().sum::<f64>() / LOG_EVERY as f64,
                    lr
                );
            }
            streak = if stats.accuracy >= 1.0 { streak + 1 } else { 0 };
            if cfg.patience > 0 && streak >= cfg.patience {
                report.stopped_early = true;
                break 'outer;
            }
        }
    }
    if report.steps > 0 {
        report.final_accuracy = evaluate(model, test_set, &eval_engine)?;
    }
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestOfReport {
    pub runs: Vec<TrainReport>,
    /// Seeds whose run diverged, with the reason.
    pub diverged: Vec<(u64, String)>,
    pub best_seed: Option<u64>,
    pub best_accuracy: f64,
}

impl BestOfReport {
    pub fn best(&self) -> Option<&TrainReport> {
        let seed = self.best_seed?;
        self.runs.iter().find(|r| r.config.seed == seed)
    }
}

/// Trains one fresh model per seed (model init and batch order both follow
/// the seed; the data follow `task.seed`) and keeps the best test accuracy.
/// With `stop_at`, later seeds are skipped once a run reaches that accuracy.
pub fn train_best_of<T: Scalar>(
    task: &TaskSpec,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seeds: &[u64],
    stop_at: Option<f64>,
) -> Result<BestOfReport, TrainError> {
    cfg.validate()?;
    let (train_set, test_set) = datasets(task, cfg)?;
    let mut out = BestOfReport { runs: Vec::new(), diverged: Vec::new(), best_seed: None, best_accuracy: 0.0 };
    for &seed in seeds {
        let mut model = SingleLayerModel::<T>::new(*model_cfg, &mut Rng::new(seed))?;
        let run_cfg = TrainConfig { seed, ..*cfg };
        match train_on(&mut model, task, &run_cfg, &train_set, &test_set) {
            Ok(r) => {
                if out.best_seed.is_none() || r.final_accuracy > out.best_accuracy {
                    out.best_accuracy = r.final_accuracy;
                    out.best_seed = Some(seed);
                }
                out.runs.push(r);
            }
            Err(TrainError::Diverged { reason, .. }) => out.diverged.push((seed, reason)),
            Err(e) => return Err(e),
        }
        if stop_at.is_some_and(|t| out.best_accuracy >= t) {
            break;
        }
    }
    Ok(out)
}
