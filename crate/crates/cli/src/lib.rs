//! Command-line front end: oracle verification, timing sweeps, Newton
//! residual traces and task training. Every command writes
//! `<out>/<timestamp>/{config.json, records.csv, trace.csv, report.json}`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pararnn::cells::CellKind;
use pararnn::params::read_checkpoint_header;
use pararnn::scan::ScanConfig;
use pararnn::tasks::{ForwardMode, ModelConfig, TaskKind, TaskSpec};
use pararnn::trainer::TrainConfig;
use pararnn::newton::NewtonConfig;
use pararnn::DType;
use serde::Serialize;
use thiserror::Error;

pub mod cells;
pub mod output;
pub mod profile;
pub mod trace;
pub mod train;
pub mod verify;

pub use output::{Record, RunDir};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Run(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Process exit codes.
pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

impl CliError {
    /// Usage and runtime errors (bad flags, unreadable checkpoints, I/O)
    /// both map to 2; 1 is reserved for completed runs that miss a tolerance.
    pub fn exit_code(&self) -> i32 {
        EXIT_USAGE
    }
}

#[derive(Parser, Debug, Clone)]
#[command(name = "pararnn", version, about = "Sequence-parallel nonlinear RNNs: verify, profile, trace, train")]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct CommonArgs {
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// f32 or f64 (default: f64 for verify and newton-trace, f32 otherwise).
    #[arg(long, global = true)]
    pub dtype: Option<DType>,
    /// Worker threads; profile accepts a comma-separated list.
    #[arg(long, global = true, value_delimiter = ',')]
    pub workers: Vec<usize>,
    /// Positions per sequential chunk; profile accepts a comma-separated list.
    #[arg(long = "chunk-size", global = true, value_delimiter = ',')]
    pub chunk_size: Vec<usize>,
    /// paragru, paralstm, ssm or custom (default paragru).
    #[arg(long, global = true)]
    pub cell: Option<CellKind>,
    #[arg(long, global = true, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Oracle suites; exit 1 if any tolerance is missed.
    Verify(VerifyArgs),
    /// Time the sequential unroll against the Newton solve.
    Profile(ProfileArgs),
    /// Newton residual per iteration for fresh or trained cells.
    NewtonTrace(TraceArgs),
    /// Train a single-layer model on a synthetic task.
    Train(TrainArgs),
}

#[derive(Args, Debug, Clone)]
pub struct VerifyArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,5,8,17,64,100,257,1000,4096")]
    pub lens: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1,4,16,64")]
    pub hidden: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub heads: usize,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    #[arg(long, default_value_t = 5)]
    pub n_its: usize,
    #[arg(long, default_value_t = 1000)]
    pub jacobian_points: usize,
    #[arg(long, default_value_t = 100)]
    pub gradient_configs: usize,
    #[arg(long, hide = true)]
    pub inject_fault: Option<cells::Fault>,
}

#[derive(Args, Debug, Clone)]
pub struct ProfileArgs {
    #[arg(long, value_delimiter = ',', default_value = "2,16,128,1024,4096")]
    pub lens: Vec<usize>,
    #[arg(long, default_value_t = 256)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 1)]
    pub batch: usize,
    #[arg(long, default_value_t = 5)]
    pub warmups: usize,
    #[arg(long, default_value_t = 20)]
    pub repeats: usize,
    #[arg(long, default_value_t = 3)]
    pub n_its: usize,
    /// Reject lengths whose buffers would exceed this many GiB.
    #[arg(long, default_value_t = 4.0)]
    pub max_gib: f64,
}

#[derive(Args, Debug, Clone)]
pub struct TraceArgs {
    #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
    pub lens: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    #[arg(long, default_value_t = 64)]
    pub input: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 8)]
    pub n_its: usize,
    /// Model checkpoint written by `train`; omit for fresh cells.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Parallel,
    Sequential,
}

#[derive(Args, Debug, Clone)]
pub struct TrainArgs {
    #[arg(long)]
    pub task: TaskKind,
    #[arg(long, default_value_t = 100)]
    pub len: usize,
    /// Number of seeds, starting at --seed.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// k of k-hop (default 2).
    #[arg(long)]
    pub hops: Option<usize>,
    /// n of keep-nth.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub vocab: Option<usize>,
    /// Override the task's default (on for keep-nth only).
    #[arg(long)]
    pub positional: Option<bool>,
    /// Override the task's default (on for mqar and k-hop).
    #[arg(long)]
    pub full_block: Option<bool>,
    /// Per-head norm clip of the state vectors (default 0.9, none for parity).
    #[arg(long, conflicts_with = "no_clip")]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub no_clip: bool,
    #[arg(long, default_value_t = 3000)]
    pub max_epochs: usize,
    #[arg(long)]
    pub max_steps: Option<usize>,
    #[arg(long, default_value_t = 10_000)]
    pub train_size: usize,
    #[arg(long, default_value_t = 10_000)]
    pub test_size: usize,
    /// Consecutive perfect training batches before stopping; 0 disables.
    #[arg(long, default_value_t = 20)]
    pub patience: usize,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub weight_decay: f64,
    #[arg(long, default_value_t = 16)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3)]
    pub n_its: usize,
    #[arg(long, value_enum, default_value_t = Mode::Parallel)]
    pub mode: Mode,
    #[arg(long)]
    pub stop_at: Option<f64>,
    #[arg(long)]
    pub min_accuracy: Option<f64>,
}

/// What every run echoes into `config.json` and `report.json`.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig<O: Serialize> {
    pub command: &'static str,
    pub seed: u64,
    pub dtype: DType,
    pub workers: Vec<usize>,
    pub chunk_size: Vec<usize>,
    pub cell: CellKind,
    pub options: O,
}

#[derive(Debug, Serialize)]
struct Report<'a, O: Serialize, R: Serialize> {
    config: &'a RunConfig<O>,
    passed: bool,
    result: &'a R,
}

/// Result of a completed command.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub passed: bool,
    pub dir: PathBuf,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.passed {
            EXIT_PASS
        } else {
            EXIT_FAIL
        }
    }
}

struct Resolved {
    workers: Vec<usize>,
    chunk_size: Vec<usize>,
}

fn resolve(common: &CommonArgs, grid: bool) -> Result<Resolved, CliError> {
    let default = ScanConfig::default();
    let workers = if common.workers.is_empty() { vec![default.workers] } else { common.workers.clone() };
    let chunk_size = if common.chunk_size.is_empty() { vec![default.chunk_size] } else { common.chunk_size.clone() };
    if !grid && (workers.len() > 1 || chunk_size.len() > 1) {
        return Err(CliError::Usage("only profile accepts lists for --workers and --chunk-size".into()));
    }
    if workers.contains(&0) || chunk_size.contains(&0) {
        return Err(CliError::Usage("--workers and --chunk-size must be >= 1".into()));
    }
    Ok(Resolved { workers, chunk_size })
}

fn scan_of(r: &Resolved) -> ScanConfig {
    ScanConfig { workers: r.workers[0], chunk_size: r.chunk_size[0], ..ScanConfig::default() }
}

fn seed_list(start: u64, count: u64) -> Vec<u64> {
    (0..count).map(|i| start.wrapping_add(i)).collect()
}

/// Writes the four artifacts and reports where they went.
fn finish<O: Serialize, R: Serialize, A: Record, B: Record>(
    dir: RunDir,
    config: &RunConfig<O>,
    passed: bool,
    result: &R,
    records: &[A],
    traces: &[B],
) -> Result<Outcome, CliError> {
    dir.write_csv("records.csv", records)?;
    dir.write_csv("trace.csv", traces)?;
    dir.write_json("report.json", &Report { config, passed, result })?;
    println!("{} {} -> {}", config.command, if passed { "PASS" } else { "FAIL" }, dir.path().display());
    Ok(Outcome { passed, dir: dir.path().to_path_buf() })
}

pub fn run(cli: Cli) -> Result<Outcome, CliError> {
    let c = &cli.common;
    let cell = c.cell.unwrap_or(CellKind::ParaGru);
    match &cli.command {
        Command::Verify(a) => {
            let r = resolve(c, false)?;
            let dtype = c.dtype.unwrap_or(DType::F64);
            let mut opts = verify::VerifyOptions::new(cell, dtype, scan_of(&r));
            opts.lens = a.lens.clone();
            opts.hidden = a.hidden.clone();
            opts.heads = a.heads;
            opts.batch = a.batch;
            opts.seeds = seed_list(c.seed, a.seeds);
            opts.n_its = a.n_its;
            opts.jacobian_points = a.jacobian_points;
            opts.gradient_configs = a.gradient_configs;
            opts.fault = a.inject_fault;
            opts.validate()?;
            let config = RunConfig { command: "verify", seed: c.seed, dtype, workers: r.workers, chunk_size: r.chunk_size, cell, options: opts };
            let dir = RunDir::create(&c.out)?;
            dir.write_json("config.json", &config)?;
            let summary = verify::run_verify(&config.options)?;
            for s in &summary.suites {
                let status = if s.passed { "PASS" } else { "FAIL" };
                println!(
                    "{status} {:<9} {} cases, max error {:.3e} (tolerance {:.0e})",
                    s.suite, s.cases, s.max_error, s.tolerance
                );
                for n in &s.notes {
                    eprintln!("  {}: {n}", s.suite);
                }
            }
            let records = summary.records(&config.options);
            finish(dir, &config, summary.passed, &summary, &records, &summary.traces)
        }
        Command::Profile(a) => {
            let r = resolve(c, true)?;
            let dtype = c.dtype.unwrap_or(DType::F32);
            let mut grid = Vec::new();
            for &w in &r.workers {
                for &k in &r.chunk_size {
                    grid.push(ScanConfig { workers: w, chunk_size: k, ..ScanConfig::default() });
                }
            }
            let mut opts = profile::ProfileOptions::new(cell, dtype, a.lens.clone(), grid);
            opts.d_model = a.d_model;
            opts.heads = a.heads;
            opts.batch = a.batch;
            opts.warmups = a.warmups;
            opts.repeats = a.repeats;
            opts.n_its = a.n_its;
            opts.seed = c.seed;
            if !(a.max_gib > 0.0) {
                return Err(CliError::Usage("--max-gib must be positive".into()));
            }
            opts.max_bytes = (a.max_gib * (1u64 << 30) as f64) as u64;
            opts.validate()?;
            let config = RunConfig { command: "profile", seed: c.seed, dtype, workers: r.workers, chunk_size: r.chunk_size, cell, options: opts };
            let dir = RunDir::create(&c.out)?;
            dir.write_json("config.json", &config)?;
            let (records, traces) = profile::run_profile(&config.options)?;
            println!("{:>6} {:>16} {:>6} {:>8} {:>12} {:>12} {:>8}", "L", "op", "chunk", "workers", "min_s", "median_s", "speedup");
            for rec in &records {
                println!(
                    "{:>6} {:>16} {:>6} {:>8} {:>12.4e} {:>12.4e} {:>8.2}",
                    rec.len,
                    rec.op,
                    rec.chunk_size.map_or("-".to_string(), |k| k.to_string()),
                    rec.workers,
                    rec.min_s,
                    rec.median_s,
                    rec.speedup
                );
            }
            finish(dir, &config, true, &records, &records, &traces)
        }
        Command::NewtonTrace(a) => {
            let r = resolve(c, false)?;
            let dtype = match (&a.checkpoint, c.dtype) {
                (_, Some(d)) => d,
                (Some(path), None) => {
                    read_checkpoint_header(path).map_err(|e| CliError::Run(format!("{}: {e}", path.display())))?.dtype
                }
                (None, None) => DType::F64,
            };
            let mut opts = trace::TraceOptions::new(cell, dtype, scan_of(&r));
            opts.lens = a.lens.clone();
            opts.batch = a.batch;
            opts.input = a.input;
            opts.hidden = a.hidden;
            opts.heads = a.heads;
            opts.n_its = a.n_its;
            opts.seed = c.seed;
            opts.checkpoint = a.checkpoint.clone();
            opts.validate()?;
            let config = RunConfig { command: "newton-trace", seed: c.seed, dtype, workers: r.workers, chunk_size: r.chunk_size, cell, options: opts };
            let dir = RunDir::create(&c.out)?;
            dir.write_json("config.json", &config)?;
            let report = trace::run_trace(&config.options)?;
            for curve in &report.curves {
                let shown: Vec<String> = curve.residuals.iter().map(|r| format!("{r:.2e}")).collect();
                println!("{} {} L {}: {}", report.cell.name(), report.state, curve.len, shown.join(" "));
            }
            let records = report.records(&config.options);
            finish(dir, &config, true, &report, &records, &records)
        }
        Command::Train(a) => {
            let r = resolve(c, false)?;
            let dtype = c.dtype.unwrap_or(DType::F32);
            let mut task = match a.task {
                TaskKind::KHop => TaskSpec::khop(a.hops.unwrap_or(2), a.len),
                kind => TaskSpec::default_for(kind, a.len),
            };
            task.seed = c.seed;
            if let Some(n) = a.n {
                task.n = n;
            }
            if let Some(v) = a.vocab {
                task.vocab = v;
            }
            task.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let mut model = ModelConfig::for_task(&task, cell);
            if let Some(p) = a.positional {
                model.positional = p;
            }
            if let Some(f) = a.full_block {
                model.full_block = f;
            }
            if a.no_clip {
                model.clip_norm = None;
            } else if let Some(v) = a.clip_norm {
                model.clip_norm = Some(v);
            }
            let newton = NewtonConfig { n_its: a.n_its, scan: scan_of(&r), ..NewtonConfig::training(dtype) };
            let config = TrainConfig {
                lr: a.lr,
                weight_decay: a.weight_decay,
                batch_size: a.batch_size,
                max_epochs: a.max_epochs,
                max_steps: a.max_steps,
                train_size: a.train_size,
                test_size: a.test_size,
                patience: a.patience,
                seed: c.seed,
                mode: match a.mode {
                    Mode::Parallel => ForwardMode::Parallel,
                    Mode::Sequential => ForwardMode::Sequential,
                },
                newton,
                ..TrainConfig::default()
            };
            config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
            let opts = train::TrainOptions {
                task,
                model,
                config,
                dtype,
                seeds: seed_list(c.seed, a.seeds),
                stop_at: a.stop_at,
                min_accuracy: a.min_accuracy,
            };
            let run_config = RunConfig { command: "train", seed: c.seed, dtype, workers: r.workers, chunk_size: r.chunk_size, cell, options: opts };
            let dir = RunDir::create(&c.out)?;
            dir.write_json("config.json", &run_config)?;
            let ckpt = dir.path().join("model.ckpt");
            let outcome = train::run_train(&run_config.options, Some(&ckpt))?;
            for d in &outcome.diverged {
                eprintln!("seed {} diverged at step {}: {}", d.seed, d.step, d.reason);
            }
            match outcome.best_seed {
                Some(s) => println!(
                    "best-of-{} test accuracy {:.4} (seed {s})",
                    run_config.options.seeds.len(),
                    outcome.best_accuracy
                ),
                None => println!("no run completed"),
            }
            let passed = outcome.passed(run_config.options.min_accuracy);
            let records = outcome.records(&run_config.options);
            let traces = outcome.traces(&run_config.options);
            finish(dir, &run_config, passed, &outcome, &records, &traces)
        }
    }
}
