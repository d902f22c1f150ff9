//! Oracle suites: Newton forward against the sequential unroll, analytic step
//! Jacobians against central differences, parallel gradients against
//! differences of the sequential loss, the scan solvers against forward
//! substitution, and the single-iteration property of linear cells.

use pararnn::cells::{sequential_apply, Cell, CellDims, CellKind};
use pararnn::jacobians::StructuredJacobianSeq;
use pararnn::newton::{newton_forward, NewtonConfig};
use pararnn::scan::{solve_parallel_naive, solve_sequential, ScanConfig, ScanSolver, StepCounter};
use pararnn::{backward, DType, Rng, Scalar, SequenceBatch};
use serde::{Deserialize, Serialize};

use crate::cells::{build_cell, Fault, Faulty};
use crate::output::Record;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub cell: CellKind,
    /// Precision of the forward, scan and linear suites; the difference
    /// suites always run in f64.
    pub dtype: DType,
    pub lens: Vec<usize>,
    pub hidden: Vec<usize>,
    pub heads: usize,
    pub batch: usize,
    pub seeds: Vec<u64>,
    pub n_its: usize,
    /// Random (state, drive) points for the Jacobian suite.
    pub jacobian_points: usize,
    /// Small configurations (L <= 16, d <= 4) for the gradient suite.
    pub gradient_configs: usize,
    pub scan: ScanConfig,
    pub fault: Option<Fault>,
}

impl VerifyOptions {
    pub fn new(cell: CellKind, dtype: DType, scan: ScanConfig) -> Self {
        VerifyOptions {
            cell,
            dtype,
            lens: vec![1, 2, 3, 5, 8, 17, 64, 100, 257, 1000, 4096],
            hidden: vec![1, 4, 16, 64],
            heads: 1,
            batch: 4,
            seeds: (0..10).collect(),
            n_its: 5,
            jacobian_points: 1000,
            gradient_configs: 100,
            scan,
            fault: None,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        if self.lens.is_empty() || self.hidden.is_empty() || self.seeds.is_empty() {
            return usage("lens, hidden widths and seeds must be non-empty".into());
        }
        if self.lens.contains(&0) || self.batch == 0 || self.n_its == 0 || self.heads == 0 {
            return usage("lengths, batch, n_its and heads must be >= 1".into());
        }
        if let Some(d) = self.hidden.iter().find(|&&d| d == 0 || d % self.heads != 0) {
            return usage(format!("hidden width {d} must be a positive multiple of {} heads", self.heads));
        }
        self.scan.validate().map_err(|e| CliError::Usage(e.to_string()))
    }

    fn newton(&self, n_its: usize) -> NewtonConfig {
        NewtonConfig { n_its, tol: NewtonConfig::default_tol(self.dtype), early_stop: true, scan: self.scan }
    }

    fn dims(&self, d: usize) -> CellDims {
        CellDims::new(d, d, self.heads)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub suite: String,
    pub dtype: DType,
    pub cases: usize,
    pub failures: usize,
    /// Worst error over all cases; infinite when a case errored out.
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// First few failure descriptions.
    pub notes: Vec<String>,
}

const MAX_NOTES: usize = 5;

impl SuiteResult {
    fn new(suite: &str, dtype: DType, tolerance: f64) -> Self {
        SuiteResult {
            suite: suite.into(),
            dtype,
            cases: 0,
            failures: 0,
            max_error: 0.0,
            tolerance,
            passed: true,
            notes: Vec::new(),
        }
    }

    fn record(&mut self, err: f64, what: impl FnOnce() -> String) {
        self.cases += 1;
        if err.is_nan() || err > self.max_error {
            self.max_error = if err.is_nan() { f64::INFINITY } else { err };
        }
        if !(err <= self.tolerance) {
            self.failures += 1;
            self.passed = false;
            if self.notes.len() < MAX_NOTES {
                self.notes.push(format!("{}: error {err:e}", what()));
            }
        }
    }

    fn fail(&mut self, what: String) {
        self.record(f64::INFINITY, || what);
    }
}

/// Newton residual curve of one forward-suite case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub suite: String,
    pub cell: CellKind,
    pub dtype: DType,
    pub hidden: usize,
    pub len: usize,
    pub seed: u64,
    pub iteration: usize,
    pub residual: f64,
}

impl Record for TraceRow {
    const HEADER: &'static [&'static str] =
        &["suite", "cell", "dtype", "hidden", "len", "seed", "iteration", "residual"];
}

/// One row per suite in `records.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteRecord {
    pub suite: String,
    pub cell: CellKind,
    pub dtype: DType,
    pub workers: usize,
    pub chunk_size: usize,
    pub cases: usize,
    pub failures: usize,
    pub max_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Record for SuiteRecord {
    const HEADER: &'static [&'static str] = &[
        "suite", "cell", "dtype", "workers", "chunk_size", "cases", "failures", "max_error", "tolerance", "passed",
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifySummary {
    pub passed: bool,
    pub suites: Vec<SuiteResult>,
    #[serde(skip)]
    pub traces: Vec<TraceRow>,
}

impl VerifySummary {
    pub fn suite(&self, name: &str) -> Option<&SuiteResult> {
        self.suites.iter().find(|s| s.suite == name)
    }

    pub fn records(&self, opts: &VerifyOptions) -> Vec<SuiteRecord> {
        self.suites
            .iter()
            .map(|s| SuiteRecord {
                suite: s.suite.clone(),
                cell: opts.cell,
                dtype: s.dtype,
                workers: opts.scan.workers,
                chunk_size: opts.scan.chunk_size,
                cases: s.cases,
                failures: s.failures,
                max_error: s.max_error,
                tolerance: s.tolerance,
                passed: s.passed,
            })
            .collect()
    }
}

pub fn run_verify(opts: &VerifyOptions) -> Result<VerifySummary, CliError> {
    opts.validate()?;
    let mut traces = Vec::new();
    let mut suites = Vec::new();
    match opts.dtype {
        DType::F32 => {
            suites.push(forward_suite::<f32>(opts, &mut traces)?);
            suites.push(scan_suite::<f32>(opts)?);
        }
        DType::F64 => {
            suites.push(forward_suite::<f64>(opts, &mut traces)?);
            suites.push(scan_suite::<f64>(opts)?);
        }
    }
    suites.push(jacobian_suite(opts)?);
    suites.push(gradient_suite(opts)?);
    if opts.cell == CellKind::Ssm {
        suites.push(match opts.dtype {
            DType::F32 => linear_suite::<f32>(opts)?,
            DType::F64 => linear_suite::<f64>(opts)?,
        });
    }
    let passed = suites.iter().all(|s| s.passed);
    Ok(VerifySummary { passed, suites, traces })
}

fn cell_for<T: Scalar>(opts: &VerifyOptions, dims: CellDims, seed: u64) -> Result<Box<dyn Cell<T>>, CliError> {
    let cell = build_cell::<T>(opts.cell, dims, seed).map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(Faulty::wrap(cell, opts.fault))
}

fn inputs<T: Scalar>(batch: usize, len: usize, width: usize, seed: u64) -> SequenceBatch<T> {
    let mut rng = Rng::new(seed).fork(0x1000 + len as u64);
    SequenceBatch::randn(batch, len, width, 1.0, &mut rng).expect("positive dimensions")
}

/// Tolerance on the max-abs mismatch between Newton and the unroll.
pub fn forward_tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F64 => 1e-10,
        DType::F32 => 1e-5,
    }
}

fn forward_suite<T: Scalar>(opts: &VerifyOptions, traces: &mut Vec<TraceRow>) -> Result<SuiteResult, CliError> {
    let mut res = SuiteResult::new("forward", opts.dtype, forward_tolerance(opts.dtype));
    let cfg = opts.newton(opts.n_its);
    for &d in &opts.hidden {
        for &len in &opts.lens {
            for &seed in &opts.seeds {
                let cell = cell_for::<T>(opts, opts.dims(d), seed)?;
                let x = inputs::<T>(opts.batch, len, cell.input_width(), seed);
                let case = || format!("d {d}, L {len}, seed {seed}");
                let seq = match sequential_apply(cell.as_ref(), &x) {
                    Ok(h) => h,
                    Err(e) => {
                        res.fail(format!("{}: sequential {e}", case()));
                        continue;
                    }
                };
                match newton_forward(cell.as_ref(), &x, &cfg) {
                    Ok((h, trace)) => {
                        res.record(h.max_abs_diff(&seq).to_f64_lossy(), case);
                        for (k, &r) in trace.residual_per_iter.iter().enumerate() {
                            traces.push(TraceRow {
                                suite: "forward".into(),
                                cell: opts.cell,
                                dtype: opts.dtype,
                                hidden: d,
                                len,
                                seed,
                                iteration: k,
                                residual: r,
                            });
                        }
                    }
                    Err(e) => res.fail(format!("{}: {e}", case())),
                }
            }
        }
    }
    Ok(res)
}

/// Frobenius `|a - b| / max(|a|, |b|)`, 0 when both vanish.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Dense expansion of the analytic step Jacobian at one point.
pub fn analytic_jacobian(cell: &dyn Cell<f64>, h_prev: &[f64], drive: &[f64]) -> Vec<f64> {
    let (layout, d, w) = (cell.layout(), cell.jac_d(), cell.state_width());
    let mut j = vec![0.0; layout.payload_len(d)];
    let mut out = vec![0.0; w];
    cell.step_jacobian(h_prev, drive, &mut out, &mut j);
    let mut dense = vec![0.0; w * w];
    layout.structure::<f64>().to_dense(d, &j, &mut dense);
    dense
}

/// Central differences of the step in `h_prev`, step `1e-6`, row-major.
pub fn fd_jacobian_dense(cell: &dyn Cell<f64>, h_prev: &[f64], drive: &[f64]) -> Vec<f64> {
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

const JACOBIAN_TOL: f64 = 1e-6;
const GRADIENT_TOL: f64 = 1e-5;

/// Points cycle through the requested widths; parameters are redrawn from
/// N(0, 1) so the gates leave their initialization regime.
fn jacobian_suite(opts: &VerifyOptions) -> Result<SuiteResult, CliError> {
    let mut res = SuiteResult::new("jacobian", DType::F64, JACOBIAN_TOL);
    let base = opts.seeds[0];
    for p in 0..opts.jacobian_points as u64 {
        let d = opts.hidden[p as usize % opts.hidden.len()];
        let seed = base.wrapping_add(p);
        let mut cell = cell_for::<f64>(opts, opts.dims(d), seed)?;
        let mut rng = Rng::new(seed).fork(0x2000);
        rng.fill_normal(cell.params_mut().data_mut(), 1.0);
        let mut h = vec![0.0; cell.state_width()];
        rng.fill_normal(&mut h, 1.0);
        let mut drive = vec![0.0; cell.drive_width()];
        rng.fill_normal(&mut drive, 1.0);
        let a = analytic_jacobian(cell.as_ref(), &h, &drive);
        let f = fd_jacobian_dense(cell.as_ref(), &h, &drive);
        res.record(rel_err(&a, &f), || format!("d {d}, point {p}"));
    }
    Ok(res)
}

/// `Σ_l <w_l, h_l> + Σ_b |h_{b, L-1}|²` over the sequential unroll.
fn probe_loss(cell: &dyn Cell<f64>, x: &SequenceBatch<f64>, w: &SequenceBatch<f64>) -> Result<f64, CliError> {
    let h = sequential_apply(cell, x).map_err(|e| CliError::Run(e.to_string()))?;
    Ok(loss_of(&h, w))
}

fn loss_of(h: &SequenceBatch<f64>, w: &SequenceBatch<f64>) -> f64 {
    let (b, l, _) = h.shape();
    let lin: f64 = h.data().iter().zip(w.data()).map(|(a, c)| a * c).sum();
    let sq: f64 = (0..b).map(|bi| h.at(bi, l - 1).iter().map(|v| v * v).sum::<f64>()).sum();
    lin + sq
}

fn loss_grad(h: &SequenceBatch<f64>, w: &SequenceBatch<f64>) -> SequenceBatch<f64> {
    let (b, l, width) = h.shape();
    SequenceBatch::from_fn(b, l, width, |bi, li, d| {
        w.at(bi, li)[d] + if li == l - 1 { 2.0 * h.at(bi, li)[d] } else { 0.0 }
    })
    .expect("same shape as h")
}

/// Parameter and input gradients through Newton and the parallel backward
/// pass, against central differences (step `1e-6`) of the sequential loss.
fn gradient_suite(opts: &VerifyOptions) -> Result<SuiteResult, CliError> {
    let mut res = SuiteResult::new("gradient", DType::F64, GRADIENT_TOL);
    let base = opts.seeds[0];
    let eps = 1e-6;
    for c in 0..opts.gradient_configs as u64 {
        let seed = base.wrapping_add(c);
        let d = 1 + c as usize % 4;
        let len = 1 + c as usize % 16;
        let dims = if opts.cell == CellKind::Custom { CellDims::new(d, d, 1) } else { CellDims::new(2, d, 1) };
        let mut cell = cell_for::<f64>(opts, dims, seed)?;
        let mut rng = Rng::new(seed).fork(0x3000);
        rng.fill_normal(cell.params_mut().data_mut(), 0.7);
        let x = SequenceBatch::randn(2, len, cell.input_width(), 1.0, &mut rng).expect("positive dims");
        let w = SequenceBatch::randn(2, len, cell.state_width(), 1.0, &mut rng).expect("positive dims");
        let case = || format!("d {d}, L {len}, config {c}");
        let newton = NewtonConfig { n_its: len.max(3), ..NewtonConfig::verify(DType::F64) };
        let newton = NewtonConfig { scan: opts.scan, ..newton };
        let h = match newton_forward(cell.as_ref(), &x, &newton) {
            Ok((h, _)) => h,
            Err(e) => {
                res.fail(format!("{}: {e}", case()));
                continue;
            }
        };
        let bundle = match backward(cell.as_ref(), &h, &x, &loss_grad(&h, &w), &opts.scan) {
            Ok(b) => b,
            Err(e) => {
                res.fail(format!("{}: {e}", case()));
                continue;
            }
        };
        let mut probe = cell.clone();
        let n = cell.params().len();
        let mut fd = vec![0.0; n];
        for j in 0..n {
            let orig = cell.params().data()[j];
            probe.params_mut().data_mut()[j] = orig + eps;
            let lp = probe_loss(probe.as_ref(), &x, &w)?;
            probe.params_mut().data_mut()[j] = orig - eps;
            let lm = probe_loss(probe.as_ref(), &x, &w)?;
            probe.params_mut().data_mut()[j] = orig;
            fd[j] = (lp - lm) / (2.0 * eps);
        }
        let mut fdx = vec![0.0; x.data().len()];
        for (j, g) in fdx.iter_mut().enumerate() {
            let mut xp = x.clone();
            xp.data_mut()[j] += eps;
            let mut xm = x.clone();
            xm.data_mut()[j] -= eps;
            *g = (probe_loss(cell.as_ref(), &xp, &w)? - probe_loss(cell.as_ref(), &xm, &w)?) / (2.0 * eps);
        }
        let err = rel_err(bundle.d_params.data(), &fd).max(rel_err(bundle.d_x.data(), &fdx));
        res.record(err, case);
    }
    Ok(res)
}

fn ceil_log2(n: usize) -> u64 {
    if n <= 1 {
        0
    } else {
        (usize::BITS - (n - 1).leading_zeros()) as u64
    }
}

/// Naive and hybrid reductions against forward substitution on random
/// Jacobians (entries in `[-0.9, 0.9]`) of the cell's layout; the naive
/// reduction must also take `ceil(log2 L)` rounds.
fn scan_suite<T: Scalar>(opts: &VerifyOptions) -> Result<SuiteResult, CliError> {
    let tol = forward_tolerance(opts.dtype);
    let mut res = SuiteResult::new("scan", opts.dtype, tol);
    let solver = ScanSolver::new(opts.scan).map_err(|e| CliError::Usage(e.to_string()))?;
    let d = opts.hidden[0];
    let probe = cell_for::<T>(opts, opts.dims(d), opts.seeds[0])?;
    let (layout, jd, w) = (probe.layout(), probe.jac_d(), probe.state_width());
    let mut lens = vec![2, 3, 4, 8, 9, 1000];
    lens.extend(opts.lens.iter().copied());
    for len in lens {
        let mut rng = Rng::new(opts.seeds[0]).fork(0x4000 + len as u64);
        let jac = StructuredJacobianSeq::<T>::random(layout, opts.batch, len, jd, 0.9, &mut rng)
            .map_err(|e| CliError::Run(e.to_string()))?;
        let rhs = SequenceBatch::<T>::randn(opts.batch, len, w, 1.0, &mut rng).expect("positive dims");
        let reference = solve_sequential(&jac, &rhs).map_err(|e| CliError::Run(e.to_string()))?;
        let scale = reference.max_abs().to_f64_lossy().max(1.0);
        let counter = StepCounter::new();
        match solve_parallel_naive(&jac, &rhs, opts.scan.workers, Some(&counter)) {
            Ok(out) => {
                let err = out.max_abs_diff(&reference).to_f64_lossy() / scale;
                res.record(err, || format!("naive, L {len}"));
                if counter.parallel_depth() != ceil_log2(len) {
                    res.fail(format!("naive depth {} at L {len}", counter.parallel_depth()));
                }
            }
            Err(e) => res.fail(format!("naive, L {len}: {e}")),
        }
        match solver.hybrid(&jac, &rhs, None) {
            Ok(out) => res.record(out.max_abs_diff(&reference).to_f64_lossy() / scale, || format!("hybrid, L {len}")),
            Err(e) => res.fail(format!("hybrid, L {len}: {e}")),
        }
    }
    Ok(res)
}

/// Linear cells are solved exactly by one Newton step.
fn linear_suite<T: Scalar>(opts: &VerifyOptions) -> Result<SuiteResult, CliError> {
    let tol = match opts.dtype {
        DType::F64 => 1e-12,
        DType::F32 => 1e-5,
    };
    let mut res = SuiteResult::new("linear", opts.dtype, tol);
    let cfg = NewtonConfig { early_stop: false, ..opts.newton(1) };
    for &d in &opts.hidden {
        for &len in &opts.lens {
            let seed = opts.seeds[0];
            let cell = cell_for::<T>(opts, opts.dims(d), seed)?;
            let x = inputs::<T>(opts.batch, len, cell.input_width(), seed);
            match newton_forward(cell.as_ref(), &x, &cfg) {
                Ok((_, trace)) => res.record(trace.final_residual(), || format!("d {d}, L {len}")),
                Err(e) => res.fail(format!("d {d}, L {len}: {e}")),
            }
        }
    }
    Ok(res)
}
