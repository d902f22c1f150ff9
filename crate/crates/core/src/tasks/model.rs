//! Single-layer evaluation models around one recurrent cell.
//!
//! Cell-only variant:
//!
//! ```text
//! e = embed(tok) (+ pe)  ->  u = rms(e)  ->  h = cell(u)  ->  v = rms(h)  ->  head(v)
//! ```
//!
//! Full block:
//!
//! ```text
//! e = embed(tok) (+ pe)  ->  u = rms(e)  ->  [x | z] = in_proj(u)
//! x -> silu(causal_conv(x)) -> cell -> y
//! r = out_proj(rms(y) ⊙ silu(z)) + s ⊙ e  ->  v = rms(r)  ->  head(v)
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::data::{TaskKind, TaskSpec};
use super::layers::*;
use crate::backprop::{backward_params, backward_states_sequential, backward_states_with_jacobians, BackpropError};
use crate::cells::{init_cell, sequential_from_drive, Cell, CellDims, CellError, CellInit, CellKind};
use crate::jacobians::StructuredJacobianSeq;
use crate::newton::{newton_with_jacobians, NewtonConfig, NewtonError, NewtonTrace};
use crate::params::{ParamError, ParamSet};
use crate::scan::{ScanError, ScanSolver};
use crate::tensor::{silu, silu_prime, Rng, Scalar, SequenceBatch, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("token {token} at index {index} outside vocabulary of {vocab}")]
    Token { token: u32, index: usize, vocab: usize },
    #[error("shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Cell(#[from] CellError),
    #[error(transparent)]
    Newton(#[from] NewtonError),
    #[error(transparent)]
    Backprop(#[from] BackpropError),
    #[error(transparent)]
    Scan(#[from] ScanError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// How the cell's recurrence is evaluated and differentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ForwardMode {
    /// Newton solve with the hybrid scan; backward by parallel reduction.
    Parallel,
    /// Left-to-right unroll; backward by the reverse loop.
    Sequential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    /// Cell hidden width (all heads).
    pub hidden: usize,
    pub heads: usize,
    pub cell: CellKind,
    /// Adds input projection, causal conv, gated norm and residual.
    pub full_block: bool,
    pub positional: bool,
    pub conv_kernel: usize,
    pub clip_norm: Option<f64>,
}

impl ModelConfig {
    /// Desk-scale model for a task: width 64, 4 heads; cell-only for Parity
    /// and KeepNth (with positional encoding for KeepNth), full block for
    /// MQAR and KHop; clipping at 0.9 except for Parity.
    pub fn for_task(spec: &TaskSpec, cell: CellKind) -> Self {
        let (full_block, positional, clip_norm) = match spec.kind {
            TaskKind::Parity => (false, false, None),
            TaskKind::KeepNth => (false, true, Some(0.9)),
            TaskKind::Mqar | TaskKind::KHop => (true, false, Some(0.9)),
        };
        ModelConfig {
            vocab: spec.vocab,
            d_model: 64,
            hidden: 64,
            heads: 4,
            cell,
            full_block,
            positional,
            conv_kernel: 4,
            clip_norm,
        }
    }

    pub fn cell_dims(&self) -> CellDims {
        let input = if self.full_block { self.hidden } else { self.d_model };
        CellDims::new(input, self.hidden, self.heads)
    }

    /// Width fed to the head.
    pub fn out_width(&self) -> usize {
        if self.full_block {
            self.d_model
        } else {
            self.hidden
        }
    }
}

/// Cell evaluation strategy plus its solver.
#[derive(Clone)]
pub struct Engine {
    pub mode: ForwardMode,
    pub newton: NewtonConfig,
    solver: ScanSolver,
}

impl Engine {
    pub fn new(mode: ForwardMode, newton: NewtonConfig) -> Result<Self, ModelError> {
        newton.validate()?;
        Ok(Engine { mode, newton, solver: ScanSolver::new(newton.scan)? })
    }

    pub fn solver(&self) -> &ScanSolver {
        &self.solver
    }
}

/// Gradients for the model's own parameters and for the cell's.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads<T> {
    pub model: ParamSet<T>,
    pub cell: ParamSet<T>,
}

/// Activations saved by [`SingleLayerModel::forward`] for the backward pass.
pub struct ForwardCache<T> {
    batch: usize,
    len: usize,
    tokens: Vec<u32>,
    e: Vec<T>,
    u: Vec<T>,
    inv_pre: Vec<T>,
    p: Vec<T>,
    xb: Vec<T>,
    q: Vec<T>,
    cell_in: SequenceBatch<T>,
    drive: SequenceBatch<T>,
    h: SequenceBatch<T>,
    /// Step Jacobians at `h` (parallel mode).
    jac: Option<StructuredJacobianSeq<T>>,
    y: Vec<T>,
    inv_gate: Vec<T>,
    ng: Vec<T>,
    o: Vec<T>,
    r: Vec<T>,
    inv_post: Vec<T>,
    v: Vec<T>,
    pub logits: SequenceBatch<T>,
    /// Present in parallel mode.
    pub trace: Option<NewtonTrace>,
}

#[derive(Clone)]
pub struct SingleLayerModel<T: Scalar> {
    config: ModelConfig,
    params: ParamSet<T>,
    cell: Box<dyn Cell<T>>,
}

impl<T: Scalar> std::fmt::Debug for SingleLayerModel<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SingleLayerModel")
            .field("config", &self.config)
            .field("params", &(self.params.len() + self.cell.params().len()))
            .finish()
    }
}

fn uniform_fill<T: Scalar>(v: &mut [T], fan_in: usize, rng: &mut Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    rng.fill_uniform(v, -bound, bound);
}

impl<T: Scalar> SingleLayerModel<T> {
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self, ModelError> {
        let c = config;
        if c.vocab < 2 || c.d_model == 0 || c.conv_kernel == 0 {
            return Err(ModelError::Shape(format!("invalid model config {c:?}")));
        }
        let ow = c.out_width();
        let mut p = ParamSet::new();
        p.add("embed", &[c.vocab, c.d_model], true)?;
        p.add("norm_pre", &[c.d_model], false)?;
        if c.full_block {
            p.add("in_proj", &[2 * c.hidden, c.d_model], true)?;
            p.add("conv_w", &[c.hidden, c.conv_kernel], true)?;
            p.add("conv_b", &[c.hidden], false)?;
            p.add("norm_gate", &[c.hidden], false)?;
            p.add("out_proj", &[c.d_model, c.hidden], true)?;
            p.add("res_scale", &[c.d_model], false)?;
        }
        p.add("norm_post", &[ow], false)?;
        p.add("head_w", &[c.vocab, ow], true)?;
        p.add("head_b", &[c.vocab], false)?;

        let mut cell_rng = rng.fork(1);
        let mut rng = rng.fork(0);
        rng.fill_normal(p.get_mut("embed")?, 1.0);
        for name in ["norm_pre", "norm_gate", "norm_post", "res_scale"] {
            if let Ok(v) = p.get_mut(name) {
                v.fill(T::one());
            }
        }
        if c.full_block {
            uniform_fill(p.get_mut("in_proj")?, c.d_model, &mut rng);
            uniform_fill(p.get_mut("conv_w")?, c.conv_kernel, &mut rng);
            uniform_fill(p.get_mut("out_proj")?, c.hidden, &mut rng);
        }
        uniform_fill(p.get_mut("head_w")?, ow, &mut rng);
        let cell = init_cell(c.cell, c.cell_dims(), CellInit { clip_norm: c.clip_norm }, &mut cell_rng)?;
        Ok(SingleLayerModel { config, params: p, cell })
    }

    /// Wraps an existing cell; the other parameters are initialized from `rng`.
    pub fn with_cell(config: ModelConfig, cell: Box<dyn Cell<T>>, rng: &mut Rng) -> Result<Self, ModelError> {
        if cell.dims() != config.cell_dims() {
            return Err(ModelError::Shape(format!(
                "cell dims {:?} do not match model {:?}",
                cell.dims(),
                config.cell_dims()
            )));
        }
        let mut m = Self::new(ModelConfig { cell: cell.kind(), ..config }, rng)?;
        m.cell = cell;
        Ok(m)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cell(&self) -> &dyn Cell<T> {
        self.cell.as_ref()
    }

    pub fn cell_mut(&mut self) -> &mut dyn Cell<T> {
        self.cell.as_mut()
    }

    pub fn num_params(&self) -> usize {
        self.params.len() + self.cell.params().len()
    }

    /// Model and cell parameters in one set (cell names prefixed `cell.`).
    pub fn all_params(&self) -> ParamSet<T> {
        let mut out = self.params.clone();
        let cell = self.cell.params().prefixed("cell.");
        for spec in cell.specs() {
            let i = out.add(&spec.name, &spec.shape, spec.decay).expect("distinct names");
            out.at_mut(i).copy_from_slice(cell.get(&spec.name).expect("present"));
        }
        out
    }

    /// Inverse of [`all_params`](Self::all_params).
    pub fn load_all_params(&mut self, all: &ParamSet<T>) -> Result<(), ModelError> {
        if all.len() != self.num_params() {
            return Err(ModelError::Shape(format!(
                "{} parameters given, model has {}",
                all.len(),
                self.num_params()
            )));
        }
        let n = self.params.len();
        self.params.data_mut().copy_from_slice(&all.data()[..n]);
        self.cell.params_mut().data_mut().copy_from_slice(&all.data()[n..]);
        Ok(())
    }

    pub fn zero_grads(&self) -> ModelGrads<T> {
        ModelGrads { model: self.params.zeros_like(), cell: self.cell.params().zeros_like() }
    }

    fn check_tokens(&self, tokens: &[u32], batch: usize, len: usize) -> Result<(), ModelError> {
        if batch == 0 || len == 0 || tokens.len() != batch * len {
            return Err(ModelError::Shape(format!(
                "{} tokens for batch {batch} x length {len}",
                tokens.len()
            )));
        }
        let vocab = self.config.vocab;
        if let Some((index, &token)) = tokens.iter().enumerate().find(|(_, &t)| t as usize >= vocab) {
            return Err(ModelError::Token { token, index, vocab });
        }
        Ok(())
    }

    #[allow(clippy::type_complexity)]
    fn run_cell(
        &self,
        drive: &SequenceBatch<T>,
        engine: &Engine,
    ) -> Result<(SequenceBatch<T>, Option<NewtonTrace>, Option<StructuredJacobianSeq<T>>), ModelError> {
        Ok(match engine.mode {
            ForwardMode::Parallel => {
                let (h, trace, jac) =
                    newton_with_jacobians(self.cell(), drive, &engine.newton, engine.solver(), None)?;
                (h, Some(trace), Some(jac))
            }
            ForwardMode::Sequential => (sequential_from_drive(self.cell(), drive)?, None, None),
        })
    }

    /// Logits `(batch, len, vocab)` and the cache for [`backward`](Self::backward).
    /// `tokens` is row-major `(batch, len)`.
    pub fn forward(
        &self,
        tokens: &[u32],
        batch: usize,
        len: usize,
        engine: &Engine,
    ) -> Result<ForwardCache<T>, ModelError> {
        self.check_tokens(tokens, batch, len)?;
        let c = &self.config;
        let (dm, hd, rows) = (c.d_model, c.hidden, batch * len);
        let p = &self.params;

        let embed = p.get("embed")?;
        let mut e = vec![T::zero(); rows * dm];
        for (row, &t) in e.chunks_exact_mut(dm).zip(tokens) {
            row.copy_from_slice(&embed[t as usize * dm..(t as usize + 1) * dm]);
        }
        if c.positional {
            let pe = positional_encoding::<T>(len, dm);
            for (i, row) in e.chunks_exact_mut(dm).enumerate() {
                let l = i % len;
                for (o, &v) in row.iter_mut().zip(&pe[l * dm..(l + 1) * dm]) {
                    *o += v;
                }
            }
        }
        let mut u = vec![T::zero(); rows * dm];
        let mut inv_pre = vec![T::zero(); rows];
        rmsnorm_forward(&e, dm, p.get("norm_pre")?, &mut u, &mut inv_pre);

        let (mut pz, mut xb, mut q) = (Vec::new(), Vec::new(), Vec::new());
        let cell_in = if c.full_block {
            pz = vec![T::zero(); rows * 2 * hd];
            linear_forward(&u, rows, p.get("in_proj")?, None, 2 * hd, dm, &mut pz);
            xb = vec![T::zero(); rows * hd];
            for (dst, src) in xb.chunks_exact_mut(hd).zip(pz.chunks_exact(2 * hd)) {
                dst.copy_from_slice(&src[..hd]);
            }
            q = vec![T::zero(); rows * hd];
            let mut xc = vec![T::zero(); rows * hd];
            causal_conv_forward(&xb, batch, len, hd, p.get("conv_w")?, p.get("conv_b")?, c.conv_kernel, &mut q, &mut xc);
            SequenceBatch::from_vec(batch, len, hd, xc)?
        } else {
            SequenceBatch::from_vec(batch, len, dm, u.clone())?
        };

        let drive = self.cell.drive(&cell_in)?;
        let (h, trace, jac) = self.run_cell(&drive, engine)?;
        let (sw, off) = (self.cell.state_width(), self.cell.output_offset());
        let mut y = vec![T::zero(); rows * hd];
        for (dst, src) in y.chunks_exact_mut(hd).zip(h.data().chunks_exact(sw)) {
            dst.copy_from_slice(&src[off..off + hd]);
        }

        let (mut inv_gate, mut ng, mut o, mut r) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let post_in: &[T] = if c.full_block {
            inv_gate = vec![T::zero(); rows];
            ng = vec![T::zero(); rows * hd];
            rmsnorm_forward(&y, hd, p.get("norm_gate")?, &mut ng, &mut inv_gate);
            o = vec![T::zero(); rows * hd];
            for i in 0..rows {
                for j in 0..hd {
                    o[i * hd + j] = ng[i * hd + j] * silu(pz[i * 2 * hd + hd + j]);
                }
            }
            r = vec![T::zero(); rows * dm];
            linear_forward(&o, rows, p.get("out_proj")?, None, dm, hd, &mut r);
            let s = p.get("res_scale")?;
            for (rr, er) in r.chunks_exact_mut(dm).zip(e.chunks_exact(dm)) {
                for j in 0..dm {
                    rr[j] += s[j] * er[j];
                }
            }
            &r
        } else {
            &y
        };
        let ow = c.out_width();
        let mut v = vec![T::zero(); rows * ow];
        let mut inv_post = vec![T::zero(); rows];
        rmsnorm_forward(post_in, ow, p.get("norm_post")?, &mut v, &mut inv_post);
        let mut logits = vec![T::zero(); rows * c.vocab];
        linear_forward(&v, rows, p.get("head_w")?, Some(p.get("head_b")?), c.vocab, ow, &mut logits);
        let logits = SequenceBatch::from_vec(batch, len, c.vocab, logits)?;

        Ok(ForwardCache {
            batch,
            len,
            tokens: tokens.to_vec(),
            e,
            u,
            inv_pre,
            p: pz,
            xb,
            q,
            cell_in,
            drive,
            h,
            jac,
            y,
            inv_gate,
            ng,
            o,
            r,
            inv_post,
            v,
            logits,
            trace,
        })
    }

    /// Logits only.
    pub fn logits(&self, tokens: &[u32], batch: usize, len: usize, engine: &Engine) -> Result<SequenceBatch<T>, ModelError> {
        Ok(self.forward(tokens, batch, len, engine)?.logits)
    }

    /// Gradients of a loss given `∂loss/∂logits`, using the same engine mode
    /// for the recurrence as the forward pass.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        dlogits: &[T],
        engine: &Engine,
    ) -> Result<ModelGrads<T>, ModelError> {
        let c = &self.config;
        let (dm, hd, ow) = (c.d_model, c.hidden, c.out_width());
        let rows = cache.batch * cache.len;
        if dlogits.len() != rows * c.vocab {
            return Err(ModelError::Shape(format!("{} logit gradients for {rows} rows", dlogits.len())));
        }
        let p = &self.params;
        let mut g = p.zeros_like();
        let gi = |name: &str| p.index_of(name).expect("registered");

        let mut dv = vec![T::zero(); rows * ow];
        {
            let (hw, hb) = (gi("head_w"), gi("head_b"));
            let mut dw = g.at(hw).to_vec();
            let mut db = g.at(hb).to_vec();
            linear_backward(&cache.v, rows, p.at(hw), c.vocab, ow, dlogits, Some(&mut dv), &mut dw, Some(&mut db));
            g.at_mut(hw).copy_from_slice(&dw);
            g.at_mut(hb).copy_from_slice(&db);
        }
        let mut d_post_in = vec![T::zero(); rows * ow];
        let post_in: &[T] = if c.full_block { &cache.r } else { &cache.y };
        let np = gi("norm_post");
        rmsnorm_backward(post_in, ow, p.at(np), &cache.inv_post, &dv, &mut d_post_in, g.at_mut(np));

        let mut de = vec![T::zero(); rows * dm];
        let dy = if c.full_block {
            let dr = d_post_in;
            let (s, ds) = (gi("res_scale"), p.at(gi("res_scale")));
            for i in 0..rows {
                for j in 0..dm {
                    de[i * dm + j] += ds[j] * dr[i * dm + j];
                    g.at_mut(s)[j] += dr[i * dm + j] * cache.e[i * dm + j];
                }
            }
            let mut d_o = vec![T::zero(); rows * hd];
            let op = gi("out_proj");
            linear_backward(&cache.o, rows, p.at(op), dm, hd, &dr, Some(&mut d_o), g.at_mut(op), None);
            let mut dng = vec![T::zero(); rows * hd];
            let mut dp = vec![T::zero(); rows * 2 * hd];
            for i in 0..rows {
                for j in 0..hd {
                    let z = cache.p[i * 2 * hd + hd + j];
                    dng[i * hd + j] = d_o[i * hd + j] * silu(z);
                    dp[i * 2 * hd + hd + j] = d_o[i * hd + j] * cache.ng[i * hd + j] * silu_prime(z);
                }
            }
            let mut dy = vec![T::zero(); rows * hd];
            let ngi = gi("norm_gate");
            rmsnorm_backward(&cache.y, hd, p.at(ngi), &cache.inv_gate, &dng, &mut dy, g.at_mut(ngi));
            // dp's x half is filled after the cell backward
            (dy, Some(dp))
        } else {
            (d_post_in, None)
        };
        let (dy, dp) = dy;

        let (sw, off) = (self.cell.state_width(), self.cell.output_offset());
        let mut gs = SequenceBatch::zeros(cache.batch, cache.len, sw)?;
        for (dst, src) in gs.data_mut().chunks_exact_mut(sw).zip(dy.chunks_exact(hd)) {
            dst[off..off + hd].copy_from_slice(src);
        }
        let cell = self.cell();
        let state_grads = match (&cache.jac, engine.mode) {
            (Some(jac), ForwardMode::Parallel) => backward_states_with_jacobians(jac, &gs, engine.solver())?,
            (None, ForwardMode::Parallel) => {
                return Err(ModelError::Shape("parallel backward needs a parallel forward".into()))
            }
            (_, ForwardMode::Sequential) => backward_states_sequential(cell, &cache.h, &cache.drive, &gs)?,
        };
        let bundle = engine
            .solver()
            .pool()
            .install(|| backward_params(cell, &cache.h, &cache.cell_in, &cache.drive, &state_grads))?;
        let d_cell_in = bundle.d_x;

        let mut du = vec![T::zero(); rows * dm];
        if let Some(mut dp) = dp {
            let mut dxb = vec![T::zero(); rows * hd];
            let (cw, cb) = (gi("conv_w"), gi("conv_b"));
            let mut dcw = vec![T::zero(); p.at(cw).len()];
            let mut dcb = vec![T::zero(); hd];
            causal_conv_backward(
                &cache.xb,
                cache.batch,
                cache.len,
                hd,
                p.at(cw),
                c.conv_kernel,
                &cache.q,
                d_cell_in.data(),
                &mut dxb,
                &mut dcw,
                &mut dcb,
            );
            g.at_mut(cw).copy_from_slice(&dcw);
            g.at_mut(cb).copy_from_slice(&dcb);
            for (dst, src) in dp.chunks_exact_mut(2 * hd).zip(dxb.chunks_exact(hd)) {
                dst[..hd].copy_from_slice(src);
            }
            let ip = gi("in_proj");
            linear_backward(&cache.u, rows, p.at(ip), 2 * hd, dm, &dp, Some(&mut du), g.at_mut(ip), None);
        } else {
            du.copy_from_slice(d_cell_in.data());
        }
        let npre = gi("norm_pre");
        rmsnorm_backward(&cache.e, dm, p.at(npre), &cache.inv_pre, &du, &mut de, g.at_mut(npre));
        let emb = g.at_mut(gi("embed"));
        for (row, &t) in de.chunks_exact(dm).zip(&cache.tokens) {
            let dst = &mut emb[t as usize * dm..(t as usize + 1) * dm];
            for (o, &v) in dst.iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok(ModelGrads { model: g, cell: bundle.d_params })
    }
}
