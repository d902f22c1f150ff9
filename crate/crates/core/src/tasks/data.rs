//! Seeded generators for the synthetic sequence tasks.
//!
//! Token layouts:
//!
//! - Parity: tokens in `{0, 1}`. The target at every position is the running
//!   parity of the prefix; only the final position is scored.
//! - KeepNth: tokens uniform in `[0, V)`. The final position's target is the
//!   `n`-th token (1-based); no other position is supervised.
//! - Mqar: token `0` is noise, keys are `[1, V/2)`, values `[V/2, V)`. The
//!   sequence opens with `pairs` key-value pairs (distinct keys), the rest is
//!   noise with `queries` key tokens placed at random positions. Each query
//!   position is supervised with its key's value.
//! - KHop: tokens uniform in `[0, V)`. Position `l` hops to one past the most
//!   recent earlier occurrence of its token; after `k` hops the token found
//!   there is the target. Positions where some hop has no earlier occurrence
//!   are masked.

use std::io::{BufRead, Write};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Rng;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid task spec: {0}")]
    Spec(String),
    #[error("dataset io: {0}")]
    Io(#[from] std::io::Error),
    #[error("dataset json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Parity,
    KeepNth,
    Mqar,
    KHop,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Parity => "parity",
            TaskKind::KeepNth => "keepnth",
            TaskKind::Mqar => "mqar",
            TaskKind::KHop => "khop",
        }
    }
}

impl FromStr for TaskKind {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "parity" => Ok(TaskKind::Parity),
            "keepnth" => Ok(TaskKind::KeepNth),
            "mqar" => Ok(TaskKind::Mqar),
            "khop" => Ok(TaskKind::KHop),
            other => Err(TaskError::Spec(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab: usize,
    pub len: usize,
    /// KeepNth position (1-based).
    pub n: usize,
    /// MQAR key-value pair count.
    pub pairs: usize,
    /// MQAR query count.
    pub queries: usize,
    /// KHop hop count.
    pub hops: usize,
    pub seed: u64,
}

impl TaskSpec {
    fn base(kind: TaskKind, vocab: usize, len: usize) -> Self {
        TaskSpec { kind, vocab, len, n: 0, pairs: 0, queries: 0, hops: 0, seed: 0 }
    }

    pub fn parity(len: usize) -> Self {
        Self::base(TaskKind::Parity, 2, len)
    }

    pub fn keep_nth(len: usize) -> Self {
        TaskSpec { n: 5, ..Self::base(TaskKind::KeepNth, 128, len) }
    }

    pub fn mqar(len: usize) -> Self {
        TaskSpec { pairs: 2, queries: 8, ..Self::base(TaskKind::Mqar, 128, len) }
    }

    /// Vocabulary 10 for one hop, 5 otherwise.
    pub fn khop(hops: usize, len: usize) -> Self {
        let vocab = if hops == 1 { 10 } else { 5 };
        TaskSpec { hops, ..Self::base(TaskKind::KHop, vocab, len) }
    }

    /// Default spec of each kind at length `len` (two hops for KHop).
    pub fn default_for(kind: TaskKind, len: usize) -> Self {
        match kind {
            TaskKind::Parity => Self::parity(len),
            TaskKind::KeepNth => Self::keep_nth(len),
            TaskKind::Mqar => Self::mqar(len),
            TaskKind::KHop => Self::khop(2, len),
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        TaskSpec { seed, ..self }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let bad = |m: String| Err(TaskError::Spec(m));
        if self.len == 0 {
            return bad("sequence length must be >= 1".into());
        }
        match self.kind {
            TaskKind::Parity if self.vocab != 2 => bad(format!("parity needs vocab 2, got {}", self.vocab)),
            TaskKind::KeepNth if self.vocab < 2 => bad("keepnth needs vocab >= 2".into()),
            TaskKind::KeepNth if self.n == 0 || self.n > self.len => {
                bad(format!("n = {} outside 1..={}", self.n, self.len))
            }
            TaskKind::Mqar => {
                let keys = (self.vocab / 2).saturating_sub(1);
                if self.pairs == 0 || self.queries == 0 {
                    bad("mqar needs pairs >= 1 and queries >= 1".into())
                } else if self.pairs > keys {
                    bad(format!("{} pairs but only {keys} distinct keys", self.pairs))
                } else if 2 * self.pairs + self.queries > self.len {
                    bad(format!(
                        "{} pairs and {} queries do not fit in length {}",
                        self.pairs, self.queries, self.len
                    ))
                } else {
                    Ok(())
                }
            }
            TaskKind::KHop if self.hops == 0 || self.vocab < 2 => {
                bad("khop needs hops >= 1 and vocab >= 2".into())
            }
            _ => Ok(()),
        }
    }
}

/// One sequence with per-position targets. `mask` selects positions in the
/// loss, `score_mask` those counted by accuracy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSample {
    pub tokens: Vec<u32>,
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
    pub score_mask: Vec<bool>,
}

impl TaskSample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// `count` samples; sample `i` depends only on `(spec, i)`.
pub fn generate(spec: &TaskSpec, count: usize) -> Result<Vec<TaskSample>, TaskError> {
    generate_range(spec, 0, count)
}

/// Samples with indices `start..start + count`.
pub fn generate_range(spec: &TaskSpec, start: usize, count: usize) -> Result<Vec<TaskSample>, TaskError> {
    spec.validate()?;
    if count == 0 {
        return Err(TaskError::Spec("count must be >= 1".into()));
    }
    let root = Rng::new(spec.seed);
    Ok((start..start + count)
        .into_par_iter()
        .map(|i| sample(spec, &mut root.fork(i as u64)))
        .collect())
}

fn sample(spec: &TaskSpec, rng: &mut Rng) -> TaskSample {
    let len = spec.len;
    let mut tokens = vec![0u32; len];
    match spec.kind {
        TaskKind::Parity | TaskKind::KeepNth | TaskKind::KHop => {
            for t in &mut tokens {
                *t = rng.below(spec.vocab) as u32;
            }
        }
        TaskKind::Mqar => {
            let half = spec.vocab / 2;
            let mut keys: Vec<u32> = (1..half as u32).collect();
            rng.shuffle(&mut keys);
            keys.truncate(spec.pairs);
            for (i, &k) in keys.iter().enumerate() {
                tokens[2 * i] = k;
                tokens[2 * i + 1] = (half + rng.below(spec.vocab - half)) as u32;
            }
            let mut slots: Vec<usize> = (2 * spec.pairs..len).collect();
            rng.shuffle(&mut slots);
            for &pos in &slots[..spec.queries] {
                tokens[pos] = keys[rng.below(spec.pairs)];
            }
        }
    }
    label(spec, &tokens).expect("generated tokens are well formed")
}

/// Targets and masks for a token sequence. For MQAR the query positions are
/// the nonzero tokens after the key-value prefix.
pub fn label(spec: &TaskSpec, tokens: &[u32]) -> Result<TaskSample, TaskError> {
    spec.validate()?;
    let len = spec.len;
    if tokens.len() != len {
        return Err(TaskError::Spec(format!("{} tokens for length {len}", tokens.len())));
    }
    if let Some(t) = tokens.iter().find(|&&t| t as usize >= spec.vocab) {
        return Err(TaskError::Spec(format!("token {t} outside vocabulary {}", spec.vocab)));
    }
    let mut s = TaskSample {
        tokens: tokens.to_vec(),
        targets: vec![0; len],
        mask: vec![false; len],
        score_mask: vec![false; len],
    };
    match spec.kind {
        TaskKind::Parity => {
            let mut p = 0;
            for l in 0..len {
                p ^= tokens[l];
                s.targets[l] = p;
                s.mask[l] = true;
            }
            s.score_mask[len - 1] = true;
        }
        TaskKind::KeepNth => {
            s.targets[len - 1] = tokens[spec.n - 1];
            s.mask[len - 1] = true;
            s.score_mask[len - 1] = true;
        }
        TaskKind::Mqar => {
            let prefix = 2 * spec.pairs;
            for l in prefix..len {
                if tokens[l] == 0 {
                    continue;
                }
                let value = (0..spec.pairs)
                    .find(|&i| tokens[2 * i] == tokens[l])
                    .map(|i| tokens[2 * i + 1])
                    .ok_or_else(|| TaskError::Spec(format!("query {} at {l} has no pair", tokens[l])))?;
                s.targets[l] = value;
                s.mask[l] = true;
                s.score_mask[l] = true;
            }
        }
        TaskKind::KHop => {
            // hop[l]: one past the most recent earlier occurrence of x_l
            let mut last = vec![usize::MAX; spec.vocab];
            let mut hop = vec![usize::MAX; len];
            for l in 0..len {
                let t = tokens[l] as usize;
                if last[t] != usize::MAX {
                    hop[l] = last[t] + 1;
                }
                last[t] = l;
            }
            for l in 0..len {
                let mut p = l;
                for _ in 0..spec.hops {
                    if p != usize::MAX {
                        p = hop[p];
                    }
                }
                if p != usize::MAX {
                    s.targets[l] = tokens[p];
                    s.mask[l] = true;
                    s.score_mask[l] = true;
                }
            }
        }
    }
    Ok(s)
}

/// One JSON object per sample.
pub fn write_jsonl<W: Write>(samples: &[TaskSample], mut out: W) -> Result<(), TaskError> {
    for s in samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<TaskSample>, TaskError> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
