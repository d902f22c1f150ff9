//! Synthetic sequence tasks and the single-layer models trained on them.

mod data;
pub mod layers;
mod model;

pub use data::{generate, generate_range, label, read_jsonl, write_jsonl, TaskError, TaskKind, TaskSample, TaskSpec};
pub use model::{Engine, ForwardCache, ForwardMode, ModelConfig, ModelError, ModelGrads, SingleLayerModel};

use crate::tensor::{Scalar, SequenceBatch};

/// Samples of equal length packed row-major as `(batch, len)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub len: usize,
    pub tokens: Vec<u32>,
    pub targets: Vec<u32>,
    pub mask: Vec<bool>,
    pub score_mask: Vec<bool>,
}

impl Batch {
    pub fn from_samples(samples: &[&TaskSample]) -> Result<Self, TaskError> {
        let len = samples.first().map(|s| s.len()).unwrap_or(0);
        if len == 0 || samples.iter().any(|s| s.len() != len) {
            return Err(TaskError::Spec("batch needs non-empty samples of equal length".into()));
        }
        let mut b = Batch {
            batch: samples.len(),
            len,
            tokens: Vec::with_capacity(samples.len() * len),
            targets: Vec::with_capacity(samples.len() * len),
            mask: Vec::with_capacity(samples.len() * len),
            score_mask: Vec::with_capacity(samples.len() * len),
        };
        for s in samples {
            b.tokens.extend_from_slice(&s.tokens);
            b.targets.extend_from_slice(&s.targets);
            b.mask.extend_from_slice(&s.mask);
            b.score_mask.extend_from_slice(&s.score_mask);
        }
        Ok(b)
    }
}

/// Correct argmax predictions over selected positions: `(hits, count)`.
/// Ties go to the lowest index.
pub fn accuracy_counts<T: Scalar>(
    logits: &SequenceBatch<T>,
    targets: &[u32],
    mask: &[bool],
) -> Result<(usize, usize), TaskError> {
    let (b, l, v) = logits.shape();
    if targets.len() != b * l || mask.len() != b * l {
        return Err(TaskError::Spec(format!(
            "logits cover {} positions, targets {} and mask {}",
            b * l,
            targets.len(),
            mask.len()
        )));
    }
    let mut hits = 0;
    let mut count = 0;
    for (i, row) in logits.data().chunks_exact(v).enumerate() {
        if mask[i] {
            count += 1;
            if layers::argmax(row) == targets[i] as usize {
                hits += 1;
            }
        }
    }
    Ok((hits, count))
}

/// Fraction of correct argmax predictions over unmasked positions.
pub fn accuracy<T: Scalar>(logits: &SequenceBatch<T>, targets: &[u32], mask: &[bool]) -> Result<f64, TaskError> {
    let (hits, count) = accuracy_counts(logits, targets, mask)?;
    if count == 0 {
        return Err(TaskError::Spec("accuracy over an empty mask".into()));
    }
    Ok(hits as f64 / count as f64)
}
