//! Named flat parameter storage and the binary checkpoint format.
//!
//! Checkpoint layout (little-endian):
//!
//! ```text
//! u64 header_len | header_len bytes of JSON header | tensor data
//! ```
//!
//! The header lists `{name, shape, offset}` per tensor; `offset` counts
//! scalars from the start of the data section, whose element size follows
//! `dtype`.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{DType, Scalar};

pub const CHECKPOINT_FORMAT: &str = "pararnn-params";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("unknown parameter {0:?}")]
    Unknown(String),
    #[error("duplicate parameter {0:?}")]
    Duplicate(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint holds {found} data but {expected} was requested")]
    DType { expected: &'static str, found: &'static str },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Excluded from weight decay when false (biases, norm scales).
    #[serde(default = "yes")]
    pub decay: bool,
}

fn yes() -> bool {
    true
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.numel()
    }
}

/// Ordered collection of named tensors stored back to back in one buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    specs: Vec<ParamSpec>,
    data: Vec<T>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet { specs: Vec::new(), data: Vec::new() }
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a zero-filled tensor and returns its index.
    pub fn add(&mut self, name: &str, shape: &[usize], decay: bool) -> Result<usize, ParamError> {
        if self.index_of(name).is_some() {
            return Err(ParamError::Duplicate(name.to_string()));
        }
        let spec = ParamSpec {
            name: name.to_string(),
            shape: shape.to_vec(),
            offset: self.data.len(),
            decay,
        };
        self.data.resize(self.data.len() + spec.numel(), T::zero());
        self.specs.push(spec);
        Ok(self.specs.len() - 1)
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    pub fn spec(&self, name: &str) -> Result<&ParamSpec, ParamError> {
        self.index_of(name)
            .map(|i| &self.specs[i])
            .ok_or_else(|| ParamError::Unknown(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Result<&[T], ParamError> {
        let r = self.spec(name)?.range();
        Ok(&self.data[r])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut [T], ParamError> {
        let r = self.spec(name)?.range();
        Ok(&mut self.data[r])
    }

    /// Slice by index; panics when out of range.
    pub fn at(&self, i: usize) -> &[T] {
        &self.data[self.specs[i].range()]
    }

    pub fn at_mut(&mut self, i: usize) -> &mut [T] {
        let r = self.specs[i].range();
        &mut self.data[r]
    }

    /// Same layout, all zeros. Used for gradients and optimizer moments.
    pub fn zeros_like(&self) -> Self {
        ParamSet { specs: self.specs.clone(), data: vec![T::zero(); self.data.len()] }
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            specs: self.specs.clone(),
            data: self.data.iter().map(|&v| U::lit(v.to_f64_lossy())).collect(),
        }
    }

    /// Prefixes every name, e.g. to merge a cell's set into a model's.
    pub fn prefixed(&self, prefix: &str) -> Self {
        let mut out = self.clone();
        for s in &mut out.specs {
            s.name = format!("{prefix}{}", s.name);
        }
        out
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub dtype: DType,
    pub seed: u64,
    /// Free-form description of what the tensors belong to, e.g. the cell kind.
    pub kind: String,
    #[serde(default)]
    pub config: serde_json::Value,
    pub tensors: Vec<ParamSpec>,
}

pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    params: &ParamSet<T>,
    seed: u64,
    kind: &str,
    config: serde_json::Value,
) -> Result<(), ParamError> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.to_string(),
        version: CHECKPOINT_VERSION,
        dtype: T::DTYPE,
        seed,
        kind: kind.to_string(),
        config,
        tensors: params.specs.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| ParamError::Corrupt(e.to_string()))?;
    let mut buf = Vec::with_capacity(8 + json.len() + params.len() * T::DTYPE.size_of());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for &v in &params.data {
        v.write_le(&mut buf);
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<(CheckpointHeader, ParamSet<T>), ParamError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

/// Header of a checkpoint file, without reading the tensors.
pub fn read_checkpoint_header(path: &Path) -> Result<CheckpointHeader, ParamError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_header(&bytes).map(|(h, _)| h)
}

/// Header and the length of the prefix it occupies.
fn decode_header(bytes: &[u8]) -> Result<(CheckpointHeader, usize), ParamError> {
    let corrupt = |m: &str| ParamError::Corrupt(m.to_string());
    if bytes.len() < 8 {
        return Err(corrupt("truncated header length"));
    }
    let hlen = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body = bytes.get(8..8usize.saturating_add(hlen)).ok_or_else(|| corrupt("truncated header"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(body).map_err(|e| ParamError::Corrupt(e.to_string()))?;
    if header.format != CHECKPOINT_FORMAT || header.version != CHECKPOINT_VERSION {
        return Err(corrupt("unrecognized format or version"));
    }
    Ok((header, hlen))
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(CheckpointHeader, ParamSet<T>), ParamError> {
    let corrupt = |m: &str| ParamError::Corrupt(m.to_string());
    let (header, hlen) = decode_header(bytes)?;
    if header.dtype != T::DTYPE {
        return Err(ParamError::DType { expected: T::DTYPE.name(), found: header.dtype.name() });
    }
    let size = header.dtype.size_of();
    let data_bytes = &bytes[8 + hlen..];
    if data_bytes.len() % size != 0 {
        return Err(corrupt("data section is not a whole number of scalars"));
    }
    let n = data_bytes.len() / size;
    let mut expected = 0;
    for t in &header.tensors {
        if t.offset != expected {
            return Err(corrupt("tensor offsets are not contiguous"));
        }
        expected += t.numel();
    }
    if expected != n {
        return Err(corrupt("tensor sizes disagree with the data section"));
    }
    let data: Vec<T> = data_bytes.chunks_exact(size).map(T::read_le).collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(corrupt("non-finite parameter value"));
    }
    let params = ParamSet { specs: header.tensors.clone(), data };
    Ok((header, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.add("a", &[3], true).unwrap();
        p.add("B", &[2, 3], true).unwrap();
        p.add("b", &[2], false).unwrap();
        for (i, v) in p.data_mut().iter_mut().enumerate() {
            *v = i as f64 * 0.25 - 1.0;
        }
        p
    }

    #[test]
    fn layout_and_lookup() {
        let p = sample();
        assert_eq!(p.len(), 11);
        assert_eq!(p.spec("B").unwrap().offset, 3);
        assert_eq!(p.get("b").unwrap(), &[1.25, 1.5]);
        assert!(matches!(p.get("nope"), Err(ParamError::Unknown(_))));
        let mut q = p.clone();
        assert!(matches!(q.add("a", &[1], true), Err(ParamError::Duplicate(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = std::env::temp_dir().join(format!("pararnn-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p.bin");
        let p = sample();
        save_checkpoint(&path, &p, 42, "paragru", serde_json::json!({"d": 3})).unwrap();
        let (h, q) = load_checkpoint::<f64>(&path).unwrap();
        assert_eq!(q, p);
        assert_eq!(h.seed, 42);
        assert_eq!(h.kind, "paragru");
        assert!(matches!(load_checkpoint::<f32>(&path), Err(ParamError::DType { .. })));
        assert_eq!(read_checkpoint_header(&path).unwrap(), h);
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let p = sample();
        let dir = std::env::temp_dir().join(format!("pararnn-ckpt-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("p.bin");
        save_checkpoint(&path, &p, 1, "x", serde_json::Value::Null).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(decode_checkpoint::<f64>(&bytes[..5]).is_err());
        assert!(decode_checkpoint::<f64>(&bytes[..bytes.len() - 3]).is_err());
        let mut flipped = bytes.clone();
        flipped[10] = b'#';
        assert!(decode_checkpoint::<f64>(&flipped).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}
