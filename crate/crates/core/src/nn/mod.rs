//! Dense numeric core: tensors, a reverse-mode tape, Adam, and the raw
//! little-endian tensor blob used by checkpoints.

mod optim;
mod tape;
mod tensor;

pub use optim::{adam_step, clip_global_norm, OptState};
pub use tape::{softmax, softmax_cross_entropy, Tape, Var};
pub use tensor::{naive_matmul, Real, Tensor};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NnError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: expected a matrix, got shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },
    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("index {index} out of range (bound {bound})")]
    Index { index: usize, bound: usize },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("loss mask selects no positions")]
    DegenerateMask,
    #[error("{0}: no inputs")]
    Empty(&'static str),
    #[error("non-finite gradient in parameter {name}")]
    NonFinite { name: String },
    #[error("{0}")]
    Contract(String),
    #[error("tensor blob: {0}")]
    Blob(String),
}

/// Ordered, named parameter tensors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { names: Vec::new(), tensors: Vec::new() }
    }

    /// Appends a parameter and returns its index.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.tensors[i])
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }
}

/// One tensor's location inside a blob.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the blob.
    pub offset: usize,
}

/// Serializes tensors as raw row-major little-endian `f32` values.
pub fn encode_blob<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> (Vec<TensorEntry>, Vec<u8>) {
    let mut manifest = Vec::new();
    let mut bytes = Vec::new();
    for (name, t) in tensors {
        manifest.push(TensorEntry { name: name.to_string(), shape: t.shape().to_vec(), offset: bytes.len() });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    (manifest, bytes)
}

pub fn decode_blob(manifest: &[TensorEntry], bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>, NnError> {
    manifest
        .iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let end = e.offset + 4 * n;
            let raw = bytes.get(e.offset..end).ok_or_else(|| {
                NnError::Blob(format!("tensor {} needs bytes {}..{end}, blob has {}", e.name, e.offset, bytes.len()))
            })?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            Ok((e.name.clone(), Tensor::new(e.shape.clone(), data)?))
        })
        .collect()
}
