//! Checkpoint file: `u64` little-endian header length, the JSON header
//! (version, model config, vocabulary, tensor manifest, optional training
//! state), then the raw tensor blob.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::transformer::{ModelConfig, ScholarLm};
use super::vocab::Vocabulary;
use super::ModelError;
use crate::nn::{decode_blob, encode_blob, ParamSet, TensorEntry};

pub const CHECKPOINT_VERSION: &str = "scopilot-ckpt-v1";

#[derive(Serialize, Deserialize)]
struct Header {
    version: String,
    config: ModelConfig,
    vocab: Vocabulary,
    tensors: Vec<TensorEntry>,
    /// Count of leading manifest entries that are model parameters; the rest
    /// are auxiliary tensors such as optimizer moments.
    model_tensors: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_state: Option<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ScholarLm,
    pub vocab: Vocabulary,
    /// Extra tensors stored alongside the weights (e.g. Adam moments).
    pub aux: ParamSet,
    pub train_state: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn new(model: ScholarLm, vocab: Vocabulary) -> Self {
        Self { model, vocab, aux: ParamSet::new(), train_state: None }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, ModelError> {
        let all = self.model.params().iter().chain(self.aux.iter());
        let (manifest, blob) = encode_blob(all);
        let header = Header {
            version: CHECKPOINT_VERSION.to_string(),
            config: *self.model.config(),
            vocab: self.vocab.clone(),
            tensors: manifest,
            model_tensors: self.model.params().len(),
            train_state: self.train_state.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(8 + json.len() + blob.len());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |m: &str| ModelError::Checkpoint(m.to_string());
        let len_bytes: [u8; 8] =
            bytes.get(..8).ok_or_else(|| bad("truncated length prefix"))?.try_into().expect("8 bytes");
        let hlen = u64::from_le_bytes(len_bytes) as usize;
        let json = bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?;
        // Check the version before interpreting the rest of the header.
        let probe: serde_json::Value = serde_json::from_slice(json)?;
        let version = probe.get("version").and_then(|v| v.as_str()).unwrap_or("");
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::UnknownVersion(version.to_string()));
        }
        let header: Header = serde_json::from_value(probe)?;
        if header.config.vocab_size != header.vocab.len() {
            return Err(bad("config vocab_size disagrees with vocabulary"));
        }
        let tensors = decode_blob(&header.tensors, &bytes[8 + hlen..])?;
        let mut params = ParamSet::new();
        let mut aux = ParamSet::new();
        for (i, (name, t)) in tensors.into_iter().enumerate() {
            if i < header.model_tensors {
                params.push(name, t);
            } else {
                aux.push(name, t);
            }
        }
        Ok(Self {
            model: ScholarLm::from_params(header.config, params)?,
            vocab: header.vocab,
            aux,
            train_state: header.train_state,
        })
    }

    /// Writes to a temporary sibling then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<String, ModelError> {
        let bytes = self.to_bytes()?;
        write_atomic(path, &bytes)?;
        Ok(content_id(&bytes))
    }

    /// Loads a checkpoint and returns it with its content id.
    pub fn load(path: &Path) -> Result<(Self, String), ModelError> {
        let bytes = fs::read(path)?;
        let ckpt = Self::from_bytes(&bytes)?;
        Ok((ckpt, content_id(&bytes)))
    }
}

/// Hex SHA-256 of a byte string; identifies checkpoints and metadata files.
pub fn content_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Temp-file-plus-rename write so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp-{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
