use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{top_k, IndexError, SearchResult};
use crate::model::{content_id, write_atomic, QueryEmbedding, RefEmbedding};

pub const INDEX_VERSION: &str = "scopilot-idx-v1";

const UNIT_TOL: f32 = 1e-5;

#[derive(Serialize, Deserialize)]
struct Header {
    dim: usize,
    count: usize,
    checksum: String,
    version: String,
}

/// Hash tying an index to the checkpoint and metadata it was built from.
pub fn build_checksum(checkpoint_id: &str, metadata_id: &str) -> String {
    content_id(format!("{checkpoint_id}\n{metadata_id}").as_bytes())
}

/// Exact full-scan cosine index over unit vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    dim: usize,
    ids: Vec<String>,
    rows: Vec<f32>,
    checksum: String,
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl DenseIndex {
    pub fn build(embeddings: &[RefEmbedding], checksum: impl Into<String>) -> Result<Self, IndexError> {
        let first = embeddings.first().ok_or(IndexError::Empty)?;
        let dim = first.vector.len();
        let mut seen = HashSet::with_capacity(embeddings.len());
        let mut rows = Vec::with_capacity(dim * embeddings.len());
        for e in embeddings {
            if e.vector.len() != dim {
                return Err(IndexError::Dimension { expected: dim, got: e.vector.len() });
            }
            if !seen.insert(e.ref_id.as_str()) {
                return Err(IndexError::DuplicateRef(e.ref_id.clone()));
            }
            let norm = dot(&e.vector, &e.vector).sqrt();
            if !((norm - 1.0).abs() <= UNIT_TOL) {
                return Err(IndexError::NotUnit { ref_id: e.ref_id.clone(), norm });
            }
            rows.extend_from_slice(&e.vector);
        }
        Ok(Self { dim, ids: embeddings.iter().map(|e| e.ref_id.clone()).collect(), rows, checksum: checksum.into() })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    pub fn vector(&self, ref_id: &str) -> Option<&[f32]> {
        self.ids.iter().position(|id| id == ref_id).map(|i| self.row(i))
    }

    pub fn search(&self, q: &QueryEmbedding, k: usize) -> Result<SearchResult, IndexError> {
        self.search_vector(&q.vector, k)
    }

    pub fn search_vector(&self, q: &[f32], k: usize) -> Result<SearchResult, IndexError> {
        if k == 0 {
            return Err(IndexError::ZeroK);
        }
        if q.len() != self.dim {
            return Err(IndexError::Dimension { expected: self.dim, got: q.len() });
        }
        if q.iter().any(|x| !x.is_finite()) {
            return Err(IndexError::NonFinite);
        }
        let scored: Vec<(f32, &str)> =
            self.ids.iter().enumerate().map(|(i, id)| (dot(q, self.row(i)), id.as_str())).collect();
        Ok(SearchResult { hits: top_k(scored, k), empty_query: false })
    }

    /// Header length (u64 LE), JSON header, f32 LE rows, then the id table as
    /// u32 LE length-prefixed UTF-8 strings.
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&Header {
            dim: self.dim,
            count: self.ids.len(),
            checksum: self.checksum.clone(),
            version: INDEX_VERSION.into(),
        })
        .expect("plain data");
        let mut out = Vec::with_capacity(8 + header.len() + self.rows.len() * 4);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IndexError> {
        let bad = |m: &str| IndexError::Format(m.to_string());
        let hlen = u64::from_le_bytes(bytes.get(..8).ok_or_else(|| bad("truncated"))?.try_into().expect("8")) as usize;
        let probe: serde_json::Value =
            serde_json::from_slice(bytes.get(8..8 + hlen).ok_or_else(|| bad("truncated header"))?)?;
        let version = probe.get("version").and_then(|v| v.as_str()).unwrap_or("");
        if version != INDEX_VERSION {
            return Err(IndexError::UnknownVersion(version.to_string()));
        }
        let h: Header = serde_json::from_value(probe)?;
        let mut at = 8 + hlen;
        let n = h.dim.checked_mul(h.count).ok_or_else(|| bad("size overflow"))?;
        let blob = bytes.get(at..at + 4 * n).ok_or_else(|| bad("truncated vectors"))?;
        let rows: Vec<f32> = blob.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4"))).collect();
        at += 4 * n;
        let mut ids = Vec::with_capacity(h.count);
        for _ in 0..h.count {
            let len = u32::from_le_bytes(
                bytes.get(at..at + 4).ok_or_else(|| bad("truncated id table"))?.try_into().expect("4"),
            ) as usize;
            at += 4;
            let s = bytes.get(at..at + len).ok_or_else(|| bad("truncated id"))?;
            ids.push(String::from_utf8(s.to_vec()).map_err(|_| bad("id is not UTF-8"))?);
            at += len;
        }
        if at != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(Self { dim: h.dim, ids, rows, checksum: h.checksum })
    }

    pub fn save(&self, path: &Path) -> Result<(), IndexError> {
        write_atomic(path, &self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, IndexError> {
        Self::from_bytes(&fs::read(path)?)
    }
}
