//! Dense cosine top-k and Okapi BM25 retrieval.

mod bm25;
mod dense;

pub use bm25::{bm25_search, Bm25Index, BM25_B, BM25_K1};
pub use dense::{build_checksum, DenseIndex, INDEX_VERSION};

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("cannot build an index from no entries")]
    Empty,
    #[error("duplicate reference id {0}")]
    DuplicateRef(String),
    #[error("dimension mismatch: index has {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("vector for {ref_id} has norm {norm}, expected unit norm")]
    NotUnit { ref_id: String, norm: f32 },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("non-finite query vector")]
    NonFinite,
    #[error("unsupported index version {0:?}")]
    UnknownVersion(String),
    #[error("malformed index file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub ref_id: String,
    pub score: f32,
}

/// Ranked hits: scores non-increasing, ties by ascending ref id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub hits: Vec<SearchHit>,
    /// Set when the query carried no terms.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub empty_query: bool,
}

impl SearchResult {
    pub fn ids(&self) -> Vec<&str> {
        self.hits.iter().map(|h| h.ref_id.as_str()).collect()
    }

    /// 1-based rank of `ref_id`, if present.
    pub fn rank_of(&self, ref_id: &str) -> Option<usize> {
        self.hits.iter().position(|h| h.ref_id == ref_id).map(|p| p + 1)
    }
}

/// Higher score first, then ascending id.
pub(crate) fn rank_order(a: (f32, &str), b: (f32, &str)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Exact top-k of `(score, id)` pairs: select the k best, then sort them.
pub(crate) fn top_k<'a>(mut scored: Vec<(f32, &'a str)>, k: usize) -> Vec<SearchHit> {
    let k = k.min(scored.len());
    if k == 0 {
        return Vec::new();
    }
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, |a, b| rank_order(*a, *b));
        scored.truncate(k);
    }
    scored.sort_unstable_by(|a, b| rank_order(*a, *b));
    scored.into_iter().map(|(score, id)| SearchHit { ref_id: id.to_string(), score }).collect()
}
