use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::corpus::{MetadataIndex, TrainingExample};
use crate::index::{build_checksum, Bm25Index, DenseIndex, SearchResult};
use crate::model::{is_terminator, tokenize, ScholarLm, TokenId, Vocabulary, RET};

/// Published full-scale recall of the jointly trained retriever, shown in
/// report legends only: (k, recall).
pub const PUBLISHED_DENSE_RECALL: [(usize, f64); 2] = [(1, 0.401), (10, 0.648)];

/// One held-out citation event with everything before it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedQuery {
    pub paper_id: String,
    pub event_index: usize,
    /// Tokens strictly before the event's [RET].
    pub context: Vec<TokenId>,
    /// Text after the last sentence terminator before the event.
    pub last_sentence: String,
    pub gold_ref_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskedQueries {
    pub queries: Vec<MaskedQuery>,
    /// Events at position 0, which have no context.
    pub skipped: usize,
}

pub fn make_masked_queries(examples: &[TrainingExample], vocab: &Vocabulary) -> MaskedQueries {
    let mut out = MaskedQueries::default();
    for ex in examples {
        for (i, ev) in ex.events.iter().enumerate() {
            if ev.pos == 0 {
                out.skipped += 1;
                continue;
            }
            let context = ex.tokens[..ev.pos].to_vec();
            let start = context.iter().rposition(|&t| vocab.token(t).is_some_and(is_terminator)).map_or(0, |p| p + 1);
            out.queries.push(MaskedQuery {
                paper_id: ex.paper_id.clone(),
                event_index: i,
                last_sentence: vocab.detokenize(&context[start..]),
                context,
                gold_ref_id: ev.ref_id.clone(),
            });
        }
    }
    out
}

/// Mean over queries of whether the gold id is among the first `k` results.
pub fn recall_at_k<S: AsRef<str>>(ranked: &[Vec<S>], gold: &[S], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if ranked.len() != gold.len() {
        return Err(EvalError::Misaligned { results: ranked.len(), gold: gold.len() });
    }
    if gold.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let hits = ranked.iter().zip(gold).filter(|(r, g)| r.iter().take(k).any(|x| x.as_ref() == g.as_ref())).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// A ranking backend for masked queries.
pub trait Retriever {
    fn name(&self) -> &str;
    fn retrieve(&self, query: &MaskedQuery, k: usize) -> Result<SearchResult, EvalError>;
    /// Fails when the backend was built from different artifacts than it is used with.
    fn check(&self) -> Result<(), EvalError> {
        Ok(())
    }
    fn corpus_size(&self) -> usize;
}

/// Queries are embedded at a [RET] appended to the full masked context,
/// keeping the most recent tokens when the context is over the model limit.
pub struct DenseRetriever<'a> {
    pub model: &'a ScholarLm,
    pub index: &'a DenseIndex,
    /// Checksum the index must carry: derived from the checkpoint and metadata ids.
    pub expected_checksum: String,
}

impl<'a> DenseRetriever<'a> {
    pub fn new(model: &'a ScholarLm, index: &'a DenseIndex, checkpoint_id: &str, metadata_id: &str) -> Self {
        Self { model, index, expected_checksum: build_checksum(checkpoint_id, metadata_id) }
    }

    pub fn query_tokens(&self, context: &[TokenId]) -> Vec<TokenId> {
        let keep = self.model.config().max_context - 1;
        let start = context.len().saturating_sub(keep);
        let mut q = context[start..].to_vec();
        q.push(RET);
        q
    }
}

impl Retriever for DenseRetriever<'_> {
    fn name(&self) -> &str {
        "dense"
    }

    fn retrieve(&self, query: &MaskedQuery, k: usize) -> Result<SearchResult, EvalError> {
        let q = self.model.embed_query(&self.query_tokens(&query.context))?;
        Ok(self.index.search(&q, k)?)
    }

    fn check(&self) -> Result<(), EvalError> {
        if self.index.checksum() != self.expected_checksum {
            return Err(EvalError::StaleIndex {
                expected: self.expected_checksum.clone(),
                found: self.index.checksum().to_string(),
            });
        }
        Ok(())
    }

    fn corpus_size(&self) -> usize {
        self.index.len()
    }
}

/// BM25 over reference titles + abstracts, queried with the last sentence.
pub struct Bm25Retriever {
    index: Bm25Index,
}

impl Bm25Retriever {
    pub fn new(metadata: &MetadataIndex) -> Self {
        Self {
            index: Bm25Index::new(
                metadata
                    .entries()
                    .iter()
                    .map(|e| (e.ref_id.clone(), tokenize(&format!("{} {}", e.title, e.abstract_text)))),
            ),
        }
    }
}

impl Retriever for Bm25Retriever {
    fn name(&self) -> &str {
        "bm25"
    }

    fn retrieve(&self, query: &MaskedQuery, k: usize) -> Result<SearchResult, EvalError> {
        Ok(self.index.search(&tokenize(&query.last_sentence), k))
    }

    fn corpus_size(&self) -> usize {
        self.index.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    /// Retriever name → k → recall. Columns keep the order retrievers were given in.
    pub recall: BTreeMap<String, BTreeMap<usize, f64>>,
    pub order: Vec<String>,
    pub ks: Vec<usize>,
    pub queries: usize,
    pub skipped: usize,
}

impl RecallReport {
    pub fn get(&self, retriever: &str, k: usize) -> Option<f64> {
        self.recall.get(retriever)?.get(&k).copied()
    }

    /// `{retriever → {k → recall}}`.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.recall).expect("plain data") + "\n"
    }

    /// One row per k, one column per retriever.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k");
        for r in &self.order {
            out.push(',');
            out.push_str(r);
        }
        out.push('\n');
        for k in &self.ks {
            out.push_str(&k.to_string());
            for r in &self.order {
                out.push_str(&format!(",{:.6}", self.recall[r][k]));
            }
            out.push('\n');
        }
        out
    }

    pub fn render(&self) -> String {
        let mut out = format!("{:<8}", "k");
        for r in &self.order {
            out.push_str(&format!("{r:>10}"));
        }
        out.push('\n');
        for k in &self.ks {
            out.push_str(&format!("{k:<8}"));
            for r in &self.order {
                out.push_str(&format!("{:>9.1}%", 100.0 * self.recall[r][k]));
            }
            out.push('\n');
        }
        out.push_str(&format!("{} queries, {} skipped (event at position 0)\n", self.queries, self.skipped));
        out.push_str("published full-scale dense recall (display only, not reproduced here):");
        for (k, r) in PUBLISHED_DENSE_RECALL {
            out.push_str(&format!(" @{k} {:.1}%", 100.0 * r));
        }
        out.push('\n');
        out
    }

    /// True when every retriever's column is non-decreasing in k.
    pub fn is_monotone(&self) -> bool {
        self.recall.values().all(|col| {
            let v: Vec<f64> = col.values().copied().collect();
            v.windows(2).all(|w| w[0] <= w[1])
        })
    }
}

/// Recall@k for each retriever over the same queries.
pub fn compare_retrievers(
    queries: &MaskedQueries,
    retrievers: &[&dyn Retriever],
    ks: &[usize],
) -> Result<RecallReport, EvalError> {
    if retrievers.is_empty() {
        return Err(EvalError::NoRetrievers);
    }
    if queries.queries.is_empty() {
        return Err(EvalError::NoQueries);
    }
    let mut ks: Vec<usize> = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    if ks.first() == Some(&0) || ks.is_empty() {
        return Err(EvalError::ZeroK);
    }
    let depth = *ks.last().expect("non-empty");
    let gold: Vec<&str> = queries.queries.iter().map(|q| q.gold_ref_id.as_str()).collect();
    let mut recall = BTreeMap::new();
    let mut order = Vec::new();
    for r in retrievers {
        r.check()?;
        let ranked: Vec<Vec<String>> = queries
            .queries
            .iter()
            .map(|q| r.retrieve(q, depth).map(|res| res.hits.into_iter().map(|h| h.ref_id).collect()))
            .collect::<Result<_, _>>()?;
        let ranked_refs: Vec<Vec<&str>> = ranked.iter().map(|v| v.iter().map(String::as_str).collect()).collect();
        let mut col = BTreeMap::new();
        for &k in &ks {
            col.insert(k, recall_at_k(&ranked_refs, &gold, k)?);
        }
        let mut name = r.name().to_string();
        if recall.contains_key(&name) {
            name = format!("{name}#{}", order.len() + 1);
        }
        order.push(name.clone());
        recall.insert(name, col);
    }
    Ok(RecallReport { recall, order, ks, queries: queries.queries.len(), skipped: queries.skipped })
}
