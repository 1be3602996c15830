use std::collections::{BTreeSet, HashMap};

use super::{top_k, SearchResult};

pub const BM25_K1: f64 = 1.2;
pub const BM25_B: f64 = 0.75;

/// Okapi BM25 over pre-tokenized documents.
#[derive(Debug, Clone)]
pub struct Bm25Index {
    ids: Vec<String>,
    term_freqs: Vec<HashMap<String, u32>>,
    lengths: Vec<usize>,
    doc_freq: HashMap<String, usize>,
    avg_len: f64,
}

impl Bm25Index {
    pub fn new<I, S>(docs: I) -> Self
    where
        I: IntoIterator<Item = (S, Vec<String>)>,
        S: Into<String>,
    {
        let mut ids = Vec::new();
        let mut term_freqs = Vec::new();
        let mut lengths = Vec::new();
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        for (id, tokens) in docs {
            let mut tf: HashMap<String, u32> = HashMap::new();
            for t in &tokens {
                *tf.entry(t.clone()).or_default() += 1;
            }
            for t in tf.keys() {
                *doc_freq.entry(t.clone()).or_default() += 1;
            }
            ids.push(id.into());
            lengths.push(tokens.len());
            term_freqs.push(tf);
        }
        let avg_len =
            if lengths.is_empty() { 0.0 } else { lengths.iter().sum::<usize>() as f64 / lengths.len() as f64 };
        Self { ids, term_freqs, lengths, doc_freq, avg_len }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.ids.len() as f64;
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }

    /// BM25 score of document `i`, summed over distinct query terms.
    pub fn score(&self, i: usize, query: &BTreeSet<&str>) -> f64 {
        let len_norm = if self.avg_len > 0.0 { self.lengths[i] as f64 / self.avg_len } else { 0.0 };
        query
            .iter()
            .map(|t| {
                let tf = self.term_freqs[i].get(*t).copied().unwrap_or(0) as f64;
                if tf == 0.0 {
                    return 0.0;
                }
                self.idf(t) * tf * (BM25_K1 + 1.0) / (tf + BM25_K1 * (1.0 - BM25_B + BM25_B * len_norm))
            })
            .sum()
    }

    pub fn search(&self, query: &[String], k: usize) -> SearchResult {
        let terms: BTreeSet<&str> = query.iter().map(String::as_str).collect();
        if terms.is_empty() {
            return SearchResult { hits: Vec::new(), empty_query: true };
        }
        let scored: Vec<(f32, &str)> =
            (0..self.ids.len()).map(|i| (self.score(i, &terms) as f32, self.ids[i].as_str())).collect();
        SearchResult { hits: top_k(scored, k.max(1)), empty_query: false }
    }
}

/// One-shot BM25 over `(id, tokens)` documents.
pub fn bm25_search(docs: &[(String, Vec<String>)], query: &[String], k: usize) -> SearchResult {
    Bm25Index::new(docs.iter().cloned()).search(query, k)
}
