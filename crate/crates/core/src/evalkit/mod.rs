//! Masked-context Recall@k evaluation, retriever comparison reports and the
//! generation-quality judge client.

mod judge;
mod recall;

pub use judge::{
    parse_scores, render_prompt, JudgeClient, JudgeConfig, JudgeError, JudgeInput, JudgeScores, ParsedScores,
    JUDGE_PROMPT,
};
pub use recall::{
    compare_retrievers, make_masked_queries, recall_at_k, Bm25Retriever, DenseRetriever, MaskedQueries, MaskedQuery,
    RecallReport, Retriever, PUBLISHED_DENSE_RECALL,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no queries to evaluate")]
    NoQueries,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("{results} result lists for {gold} gold ids")]
    Misaligned { results: usize, gold: usize },
    #[error("no retrievers given")]
    NoRetrievers,
    #[error("index checksum {found} does not match checkpoint and metadata ({expected})")]
    StaleIndex { expected: String, found: String },
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Index(#[from] crate::index::IndexError),
}
