use std::collections::BTreeSet;

use crate::corpus::TrainingExample;

/// One citation event inside a batch. Ref positions index [`Batch::refs`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySlot {
    pub example: usize,
    /// Index of the [RET] token in the (possibly truncated) example.
    pub position: usize,
    pub positive: usize,
    /// Other refs cited by the same paper.
    pub hard_negatives: Vec<usize>,
    /// Refs cited only by other papers in the batch.
    pub easy_negatives: Vec<usize>,
}

impl QuerySlot {
    pub fn negatives(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.hard_negatives.iter().chain(&self.easy_negatives).copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub examples: Vec<TrainingExample>,
    /// Distinct cited ref ids in the batch, sorted.
    pub refs: Vec<String>,
    pub queries: Vec<QuerySlot>,
    /// Set when the batch holds fewer than two papers, so no easy negatives exist.
    pub single_paper: bool,
}

impl Batch {
    pub fn ref_id(&self, i: usize) -> &str {
        &self.refs[i]
    }
}

/// Groups examples into a contrastive batch. Every example is truncated to
/// `max_context` tokens first; events that fall outside are dropped.
pub fn build_batch(examples: &[TrainingExample], max_context: usize) -> Batch {
    let examples: Vec<TrainingExample> = examples.iter().map(|e| e.truncated(max_context)).collect();
    let refs: Vec<String> =
        examples.iter().flat_map(|e| e.cited_refs().map(str::to_string)).collect::<BTreeSet<_>>().into_iter().collect();
    let idx = |id: &str| refs.binary_search_by(|r| r.as_str().cmp(id)).expect("collected above");
    let per_paper: Vec<BTreeSet<usize>> = examples.iter().map(|e| e.cited_refs().map(idx).collect()).collect();

    let mut queries = Vec::new();
    for (ei, e) in examples.iter().enumerate() {
        for ev in &e.events {
            let positive = idx(&ev.ref_id);
            let hard: BTreeSet<usize> = per_paper[ei].iter().copied().filter(|&r| r != positive).collect();
            let easy: Vec<usize> = per_paper
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != ei)
                .flat_map(|(_, s)| s.iter().copied())
                .filter(|r| *r != positive && !hard.contains(r))
                .collect::<BTreeSet<_>>()
                .into_iter()
                .collect();
            queries.push(QuerySlot {
                example: ei,
                position: ev.pos,
                positive,
                hard_negatives: hard.into_iter().collect(),
                easy_negatives: easy,
            });
        }
    }
    Batch { single_paper: examples.len() < 2, examples, refs, queries }
}
