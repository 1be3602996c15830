//! Shared fixtures for the benchmarks.

use scopilot_core::corpus::{
    build_corpus, synth_corpus, MetadataIndex, SynthMode, TrainingExample, DEFAULT_INJECT_BUDGET,
};
use scopilot_core::model::{ModelConfig, ScholarLm, Vocabulary};

pub struct Fixture {
    pub vocab: Vocabulary,
    pub metadata: MetadataIndex,
    pub examples: Vec<TrainingExample>,
    pub model: ScholarLm,
}

/// Synonym-mode corpus with a freshly initialized desk-size model.
pub fn fixture(papers: usize, refs: usize) -> Fixture {
    let c = synth_corpus(42, papers, refs, SynthMode::Synonym).expect("synthetic corpus");
    let built = build_corpus(&c.sources, &c.metadata, 2, DEFAULT_INJECT_BUDGET).expect("corpus build");
    let model = ScholarLm::init(ModelConfig::desk(built.vocab.len()), 0).expect("model");
    Fixture { vocab: built.vocab, metadata: c.metadata, examples: built.examples, model }
}
