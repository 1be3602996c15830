//! Interleaved decoding: generate until [RET], pause with retrieved
//! candidates, inject the chosen reference and resume.

mod export;

pub use export::{export, ExportFormat};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{MetadataIndex, SectionName, DEFAULT_INJECT_BUDGET};
use crate::index::{build_checksum, DenseIndex, IndexError, SearchResult};
use crate::model::{
    reference_content, Checkpoint, ModelError, ScholarLm, TokenId, Vocabulary, BOS, CITE_CLOSE, CITE_OPEN, EOS,
    REF_CLOSE, REF_OPEN, RET,
};

pub const DEFAULT_CANDIDATES: usize = 5;

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("session is paused at a retrieval token; resolve the citation first")]
    Paused,
    #[error("session is not paused at a retrieval token")]
    NotPaused,
    #[error("session is finished")]
    Finished,
    #[error("{ref_id} is not among the pending candidates {candidates:?}")]
    NotACandidate { ref_id: String, candidates: Vec<String> },
    #[error("unknown reference {0}")]
    UnknownRef(String),
    #[error("context is at the model limit of {0} tokens")]
    ContextLimit(usize),
    #[error("invalid session: {0}")]
    Invalid(String),
    #[error("index checksum {found} does not match checkpoint and metadata ({expected})")]
    StaleIndex { expected: String, found: String },
    #[error("unknown export format {0:?}; allowed: tex, bib")]
    Format(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Index(#[from] IndexError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Generating,
    PausedAtRet,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DecodeMode {
    Greedy,
    Temperature { temperature: f32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub max_new_tokens: usize,
    pub candidates: usize,
    pub inject_content: bool,
    pub inject_budget: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            max_new_tokens: 64,
            candidates: DEFAULT_CANDIDATES,
            inject_content: true,
            inject_budget: DEFAULT_INJECT_BUDGET,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), OrchestratorError> {
        if self.candidates == 0 {
            return Err(OrchestratorError::Invalid("candidate count must be at least 1".into()));
        }
        if let DecodeMode::Temperature { temperature } = self.mode {
            if !(temperature.is_finite() && temperature > 0.0) {
                return Err(OrchestratorError::Invalid(format!("temperature {temperature} must be positive")));
            }
        }
        Ok(())
    }
}

/// A retrieved reference as surfaced at a pause.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub ref_id: String,
    pub score: f32,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StopReason {
    Eos,
    Budget,
    ContextLimit,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "kebab-case")]
pub enum GenerationEvent {
    Token(String),
    RetrievalPause(Vec<Candidate>),
    CitationResolved(String),
    Done(StopReason),
}

impl GenerationEvent {
    /// One newline-terminated JSON line.
    pub fn to_ndjson(&self) -> String {
        let mut s = serde_json::to_string(self).expect("plain data");
        s.push('\n');
        s
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, Self::RetrievalPause(_) | Self::Done(_))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum CitationAction {
    Accept { ref_id: String },
    AcceptExternal { ref_id: String },
    Skip,
    Trigger,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub section: SectionName,
    pub context: Vec<TokenId>,
    /// Length of the BOS, title and abstract prefix.
    pub prompt_len: usize,
    pub status: Status,
    pub pending: Option<SearchResult>,
    pub accepted: Vec<String>,
    pub decode: DecodeConfig,
    pub rng_seed: u64,
    /// Number of sampling draws taken so far; keys the next draw.
    pub draws: u64,
}

impl SessionState {
    pub fn new(
        session_id: impl Into<String>,
        vocab: &Vocabulary,
        title: &str,
        abstract_text: Option<&str>,
        section: SectionName,
        decode: DecodeConfig,
        rng_seed: u64,
    ) -> Result<Self, OrchestratorError> {
        if title.trim().is_empty() {
            return Err(OrchestratorError::Invalid("title must not be empty".into()));
        }
        decode.validate()?;
        let mut context = vec![BOS];
        context.extend(vocab.encode(title));
        if let Some(a) = abstract_text {
            context.extend(vocab.encode(a));
        }
        Ok(Self {
            session_id: session_id.into(),
            section,
            prompt_len: context.len(),
            context,
            status: Status::Generating,
            pending: None,
            accepted: Vec::new(),
            decode,
            rng_seed,
            draws: 0,
        })
    }

    /// Checks the cross-field invariants after deserialization.
    pub fn validate(&self, vocab: &Vocabulary, metadata: &MetadataIndex) -> Result<(), OrchestratorError> {
        let bad = |m: String| Err(OrchestratorError::Invalid(m));
        if (self.status == Status::PausedAtRet) != self.pending.is_some() {
            return bad("pending candidates must be present exactly when paused".into());
        }
        if self.prompt_len == 0 || self.prompt_len > self.context.len() || self.context[0] != BOS {
            return bad("context must start with the BOS prompt".into());
        }
        if let Some(&t) = self.context.iter().find(|&&t| t as usize >= vocab.len()) {
            return bad(format!("token {t} outside the vocabulary"));
        }
        if let Some(r) = self.accepted.iter().find(|r| !metadata.contains(r)) {
            return bad(format!("accepted reference {r} not in metadata"));
        }
        self.decode.validate()
    }
}

/// Owned inference resources: checkpoint, its vocabulary, the metadata and a
/// dense index built from both.
pub struct Resources {
    pub model: ScholarLm,
    pub vocab: Vocabulary,
    pub metadata: MetadataIndex,
    pub index: DenseIndex,
    pub checkpoint_id: String,
}

impl Resources {
    /// Loads all three files and rejects an index built from a different
    /// checkpoint or metadata file.
    pub fn load(checkpoint: &Path, index: &Path, metadata: &Path) -> Result<Self, OrchestratorError> {
        let (ckpt, checkpoint_id) = Checkpoint::load(checkpoint)?;
        let metadata = MetadataIndex::load_jsonl(metadata).map_err(|e| OrchestratorError::Invalid(e.to_string()))?;
        let index = DenseIndex::load(index)?;
        let expected = build_checksum(&checkpoint_id, &metadata.metadata_id());
        if index.checksum() != expected {
            return Err(OrchestratorError::StaleIndex { expected, found: index.checksum().to_string() });
        }
        let r = Self { model: ckpt.model, vocab: ckpt.vocab, metadata, index, checkpoint_id };
        r.orchestrator()?;
        Ok(r)
    }

    pub fn orchestrator(&self) -> Result<Orchestrator<'_>, OrchestratorError> {
        Orchestrator::new(&self.model, &self.vocab, &self.metadata, &self.index)
    }
}

/// Read-only inference resources shared by every session.
pub struct Orchestrator<'a> {
    pub model: &'a ScholarLm,
    pub vocab: &'a Vocabulary,
    pub metadata: &'a MetadataIndex,
    pub index: &'a DenseIndex,
}

impl<'a> Orchestrator<'a> {
    pub fn new(
        model: &'a ScholarLm,
        vocab: &'a Vocabulary,
        metadata: &'a MetadataIndex,
        index: &'a DenseIndex,
    ) -> Result<Self, OrchestratorError> {
        if model.config().vocab_size != vocab.len() {
            return Err(OrchestratorError::Invalid(format!(
                "model vocab_size {} differs from vocabulary size {}",
                model.config().vocab_size,
                vocab.len()
            )));
        }
        if index.dim() != model.config().d_model {
            return Err(IndexError::Dimension { expected: index.dim(), got: model.config().d_model }.into());
        }
        Ok(Self { model, vocab, metadata, index })
    }

    pub fn step(&self, s: &mut SessionState, max_new_tokens: usize) -> Result<Vec<GenerationEvent>, OrchestratorError> {
        let mut out = Vec::new();
        self.step_with(s, max_new_tokens, |e| out.push(e.clone()))?;
        Ok(out)
    }

    /// Decodes up to `max_new_tokens`, passing each event to `emit` as it is
    /// produced. Returns the number of tokens sampled, [RET] included.
    pub fn step_with(
        &self,
        s: &mut SessionState,
        max_new_tokens: usize,
        mut emit: impl FnMut(&GenerationEvent),
    ) -> Result<usize, OrchestratorError> {
        match s.status {
            Status::PausedAtRet => return Err(OrchestratorError::Paused),
            Status::Done => {
                emit(&GenerationEvent::Done(StopReason::Finished));
                return Ok(0);
            }
            Status::Generating => {}
        }
        let limit = self.model.config().max_context;
        let mut sampled = 0;
        loop {
            if sampled == max_new_tokens {
                emit(&GenerationEvent::Done(StopReason::Budget));
                return Ok(sampled);
            }
            if s.context.len() >= limit {
                s.status = Status::Done;
                emit(&GenerationEvent::Done(StopReason::ContextLimit));
                return Ok(sampled);
            }
            let logits = self.model.last_logits(&s.context)?;
            let next = self.sample(s, &logits);
            sampled += 1;
            s.context.push(next);
            match next {
                RET => {
                    let event = self.pause(s)?;
                    emit(&event);
                    return Ok(sampled);
                }
                EOS => {
                    s.status = Status::Done;
                    emit(&GenerationEvent::Done(StopReason::Eos));
                    return Ok(sampled);
                }
                t => emit(&GenerationEvent::Token(self.vocab.token(t).unwrap_or_default().to_string())),
            }
        }
    }

    fn sample(&self, s: &mut SessionState, logits: &[f32]) -> TokenId {
        let allowed = (0..logits.len() as TokenId).filter(|&t| self.vocab.is_generatable(t));
        match s.decode.mode {
            DecodeMode::Greedy => {
                let mut best: Option<(TokenId, f32)> = None;
                for t in allowed {
                    let v = logits[t as usize];
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some((t, v));
                    }
                }
                best.expect("RET and EOS are always generatable").0
            }
            DecodeMode::Temperature { temperature } => {
                let ids: Vec<TokenId> = allowed.collect();
                let max = ids.iter().map(|&t| logits[t as usize]).fold(f32::NEG_INFINITY, f32::max);
                let weights: Vec<f64> =
                    ids.iter().map(|&t| (((logits[t as usize] - max) / temperature) as f64).exp()).collect();
                let total: f64 = weights.iter().sum();
                let mut rng = ChaCha8Rng::seed_from_u64(s.rng_seed);
                rng.set_stream(s.draws);
                s.draws += 1;
                let mut u = rng.random::<f64>() * total;
                for (&t, w) in ids.iter().zip(&weights) {
                    if u < *w {
                        return t;
                    }
                    u -= w;
                }
                *ids.last().expect("non-empty")
            }
        }
    }

    /// Context ends in RET: embed, search and record the candidates.
    fn pause(&self, s: &mut SessionState) -> Result<GenerationEvent, OrchestratorError> {
        let q = self.model.embed_query(&s.context)?;
        let result = self.index.search(&q, s.decode.candidates)?;
        let candidates = result
            .hits
            .iter()
            .map(|h| {
                let e = self.metadata.get(&h.ref_id).ok_or_else(|| OrchestratorError::UnknownRef(h.ref_id.clone()))?;
                Ok(Candidate {
                    ref_id: h.ref_id.clone(),
                    score: h.score,
                    title: e.title.clone(),
                    abstract_text: e.abstract_text.clone(),
                })
            })
            .collect::<Result<Vec<_>, OrchestratorError>>()?;
        s.status = Status::PausedAtRet;
        s.pending = Some(result);
        Ok(GenerationEvent::RetrievalPause(candidates))
    }

    pub fn resolve_citation(
        &self,
        s: &mut SessionState,
        action: &CitationAction,
    ) -> Result<Vec<GenerationEvent>, OrchestratorError> {
        match action {
            CitationAction::Accept { ref_id } => {
                let pending = s.pending.as_ref().ok_or(OrchestratorError::NotPaused)?;
                if pending.rank_of(ref_id).is_none() {
                    return Err(OrchestratorError::NotACandidate {
                        ref_id: ref_id.clone(),
                        candidates: pending.ids().into_iter().map(str::to_string).collect(),
                    });
                }
                self.insert_citation(s, ref_id)
            }
            CitationAction::AcceptExternal { ref_id } => {
                if s.status != Status::PausedAtRet {
                    return Err(OrchestratorError::NotPaused);
                }
                self.insert_citation(s, ref_id)
            }
            CitationAction::Skip => {
                if s.status != Status::PausedAtRet {
                    return Err(OrchestratorError::NotPaused);
                }
                debug_assert_eq!(s.context.last(), Some(&RET));
                s.context.pop();
                s.pending = None;
                s.status = Status::Generating;
                Ok(Vec::new())
            }
            CitationAction::Trigger => {
                match s.status {
                    Status::PausedAtRet => return Err(OrchestratorError::Paused),
                    Status::Done => return Err(OrchestratorError::Finished),
                    Status::Generating => {}
                }
                if s.context.len() >= self.model.config().max_context {
                    return Err(OrchestratorError::ContextLimit(self.model.config().max_context));
                }
                s.context.push(RET);
                match self.pause(s) {
                    Ok(e) => Ok(vec![e]),
                    Err(e) => {
                        s.context.pop();
                        Err(e)
                    }
                }
            }
        }
    }

    fn insert_citation(&self, s: &mut SessionState, ref_id: &str) -> Result<Vec<GenerationEvent>, OrchestratorError> {
        let entry = self.metadata.get(ref_id).ok_or_else(|| OrchestratorError::UnknownRef(ref_id.to_string()))?;
        let key = self.vocab.ref_key(ref_id).ok_or_else(|| OrchestratorError::UnknownRef(ref_id.to_string()))?;
        if s.decode.inject_content {
            s.context.push(REF_OPEN);
            s.context.extend(reference_content(self.vocab, entry, s.decode.inject_budget));
            s.context.push(REF_CLOSE);
        }
        s.context.extend([CITE_OPEN, key, CITE_CLOSE]);
        s.accepted.push(ref_id.to_string());
        s.pending = None;
        s.status = Status::Generating;
        Ok(vec![GenerationEvent::CitationResolved(ref_id.to_string())])
    }

    /// Automatic mode: accept the top candidate at every pause until EOS, the
    /// context limit, or `budget` sampled tokens.
    pub fn run_auto(&self, s: &mut SessionState, budget: usize) -> Result<Vec<GenerationEvent>, OrchestratorError> {
        let mut events = Vec::new();
        let mut remaining = budget;
        loop {
            let used = self.step_with(s, remaining, |e| events.push(e.clone()))?;
            remaining -= used;
            match events.last() {
                Some(GenerationEvent::RetrievalPause(c)) => {
                    let action = match c.first() {
                        Some(top) => CitationAction::Accept { ref_id: top.ref_id.clone() },
                        None => CitationAction::Skip,
                    };
                    events.extend(self.resolve_citation(s, &action)?);
                }
                _ => return Ok(events),
            }
        }
    }
}
