use std::fmt;

use serde::{Deserialize, Serialize};

use super::latex::Inline;
use super::metadata::MetadataIndex;
use super::record::PaperRecord;
use super::CorpusError;
use crate::model::{reference_content, TokenId, Vocabulary, BOS, CITE_CLOSE, CITE_OPEN, EOS, REF_CLOSE, REF_OPEN, RET};

/// Default token budget for injected reference content (title + abstract).
pub const DEFAULT_INJECT_BUDGET: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CitationEvent {
    /// Index of the [RET] token.
    pub pos: usize,
    pub ref_id: String,
}

/// A tokenized paper ready for joint training.
///
/// `loss_mask[t]` says whether token t is a prediction target. Injected
/// reference spans are half-open `[start, end)` ranges covering
/// `REF_OPEN ... REF_CLOSE`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub paper_id: String,
    pub tokens: Vec<TokenId>,
    pub loss_mask: Vec<u8>,
    pub events: Vec<CitationEvent>,
    pub spans: Vec<(usize, usize)>,
}

impl TrainingExample {
    pub fn validate(&self, vocab: &Vocabulary, metadata: &MetadataIndex) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Format(format!("{}: {m}", self.paper_id)));
        if self.loss_mask.len() != self.tokens.len() {
            return bad("loss mask length differs from token count".into());
        }
        for e in &self.events {
            if self.tokens.get(e.pos) != Some(&RET) {
                return bad(format!("event at {} is not a retrieval token", e.pos));
            }
            if !metadata.contains(&e.ref_id) {
                return bad(format!("unknown reference {}", e.ref_id));
            }
        }
        for &(s, end) in &self.spans {
            if end > self.tokens.len() || self.loss_mask[s..end].iter().any(|&m| m != 0) {
                return bad(format!("span {s}..{end} is not masked"));
            }
        }
        for (t, &tok) in self.tokens.iter().enumerate() {
            if vocab.is_ref_key(tok) && self.loss_mask[t] != 0 {
                return bad(format!("cite key at {t} is not masked"));
            }
        }
        Ok(())
    }

    pub fn cited_refs(&self) -> impl Iterator<Item = &str> {
        self.events.iter().map(|e| e.ref_id.as_str())
    }

    /// Keeps the first `limit` tokens, dropping events and spans that no
    /// longer fit whole.
    pub fn truncated(&self, limit: usize) -> TrainingExample {
        if self.tokens.len() <= limit {
            return self.clone();
        }
        TrainingExample {
            paper_id: self.paper_id.clone(),
            tokens: self.tokens[..limit].to_vec(),
            loss_mask: self.loss_mask[..limit].to_vec(),
            events: self.events.iter().filter(|e| e.pos < limit).cloned().collect(),
            spans: self.spans.iter().copied().filter(|&(_, e)| e <= limit).collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub papers_seen: usize,
    pub papers_parsed: usize,
    pub titles_extracted: usize,
    pub titles_matched: usize,
    pub mean_citations_per_paper: f64,
    pub mean_matched_per_paper: f64,
    pub match_rate: f64,
    /// Bibliography entries across parsed papers.
    pub citations: usize,
}

impl CorpusStats {
    pub fn from_counts(
        papers_seen: usize,
        papers_parsed: usize,
        citations: usize,
        extracted: usize,
        matched: usize,
    ) -> Self {
        let per = |n: usize| if papers_parsed == 0 { 0.0 } else { n as f64 / papers_parsed as f64 };
        Self {
            papers_seen,
            papers_parsed,
            titles_extracted: extracted,
            titles_matched: matched,
            mean_citations_per_paper: per(citations),
            mean_matched_per_paper: per(matched),
            match_rate: if extracted == 0 { 0.0 } else { matched as f64 / extracted as f64 },
            citations,
        }
    }

    /// Associative merge of two partial accumulations.
    pub fn merge(&self, other: &CorpusStats) -> CorpusStats {
        Self::from_counts(
            self.papers_seen + other.papers_seen,
            self.papers_parsed + other.papers_parsed,
            self.citations + other.citations,
            self.titles_extracted + other.titles_extracted,
            self.titles_matched + other.titles_matched,
        )
    }

    pub fn match_percent(&self) -> u32 {
        (self.match_rate * 100.0).round() as u32
    }
}

impl fmt::Display for CorpusStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "papers: {} seen, {} parsed", self.papers_seen, self.papers_parsed)?;
        writeln!(
            f,
            "citations per paper: {:.1}, matched per paper: {:.1}",
            self.mean_citations_per_paper, self.mean_matched_per_paper
        )?;
        write!(
            f,
            "titles: {} extracted, {} matched ({}%)",
            self.titles_extracted,
            self.titles_matched,
            self.match_percent()
        )
    }
}

/// Every text the vocabulary is built from: paper prose plus reference
/// titles and abstracts.
pub fn corpus_texts<'a>(records: &'a [PaperRecord], metadata: &'a MetadataIndex) -> Vec<&'a str> {
    let mut texts = Vec::new();
    for r in records {
        texts.push(r.title.as_str());
        texts.push(r.abstract_text.as_str());
        for s in &r.sections {
            for i in &s.body {
                if let Inline::Text(t) = i {
                    texts.push(t.as_str());
                }
            }
        }
    }
    for e in metadata.entries() {
        texts.push(e.title.as_str());
        texts.push(e.abstract_text.as_str());
    }
    texts
}

pub fn build_vocabulary(records: &[PaperRecord], metadata: &MetadataIndex, min_freq: usize) -> Vocabulary {
    Vocabulary::build(corpus_texts(records, metadata), &metadata.ref_ids(), min_freq)
}

/// Turns matched records into training examples, sorted by paper id.
///
/// Each matched cite becomes `RET · REF_OPEN · content · REF_CLOSE ·
/// CITE_OPEN · key · CITE_CLOSE`; unmatched cites are dropped from the
/// stream but still counted.
pub fn integrate(
    records: &[PaperRecord],
    metadata: &MetadataIndex,
    vocab: &Vocabulary,
    inject_budget: usize,
    papers_seen: usize,
) -> Result<(Vec<TrainingExample>, CorpusStats), CorpusError> {
    let mut sorted: Vec<&PaperRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.paper_id.cmp(&b.paper_id));
    let (mut citations, mut extracted, mut matched) = (0, 0, 0);
    let mut out = Vec::with_capacity(sorted.len());
    for r in sorted {
        citations += r.bib_entries.len();
        extracted += r.bib_entries.iter().filter(|b| b.extracted_title.is_some()).count();
        matched += r.bib_entries.iter().filter(|b| b.matched_ref_id.is_some()).count();
        out.push(integrate_one(r, metadata, vocab, inject_budget)?);
    }
    let stats = CorpusStats::from_counts(papers_seen.max(records.len()), records.len(), citations, extracted, matched);
    Ok((out, stats))
}

fn integrate_one(
    r: &PaperRecord,
    metadata: &MetadataIndex,
    vocab: &Vocabulary,
    inject_budget: usize,
) -> Result<TrainingExample, CorpusError> {
    let mut ex = ExampleBuilder::default();
    ex.push(BOS, true);
    ex.extend(&vocab.encode(&r.title), true);
    ex.extend(&vocab.encode(&r.abstract_text), true);
    for s in &r.sections {
        for piece in &s.body {
            match piece {
                Inline::Text(t) => ex.extend(&vocab.encode(t), true),
                Inline::Cite(key) => {
                    let bib = r
                        .bib(key)
                        .ok_or_else(|| CorpusError::MissingBibKey { paper_id: r.paper_id.clone(), key: key.clone() })?;
                    let Some(ref_id) = bib.matched_ref_id.as_deref() else { continue };
                    let entry = metadata
                        .get(ref_id)
                        .ok_or_else(|| CorpusError::Format(format!("matched id {ref_id} missing from metadata")))?;
                    let key_tok = vocab
                        .ref_key(ref_id)
                        .ok_or_else(|| CorpusError::Format(format!("no key token for {ref_id}")))?;
                    let content = reference_content(vocab, entry, inject_budget);
                    ex.cite(ref_id, &content, key_tok);
                }
            }
        }
    }
    ex.push(EOS, true);
    Ok(ex.finish(&r.paper_id))
}

#[derive(Default)]
struct ExampleBuilder {
    tokens: Vec<TokenId>,
    mask: Vec<u8>,
    events: Vec<CitationEvent>,
    spans: Vec<(usize, usize)>,
}

impl ExampleBuilder {
    fn push(&mut self, t: TokenId, target: bool) {
        self.tokens.push(t);
        self.mask.push(u8::from(target));
    }

    fn extend(&mut self, ts: &[TokenId], target: bool) {
        for &t in ts {
            self.push(t, target);
        }
    }

    fn cite(&mut self, ref_id: &str, content: &[TokenId], key: TokenId) {
        self.events.push(CitationEvent { pos: self.tokens.len(), ref_id: ref_id.to_string() });
        self.push(RET, true);
        let start = self.tokens.len();
        self.push(REF_OPEN, false);
        self.extend(content, false);
        self.push(REF_CLOSE, false);
        self.spans.push((start, self.tokens.len()));
        self.push(CITE_OPEN, true);
        self.push(key, false);
        self.push(CITE_CLOSE, true);
    }

    fn finish(self, paper_id: &str) -> TrainingExample {
        TrainingExample {
            paper_id: paper_id.to_string(),
            tokens: self.tokens,
            loss_mask: self.mask,
            events: self.events,
            spans: self.spans,
        }
    }
}

pub fn examples_to_jsonl(examples: &[TrainingExample]) -> String {
    let mut out = String::new();
    for e in examples {
        out.push_str(&serde_json::to_string(e).expect("plain struct"));
        out.push('\n');
    }
    out
}

pub fn examples_from_jsonl(text: &str) -> Result<Vec<TrainingExample>, CorpusError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| CorpusError::Format(format!("examples line {}: {e}", n + 1))))
        .collect()
}
