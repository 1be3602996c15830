//! Citation corpus construction: LaTeX/BibTeX parsing, title extraction,
//! metadata matching, integration into training examples, and a synthetic
//! corpus generator with known gold citations.

mod bibtex;
mod integrate;
mod latex;
mod metadata;
mod record;
mod synth;

use std::fs;
use std::path::{Path, PathBuf};

pub use bibtex::{extract_citation_title, parse_bib, BibEntry};
pub use integrate::{
    build_vocabulary, examples_from_jsonl, examples_to_jsonl, integrate, CitationEvent, CorpusStats, TrainingExample,
    DEFAULT_INJECT_BUDGET,
};
pub use latex::{latex_to_text, parse_inline, Inline};
pub use metadata::{match_reference, normalize_title, MetadataIndex, RefEntry};
pub use record::{parse_paper, BibRecord, PaperRecord, Section, SectionName};
pub use synth::{gold_from_jsonl, gold_to_jsonl, synth_corpus, GoldCitation, SynthCorpus, SynthMode, KEYPHRASE_SPACE};

use thiserror::Error;

use crate::model::{write_atomic, Vocabulary};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0}")]
    Format(String),
    #[error("duplicate reference id {0}")]
    DuplicateRef(String),
    #[error("bibtex error at byte {offset}: {message}")]
    Bib { offset: usize, message: String },
    #[error("entry has no title field")]
    NoTitle,
    #[error("paper {paper_id} failed to parse: {reason}")]
    Parse { paper_id: String, reason: String },
    #[error("paper {paper_id} cites bib key {key:?} missing from its bibliography")]
    MissingBibKey { paper_id: String, key: String },
    #[error("{requested} references requested but only {available} keyphrases exist")]
    SynthSpace { requested: usize, available: usize },
    #[error("synthetic corpus needs at least {min} {what}, got {got}")]
    SynthSize { what: &'static str, min: usize, got: usize },
}

impl CorpusError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }
}

/// One paper's raw sources.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PaperSource {
    pub paper_id: String,
    pub tex: String,
    pub bib: String,
}

/// Reads every `<id>.tex` with a sibling `<id>.bib`, sorted by id. A `.tex`
/// without a bibliography is kept with an empty one so it fails parsing.
pub fn read_sources(dir: &Path) -> Result<Vec<PaperSource>, CorpusError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| CorpusError::io(dir, e))? {
        let path = entry.map_err(|e| CorpusError::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("tex") {
            continue;
        }
        let Some(id) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        let tex = fs::read_to_string(&path).map_err(|e| CorpusError::io(&path, e))?;
        let bib_path = path.with_extension("bib");
        let bib = match fs::read_to_string(&bib_path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(CorpusError::io(&bib_path, e)),
        };
        out.push(PaperSource { paper_id: id.to_string(), tex, bib });
    }
    out.sort_by(|a, b| a.paper_id.cmp(&b.paper_id));
    Ok(out)
}

pub fn write_sources(dir: &Path, sources: &[PaperSource]) -> Result<(), CorpusError> {
    fs::create_dir_all(dir).map_err(|e| CorpusError::io(dir, e))?;
    for s in sources {
        let tex = dir.join(format!("{}.tex", s.paper_id));
        fs::write(&tex, &s.tex).map_err(|e| CorpusError::io(&tex, e))?;
        let bib = dir.join(format!("{}.bib", s.paper_id));
        fs::write(&bib, &s.bib).map_err(|e| CorpusError::io(&bib, e))?;
    }
    Ok(())
}

/// The full pipeline output for one source set.
#[derive(Debug, Clone)]
pub struct BuiltCorpus {
    pub records: Vec<PaperRecord>,
    /// Papers dropped at parse time, with the reason.
    pub failures: Vec<(String, String)>,
    pub vocab: Vocabulary,
    pub examples: Vec<TrainingExample>,
    pub stats: CorpusStats,
}

/// Parses every source, matches bibliographies, builds the vocabulary and
/// integrates. Parsing runs on several threads; output order is by paper id.
pub fn build_corpus(
    sources: &[PaperSource],
    metadata: &MetadataIndex,
    min_freq: usize,
    inject_budget: usize,
) -> Result<BuiltCorpus, CorpusError> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(8);
    let chunk = sources.len().div_ceil(workers).max(1);
    let parsed: Vec<Result<PaperRecord, (String, String)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = sources
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|s| {
                            let mut r = parse_paper(&s.paper_id, &s.tex, &s.bib)
                                .map_err(|e| (s.paper_id.clone(), e.to_string()))?;
                            r.match_against(metadata);
                            Ok(r)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("parser thread")).collect()
    });
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for p in parsed {
        match p {
            Ok(r) => records.push(r),
            Err(f) => failures.push(f),
        }
    }
    records.sort_by(|a, b| a.paper_id.cmp(&b.paper_id));
    let vocab = build_vocabulary(&records, metadata, min_freq);
    let (examples, stats) = integrate(&records, metadata, &vocab, inject_budget, sources.len())?;
    Ok(BuiltCorpus { records, failures, vocab, examples, stats })
}

/// File names written by [`BuiltCorpus::write`].
pub const EXAMPLES_FILE: &str = "examples.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const VOCAB_FILE: &str = "vocab.json";
pub const METADATA_FILE: &str = "metadata.jsonl";
pub const GOLD_FILE: &str = "gold.jsonl";

impl BuiltCorpus {
    pub fn write(&self, out: &Path, metadata: &MetadataIndex) -> Result<(), CorpusError> {
        fs::create_dir_all(out).map_err(|e| CorpusError::io(out, e))?;
        let put = |name: &str, bytes: &[u8]| {
            let p = out.join(name);
            write_atomic(&p, bytes).map_err(|e| CorpusError::io(&p, e))
        };
        put(EXAMPLES_FILE, examples_to_jsonl(&self.examples).as_bytes())?;
        put(STATS_FILE, to_pretty(&self.stats).as_bytes())?;
        put(VOCAB_FILE, to_pretty(&self.vocab).as_bytes())?;
        put(METADATA_FILE, metadata.to_jsonl().as_bytes())?;
        Ok(())
    }
}

fn to_pretty<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data") + "\n"
}

/// Loads the vocabulary, examples and metadata written by `build_corpus`.
pub fn load_built(dir: &Path) -> Result<(Vocabulary, Vec<TrainingExample>, MetadataIndex), CorpusError> {
    let read = |name: &str| {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(|e| CorpusError::io(&p, e))
    };
    let vocab: Vocabulary =
        serde_json::from_str(&read(VOCAB_FILE)?).map_err(|e| CorpusError::Format(format!("{VOCAB_FILE}: {e}")))?;
    let examples = examples_from_jsonl(&read(EXAMPLES_FILE)?)?;
    let metadata = MetadataIndex::from_jsonl(&read(METADATA_FILE)?)?;
    Ok((vocab, examples, metadata))
}

/// Splits examples into (train, held-out): the last `fraction` of papers by
/// id are held out, at least one when there are two or more papers.
pub fn holdout_split(examples: &[TrainingExample], fraction: f64) -> (Vec<TrainingExample>, Vec<TrainingExample>) {
    let mut sorted = examples.to_vec();
    sorted.sort_by(|a, b| a.paper_id.cmp(&b.paper_id));
    let n = sorted.len();
    let mut held = ((n as f64) * fraction).round() as usize;
    if n >= 2 {
        held = held.clamp(1, n - 1);
    } else {
        held = 0;
    }
    let test = sorted.split_off(n - held);
    (sorted, test)
}
