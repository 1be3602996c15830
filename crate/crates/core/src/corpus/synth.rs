//! Seeded synthetic corpora with a known citation for every cite mark.
//!
//! Each reference owns a two-word keyphrase `(a, b)` from two pools of
//! pseudo-words, placed at the start of its title. In keyword mode citing
//! sentences repeat the keyphrase; in synonym mode they use `(σ(a), π(b))`
//! where σ and π are seeded bijections onto two further disjoint pools, so
//! the citing sentence and the title share no keyphrase token.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metadata::{MetadataIndex, RefEntry};
use super::{CorpusError, PaperSource};

const POOL: usize = 32;

/// Number of distinct keyphrases available to references.
pub const KEYPHRASE_SPACE: usize = POOL * POOL;

const SYLLABLES: [&str; 16] =
    ["ka", "lo", "mi", "ru", "te", "vo", "zi", "pa", "ne", "sho", "qua", "di", "fe", "gu", "bax", "yem"];

/// Common academic words used as filler everywhere.
const FILLER: &[&str] = &[
    "we",
    "propose",
    "study",
    "analysis",
    "method",
    "approach",
    "results",
    "show",
    "that",
    "data",
    "model",
    "models",
    "learning",
    "performance",
    "improves",
    "prior",
    "work",
    "recent",
    "framework",
    "evaluate",
    "experiments",
    "demonstrate",
    "effective",
    "novel",
    "task",
    "tasks",
    "training",
    "based",
    "using",
    "general",
    "robust",
    "efficient",
    "large",
    "scale",
    "problem",
    "setting",
    "present",
    "strong",
    "baseline",
    "previous",
    "studies",
    "existing",
    "techniques",
    "further",
    "extend",
    "known",
    "widely",
    "used",
    "benchmark",
    "results",
    "introduce",
    "simple",
    "structure",
    "system",
    "systems",
    "design",
    "representation",
    "quality",
    "accuracy",
    "significant",
    "gains",
    "limited",
    "resources",
    "important",
    "direction",
    "explore",
    "methods",
    "theory",
];

const TITLE_TAILS: &[&str] = &[
    "for learning",
    "in practice",
    "at scale",
    "for robust models",
    "revisited",
    "with structure",
    "for efficient systems",
    "and beyond",
];

fn pseudo_word(n: usize) -> String {
    // Spread consecutive indices over distinct-looking syllable triples.
    let m = (n * 1237 + 611) % 4096;
    format!("{}{}{}", SYLLABLES[m % 16], SYLLABLES[(m / 16) % 16], SYLLABLES[m / 256])
}

/// The four disjoint pseudo-word pools: ref slot A, ref slot B, context
/// slot A, context slot B.
fn pools() -> [Vec<String>; 4] {
    std::array::from_fn(|p| (0..POOL).map(|i| pseudo_word(p * POOL + i)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthMode {
    Keyword,
    Synonym,
}

impl FromStr for SynthMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "keyword" => Ok(Self::Keyword),
            "synonym" => Ok(Self::Synonym),
            other => Err(format!("unknown mode {other:?}; expected keyword or synonym")),
        }
    }
}

impl fmt::Display for SynthMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Keyword => "keyword",
            Self::Synonym => "synonym",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldCitation {
    pub paper_id: String,
    pub event_index: usize,
    pub ref_id: String,
}

#[derive(Debug, Clone)]
pub struct SynthCorpus {
    pub sources: Vec<PaperSource>,
    pub metadata: MetadataIndex,
    pub gold: Vec<GoldCitation>,
    /// Ref keyphrase for each ref id, in ref id order.
    pub keyphrases: Vec<(String, String)>,
    /// The context keyphrase each citing sentence uses, per ref id order.
    pub context_phrases: Vec<(String, String)>,
}

impl SynthCorpus {
    pub fn keyphrase(&self, ref_id: &str) -> Option<&(String, String)> {
        self.ref_index(ref_id).map(|i| &self.keyphrases[i])
    }

    pub fn context_phrase(&self, ref_id: &str) -> Option<&(String, String)> {
        self.ref_index(ref_id).map(|i| &self.context_phrases[i])
    }

    fn ref_index(&self, ref_id: &str) -> Option<usize> {
        ref_id.strip_prefix('r')?.parse().ok().filter(|&i| i < self.keyphrases.len())
    }
}

fn filler(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Vec<&'static str> {
    let n = rng.random_range(lo..=hi);
    (0..n).map(|_| *FILLER.choose(rng).expect("non-empty")).collect()
}

fn sentence(words: &[&str]) -> String {
    let mut s = words.join(" ");
    if let Some(first) = s.get(..1) {
        let upper = first.to_ascii_uppercase();
        s.replace_range(..1, &upper);
    }
    s
}

pub fn synth_corpus(seed: u64, n_papers: usize, n_refs: usize, mode: SynthMode) -> Result<SynthCorpus, CorpusError> {
    if n_refs < 10 {
        return Err(CorpusError::SynthSize { what: "references", min: 10, got: n_refs });
    }
    if n_papers < 10 {
        return Err(CorpusError::SynthSize { what: "papers", min: 10, got: n_papers });
    }
    if n_refs > KEYPHRASE_SPACE {
        return Err(CorpusError::SynthSpace { requested: n_refs, available: KEYPHRASE_SPACE });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [ref_a, ref_b, ctx_a, ctx_b] = pools();
    let mut sigma: Vec<usize> = (0..POOL).collect();
    sigma.shuffle(&mut rng);
    let mut pi: Vec<usize> = (0..POOL).collect();
    pi.shuffle(&mut rng);
    let mut pairs: Vec<(usize, usize)> = (0..POOL).flat_map(|a| (0..POOL).map(move |b| (a, b))).collect();
    pairs.shuffle(&mut rng);
    pairs.truncate(n_refs);

    let mut entries = Vec::with_capacity(n_refs);
    let mut keyphrases = Vec::with_capacity(n_refs);
    let mut context_phrases = Vec::with_capacity(n_refs);
    for (i, &(a, b)) in pairs.iter().enumerate() {
        let tail = TITLE_TAILS.choose(&mut rng).expect("non-empty");
        let title = format!("{} {} {tail}", ref_a[a], ref_b[b]);
        let abstract_text = sentence(&filler(&mut rng, 6, 9)) + ".";
        entries.push(RefEntry {
            ref_id: format!("r{i:04}"),
            title,
            abstract_text,
            year: Some(2000 + rng.random_range(0..25)),
        });
        keyphrases.push((ref_a[a].clone(), ref_b[b].clone()));
        context_phrases.push(match mode {
            SynthMode::Keyword => (ref_a[a].clone(), ref_b[b].clone()),
            SynthMode::Synonym => (ctx_a[sigma[a]].clone(), ctx_b[pi[b]].clone()),
        });
    }

    let mut sources = Vec::with_capacity(n_papers);
    let mut gold = Vec::new();
    for p in 0..n_papers {
        let paper_id = format!("p{p:04}");
        let n_cites = rng.random_range(3..=6usize).min(n_refs);
        let cited: Vec<usize> = rand::seq::index::sample(&mut rng, n_refs, n_cites).into_vec();
        let title = sentence(&filler(&mut rng, 3, 5));
        let abstract_text = sentence(&filler(&mut rng, 8, 12)) + ".";
        let split = rng.random_range(1..n_cites);
        let mut bodies = [String::new(), String::new()];
        for (slot, &r) in cited.iter().enumerate() {
            let body = &mut bodies[usize::from(slot >= split)];
            let (ca, cb) = &context_phrases[r];
            let mut words = filler(&mut rng, 3, 6);
            words.push(ca);
            words.push(cb);
            body.push_str(&format!("{}~\\cite{{b{r}}}. ", sentence(&words)));
            if rng.random_bool(0.3) {
                body.push_str(&(sentence(&filler(&mut rng, 4, 7)) + ". "));
            }
            gold.push(GoldCitation {
                paper_id: paper_id.clone(),
                event_index: slot,
                ref_id: entries[r].ref_id.clone(),
            });
        }
        let tex = format!(
            "\\documentclass{{article}}\n\\title{{{title}}}\n\\begin{{document}}\n\\maketitle\n\
\\begin{{abstract}}\n{abstract_text}\n\\end{{abstract}}\n\
\\section{{Introduction}}\n{}\n\\section{{Related Work}}\n{}\n\\bibliography{{refs}}\n\\end{{document}}\n",
            bodies[0].trim_end(),
            bodies[1].trim_end()
        );
        let keys: BTreeSet<usize> = cited.iter().copied().collect();
        let bib: String = keys
            .iter()
            .map(|&r| {
                let e = &entries[r];
                format!(
                    "@article{{b{r},\n  title = {{{}}},\n  year = {{{}}}\n}}\n\n",
                    e.title,
                    e.year.expect("synthetic refs have years")
                )
            })
            .collect();
        sources.push(PaperSource { paper_id, tex, bib });
    }
    Ok(SynthCorpus { sources, metadata: MetadataIndex::new(entries)?, gold, keyphrases, context_phrases })
}

pub fn gold_to_jsonl(gold: &[GoldCitation]) -> String {
    gold.iter().map(|g| serde_json::to_string(g).expect("plain struct") + "\n").collect()
}

pub fn gold_from_jsonl(text: &str) -> Result<Vec<GoldCitation>, CorpusError> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CorpusError::Format(format!("gold map: {e}"))))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_corpus, DEFAULT_INJECT_BUDGET};
    use crate::model::tokenize;

    #[test]
    fn pools_are_disjoint_single_tokens() {
        let all: Vec<String> = pools().concat();
        let set: BTreeSet<&String> = all.iter().collect();
        assert_eq!(set.len(), 4 * POOL);
        for w in &all {
            assert_eq!(tokenize(w), vec![w.clone()]);
            assert!(!FILLER.contains(&w.as_str()));
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let a = synth_corpus(7, 12, 30, SynthMode::Synonym).unwrap();
        let b = synth_corpus(7, 12, 30, SynthMode::Synonym).unwrap();
        assert_eq!(a.sources, b.sources);
        assert_eq!(a.metadata.to_jsonl(), b.metadata.to_jsonl());
        assert_eq!(gold_to_jsonl(&a.gold), gold_to_jsonl(&b.gold));
        let c = synth_corpus(8, 12, 30, SynthMode::Synonym).unwrap();
        assert_ne!(a.sources, c.sources);
    }

    #[test]
    fn keyphrase_space_is_enforced() {
        assert!(matches!(
            synth_corpus(1, 10, KEYPHRASE_SPACE + 1, SynthMode::Keyword),
            Err(CorpusError::SynthSpace { .. })
        ));
        assert!(synth_corpus(1, 9, 10, SynthMode::Keyword).is_err());
        assert!(synth_corpus(1, 10, 9, SynthMode::Keyword).is_err());
    }

    fn citing_sentences(c: &SynthCorpus) -> Vec<(String, String)> {
        // (sentence text before the cite, ref id), in gold order.
        let built = build_corpus(&c.sources, &c.metadata, 1, DEFAULT_INJECT_BUDGET).unwrap();
        let mut out = Vec::new();
        for r in &built.records {
            let mut last = String::new();
            for s in &r.sections {
                for i in &s.body {
                    match i {
                        super::super::Inline::Text(t) => last = t.rsplit('.').next().unwrap_or(t).to_string(),
                        super::super::Inline::Cite(k) => {
                            let id = r.bib(k).unwrap().matched_ref_id.clone().unwrap();
                            out.push((last.clone(), id));
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn keyword_sentences_contain_the_keyphrase() {
        let c = synth_corpus(3, 20, 60, SynthMode::Keyword).unwrap();
        let sents = citing_sentences(&c);
        assert_eq!(sents.len(), c.gold.len());
        for (s, id) in sents {
            let (a, b) = c.keyphrase(&id).unwrap();
            let toks = tokenize(&s);
            assert!(toks.contains(a) && toks.contains(b), "{s} / {id}");
        }
    }

    #[test]
    fn synonym_sentences_share_no_keyphrase_token_with_title() {
        let c = synth_corpus(3, 20, 60, SynthMode::Synonym).unwrap();
        let sents = citing_sentences(&c);
        assert_eq!(sents.len(), c.gold.len());
        for (s, id) in sents {
            let title = tokenize(&c.metadata.get(&id).unwrap().title);
            let (a, b) = c.keyphrase(&id).unwrap();
            let toks = tokenize(&s);
            assert!(!toks.contains(a) && !toks.contains(b));
            let (ca, cb) = c.context_phrase(&id).unwrap();
            assert!(!title.contains(ca) && !title.contains(cb));
            assert!(toks.contains(ca) && toks.contains(cb));
        }
    }

    #[test]
    fn every_cite_matches_and_gold_aligns_with_events() {
        let c = synth_corpus(11, 15, 40, SynthMode::Synonym).unwrap();
        let built = build_corpus(&c.sources, &c.metadata, 2, DEFAULT_INJECT_BUDGET).unwrap();
        assert!(built.failures.is_empty());
        assert_eq!(built.stats.match_rate, 1.0);
        let events: Vec<GoldCitation> = built
            .examples
            .iter()
            .flat_map(|e| {
                e.events.iter().enumerate().map(|(i, ev)| GoldCitation {
                    paper_id: e.paper_id.clone(),
                    event_index: i,
                    ref_id: ev.ref_id.clone(),
                })
            })
            .collect();
        assert_eq!(events, c.gold);
        for e in &built.examples {
            e.validate(&built.vocab, &c.metadata).unwrap();
        }
    }
}
