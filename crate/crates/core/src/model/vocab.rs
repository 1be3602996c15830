use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::ModelError;

pub type TokenId = u32;

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;
pub const PAD: TokenId = 2;
pub const UNK: TokenId = 3;
pub const RET: TokenId = 4;
pub const CITE_OPEN: TokenId = 5;
pub const CITE_CLOSE: TokenId = 6;
pub const REF_OPEN: TokenId = 7;
pub const REF_CLOSE: TokenId = 8;

/// Surface forms of the reserved ids 0..=8, in id order.
pub const SPECIALS: [&str; 9] = ["<bos>", "<eos>", "<pad>", "<unk>", "[RET]", "<cite>", "</cite>", "<ref>", "</ref>"];

const KEY_PREFIX: &str = "<key:";

/// Lowercases and splits on whitespace; every non-alphanumeric character is
/// a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_string());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Word-level vocabulary: reserved specials at ids 0..=8, then one key
/// token per citable reference, then corpus words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    ref_ids: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    ref_ids: Vec<String>,
}

impl TryFrom<VocabFile> for Vocabulary {
    type Error = ModelError;

    fn try_from(f: VocabFile) -> Result<Self, Self::Error> {
        Vocabulary::from_parts(f.tokens, f.ref_ids)
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        VocabFile { tokens: v.tokens, ref_ids: v.ref_ids }
    }
}

impl Vocabulary {
    /// Builds from corpus texts: words seen at least `min_freq` times are kept,
    /// most frequent first with ties broken lexicographically.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, ref_ids: &[String], min_freq: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Self::with_words(words.into_iter().map(|(w, _)| w), ref_ids)
    }

    /// Builds from an explicit word list, skipping duplicates and reserved forms.
    pub fn with_words(words: impl IntoIterator<Item = String>, ref_ids: &[String]) -> Self {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut ids: Vec<String> = ref_ids.to_vec();
        ids.sort();
        ids.dedup();
        tokens.extend(ids.iter().map(|r| key_token(r)));
        let mut index: HashMap<String, TokenId> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as TokenId)).collect();
        for w in words {
            if index.contains_key(&w) {
                continue;
            }
            index.insert(w.clone(), tokens.len() as TokenId);
            tokens.push(w);
        }
        Self { tokens, index, ref_ids: ids }
    }

    fn from_parts(tokens: Vec<String>, ref_ids: Vec<String>) -> Result<Self, ModelError> {
        if tokens.len() < SPECIALS.len() + ref_ids.len() {
            return Err(ModelError::Vocabulary("token list shorter than reserved ids".into()));
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens[i] != *s {
                return Err(ModelError::Vocabulary(format!("id {i} must be {s}, found {}", tokens[i])));
            }
        }
        for (i, r) in ref_ids.iter().enumerate() {
            if tokens[SPECIALS.len() + i] != key_token(r) {
                return Err(ModelError::Vocabulary(format!("ref key for {r} out of place")));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(ModelError::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index, ref_ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn ref_ids(&self) -> &[String] {
        &self.ref_ids
    }

    pub fn ref_key(&self, ref_id: &str) -> Option<TokenId> {
        self.ref_ids.binary_search_by(|r| r.as_str().cmp(ref_id)).ok().map(|i| (SPECIALS.len() + i) as TokenId)
    }

    /// The reference id whose key token is `id`, if it is one.
    pub fn ref_of_key(&self, id: TokenId) -> Option<&str> {
        let i = (id as usize).checked_sub(SPECIALS.len())?;
        self.ref_ids.get(i).map(String::as_str)
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        (id as usize) < SPECIALS.len()
    }

    pub fn is_ref_key(&self, id: TokenId) -> bool {
        self.ref_of_key(id).is_some()
    }

    /// Token ids the decoder may sample: words, [RET] and EOS.
    pub fn is_generatable(&self, id: TokenId) -> bool {
        id == RET || id == EOS || (!self.is_special(id) && !self.is_ref_key(id) && (id as usize) < self.len())
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        tokenize(text).iter().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    /// Joins word tokens with spaces, attaching closing punctuation to the
    /// previous word. Special and key tokens are skipped.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        let mut out = String::new();
        for &id in ids {
            if self.is_special(id) || self.is_ref_key(id) {
                continue;
            }
            let Some(tok) = self.token(id) else { continue };
            let attach = matches!(tok, "." | "," | ";" | ":" | "!" | "?" | ")" | "]" | "'");
            if !out.is_empty() && !attach && !out.ends_with(['(', '[']) {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }
}

pub fn key_token(ref_id: &str) -> String {
    format!("{KEY_PREFIX}{ref_id}>")
}

pub fn is_terminator(token: &str) -> bool {
    matches!(token, "." | "!" | "?")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(
            tokenize("FreeU: Free Lunch in Diffusion U-Net."),
            ["freeu", ":", "free", "lunch", "in", "diffusion", "u", "-", "net", "."]
        );
    }

    #[test]
    fn specials_have_fixed_ids() {
        let v = Vocabulary::build(["a a b"], &["r2".into(), "r1".into()], 1);
        for (i, s) in SPECIALS.iter().enumerate() {
            assert_eq!(v.id(s), Some(i as TokenId));
        }
        assert_eq!(v.id("[RET]"), Some(RET));
        assert_eq!(v.ref_key("r1"), Some(9));
        assert_eq!(v.ref_key("r2"), Some(10));
        assert_eq!(v.ref_of_key(10), Some("r2"));
        assert_eq!(v.id("a"), Some(11));
    }

    #[test]
    fn min_frequency_maps_rare_words_to_unk() {
        let v = Vocabulary::build(["common common rare"], &[], 2);
        assert_eq!(v.encode("common rare"), vec![v.id("common").unwrap(), UNK]);
    }

    #[test]
    fn serde_round_trip_and_validation() {
        let v = Vocabulary::build(["x y x y z"], &["k".into()], 1);
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(v, back);
        let bad = json.replace("<bos>", "<nope>");
        assert!(serde_json::from_str::<Vocabulary>(&bad).is_err());
    }

    #[test]
    fn mapping_is_bijective() {
        let v = Vocabulary::build(["the cat sat on the mat . the cat"], &["a".into(), "b".into()], 1);
        for id in 0..v.len() as TokenId {
            assert_eq!(v.id(v.token(id).unwrap()), Some(id));
        }
    }

    #[test]
    fn detokenize_attaches_punctuation() {
        let v = Vocabulary::build(["hello , world ."], &[], 1);
        let ids = v.encode("hello, world.");
        assert_eq!(v.detokenize(&ids), "hello, world.");
    }
}
