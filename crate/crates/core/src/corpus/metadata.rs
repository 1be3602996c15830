use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::CorpusError;
use crate::model::content_id;

/// A citable reference from the metadata index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefEntry {
    pub ref_id: String,
    pub title: String,
    #[serde(rename = "abstract", default)]
    pub abstract_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub year: Option<i32>,
}

/// Lowercase, every non-alphanumeric character becomes a space, runs of
/// spaces collapse, ends trimmed.
pub fn normalize_title(title: &str) -> String {
    let mapped: String = title
        .chars()
        .flat_map(|c| if c.is_alphanumeric() { c.to_lowercase().collect::<Vec<_>>() } else { vec![' '] })
        .collect();
    mapped.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Reference metadata keyed by id, with an exact normalized-title lookup.
#[derive(Debug, Clone, Default)]
pub struct MetadataIndex {
    entries: Vec<RefEntry>,
    by_id: HashMap<String, usize>,
    by_title: HashMap<String, Vec<usize>>,
}

impl MetadataIndex {
    pub fn new(entries: Vec<RefEntry>) -> Result<Self, CorpusError> {
        let mut by_id = HashMap::with_capacity(entries.len());
        let mut by_title: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, e) in entries.iter().enumerate() {
            if by_id.insert(e.ref_id.clone(), i).is_some() {
                return Err(CorpusError::DuplicateRef(e.ref_id.clone()));
            }
            by_title.entry(normalize_title(&e.title)).or_default().push(i);
        }
        Ok(Self { entries, by_id, by_title })
    }

    pub fn load_jsonl(path: &Path) -> Result<Self, CorpusError> {
        let text = fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
        Self::from_jsonl(&text)
    }

    pub fn from_jsonl(text: &str) -> Result<Self, CorpusError> {
        let entries = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, l)| {
                serde_json::from_str(l).map_err(|e| CorpusError::Format(format!("metadata line {}: {e}", n + 1)))
            })
            .collect::<Result<Vec<RefEntry>, _>>()?;
        Self::new(entries)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("plain struct"));
            out.push('\n');
        }
        out
    }

    /// Content id of the canonical JSONL form.
    pub fn metadata_id(&self) -> String {
        content_id(self.to_jsonl().as_bytes())
    }

    pub fn entries(&self) -> &[RefEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, ref_id: &str) -> Option<&RefEntry> {
        self.by_id.get(ref_id).map(|&i| &self.entries[i])
    }

    pub fn contains(&self, ref_id: &str) -> bool {
        self.by_id.contains_key(ref_id)
    }

    pub fn ref_ids(&self) -> Vec<String> {
        self.entries.iter().map(|e| e.ref_id.clone()).collect()
    }

    /// The ref id whose normalized title equals the normalized query; `None`
    /// when absent or shared by several ids.
    pub fn match_title(&self, title: &str) -> Option<&str> {
        let key = normalize_title(title);
        if key.is_empty() {
            return None;
        }
        match self.by_title.get(&key).map(Vec::as_slice) {
            Some([only]) => Some(self.entries[*only].ref_id.as_str()),
            _ => None,
        }
    }
}

pub fn match_reference<'a>(extracted_title: &str, index: &'a MetadataIndex) -> Option<&'a str> {
    index.match_title(extracted_title)
}
