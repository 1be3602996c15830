use serde::{Deserialize, Serialize};

use super::bibtex::{parse_bib, title_of};
use super::latex::{
    command_arg, environment, escape_text, find_sections, latex_to_text, parse_inline, strip_comments, Inline,
};
use super::metadata::MetadataIndex;
use super::CorpusError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SectionName {
    Introduction,
    RelatedWork,
}

impl SectionName {
    pub const ALLOWED: [&'static str; 2] = ["introduction", "related_work"];

    /// Maps a section heading onto a supported section, if any.
    pub fn from_heading(heading: &str) -> Option<Self> {
        let h = super::normalize_title(heading);
        match h.as_str() {
            "introduction" => Some(Self::Introduction),
            "related work" | "related works" | "related_work" => Some(Self::RelatedWork),
            _ => None,
        }
    }

    pub fn heading(self) -> &'static str {
        match self {
            Self::Introduction => "Introduction",
            Self::RelatedWork => "Related Work",
        }
    }
}

impl std::str::FromStr for SectionName {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "introduction" => Ok(Self::Introduction),
            "related_work" => Ok(Self::RelatedWork),
            other => Err(CorpusError::Format(format!(
                "unsupported section {other:?}; allowed: {}",
                Self::ALLOWED.join(", ")
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub name: SectionName,
    pub body: Vec<Inline>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BibRecord {
    pub key: String,
    pub raw: String,
    /// Present when a title was extracted from the entry.
    pub extracted_title: Option<String>,
    pub matched_ref_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaperRecord {
    pub paper_id: String,
    pub title: String,
    pub abstract_text: String,
    pub sections: Vec<Section>,
    pub bib_entries: Vec<BibRecord>,
}

impl PaperRecord {
    pub fn bib(&self, key: &str) -> Option<&BibRecord> {
        self.bib_entries.iter().find(|b| b.key == key)
    }

    pub fn cite_keys(&self) -> impl Iterator<Item = &str> {
        self.sections.iter().flat_map(|s| {
            s.body.iter().filter_map(|i| match i {
                Inline::Cite(k) => Some(k.as_str()),
                Inline::Text(_) => None,
            })
        })
    }

    /// Fills `matched_ref_id` for every entry with an extracted title.
    pub fn match_against(&mut self, index: &MetadataIndex) {
        for b in &mut self.bib_entries {
            b.matched_ref_id = b.extracted_title.as_deref().and_then(|t| index.match_title(t)).map(str::to_string);
        }
    }

    /// Renders the record back into the supported LaTeX subset.
    pub fn render_tex(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("\\title{{{}}}\n\\begin{{document}}\n", escape_text(&self.title)));
        out.push_str(&format!("\\begin{{abstract}}\n{}\n\\end{{abstract}}\n", escape_text(&self.abstract_text)));
        for s in &self.sections {
            out.push_str(&format!("\\section{{{}}}\n", s.name.heading()));
            let parts: Vec<String> = s
                .body
                .iter()
                .map(|i| match i {
                    Inline::Text(t) => escape_text(t),
                    Inline::Cite(k) => format!("\\cite{{{k}}}"),
                })
                .collect();
            out.push_str(&parts.join(" "));
            out.push('\n');
        }
        out.push_str("\\end{document}\n");
        out
    }

    pub fn render_bib(&self) -> String {
        self.bib_entries.iter().map(|b| b.raw.as_str()).collect::<Vec<_>>().join("\n\n") + "\n"
    }
}

/// Parses one paper from its LaTeX and BibTeX sources.
pub fn parse_paper(paper_id: &str, tex: &str, bib: &str) -> Result<PaperRecord, CorpusError> {
    let src = strip_comments(tex);
    let title = command_arg(&src, "title")
        .map(latex_to_text)
        .filter(|t| !t.is_empty())
        .ok_or_else(|| CorpusError::Parse { paper_id: paper_id.to_string(), reason: "missing \\title".into() })?;
    let abstract_text = environment(&src, "abstract").map(latex_to_text).unwrap_or_default();

    let heads = find_sections(&src);
    let mut sections = Vec::new();
    for (n, (_, body_start, heading)) in heads.iter().enumerate() {
        let Some(name) = super::record::SectionName::from_heading(heading) else {
            continue;
        };
        let next = heads.get(n + 1).map_or(src.len(), |h| h.0);
        let body_end = body_stop(&src[*body_start..next]) + body_start;
        sections.push(Section { name, body: parse_inline(&src[*body_start..body_end]) });
    }

    let bib_entries: Vec<BibRecord> = parse_bib(bib)
        .map_err(|e| CorpusError::Parse { paper_id: paper_id.to_string(), reason: e.to_string() })?
        .into_iter()
        .map(|e| BibRecord { extracted_title: title_of(&e), key: e.key, raw: e.raw, matched_ref_id: None })
        .collect();
    if bib_entries.is_empty() {
        return Err(CorpusError::Parse { paper_id: paper_id.to_string(), reason: "empty bibliography".into() });
    }
    Ok(PaperRecord { paper_id: paper_id.to_string(), title, abstract_text, sections, bib_entries })
}

/// Offset where a section body ends: the first document-level stop marker.
fn body_stop(s: &str) -> usize {
    ["\\bibliography", "\\begin{thebibliography}", "\\end{document}", "\\appendix"]
        .iter()
        .filter_map(|m| s.find(m))
        .min()
        .unwrap_or(s.len())
}
