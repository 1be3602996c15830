use std::collections::BTreeSet;

use super::{OrchestratorError, SessionState};
use crate::corpus::MetadataIndex;
use crate::model::{TokenId, Vocabulary, CITE_CLOSE, CITE_OPEN, REF_CLOSE, REF_OPEN};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Tex,
    Bib,
}

impl std::str::FromStr for ExportFormat {
    type Err = OrchestratorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tex" => Ok(Self::Tex),
            "bib" => Ok(Self::Bib),
            other => Err(OrchestratorError::Format(other.to_string())),
        }
    }
}

pub(super) fn escape_tex(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for ch in text.chars() {
        match ch {
            '%' | '&' | '#' | '_' | '$' | '{' | '}' => {
                out.push('\\');
                out.push(ch);
            }
            '\\' => out.push_str("\\textbackslash{}"),
            '~' => out.push_str("\\textasciitilde{}"),
            '^' => out.push_str("\\textasciicircum{}"),
            _ => out.push(ch),
        }
    }
    out
}

fn escape_bib(text: &str) -> String {
    text.replace(['{', '}'], "")
}

fn flush(out: &mut String, vocab: &Vocabulary, run: &mut Vec<TokenId>) {
    let text = vocab.detokenize(run);
    run.clear();
    if text.is_empty() {
        return;
    }
    let attach = text.starts_with(['.', ',', ';', ':', '!', '?', ')']);
    if !out.is_empty() && !attach && !out.ends_with('\n') {
        out.push(' ');
    }
    out.push_str(&escape_tex(&text));
}

fn render_tex(s: &SessionState, vocab: &Vocabulary) -> String {
    let mut out = String::new();
    out.push_str(&format!("\\section{{{}}}\n", s.section.heading()));
    let body = &s.context[s.prompt_len..];
    let mut run = Vec::new();
    let mut i = 0;
    while i < body.len() {
        match body[i] {
            REF_OPEN => {
                flush(&mut out, vocab, &mut run);
                while i < body.len() && body[i] != REF_CLOSE {
                    i += 1;
                }
            }
            CITE_OPEN if i + 2 < body.len() && body[i + 2] == CITE_CLOSE => {
                flush(&mut out, vocab, &mut run);
                if let Some(ref_id) = vocab.ref_of_key(body[i + 1]) {
                    out.push_str(&format!("~\\cite{{{ref_id}}}"));
                }
                i += 2;
            }
            t => run.push(t),
        }
        i += 1;
    }
    flush(&mut out, vocab, &mut run);
    out.push('\n');
    out
}

fn render_bib(s: &SessionState, metadata: &MetadataIndex) -> Result<String, OrchestratorError> {
    let mut out = String::new();
    let distinct: BTreeSet<&str> = s.accepted.iter().map(String::as_str).collect();
    for ref_id in distinct {
        let e = metadata.get(ref_id).ok_or_else(|| OrchestratorError::UnknownRef(ref_id.to_string()))?;
        out.push_str(&format!("@article{{{ref_id},\n  title = {{{}}}", escape_bib(&e.title)));
        if let Some(y) = e.year {
            out.push_str(&format!(",\n  year = {{{y}}}"));
        }
        out.push_str("\n}\n\n");
    }
    Ok(out)
}

/// Renders the session body as LaTeX or its bibliography as BibTeX.
/// Injected reference spans never appear in either.
pub fn export(
    s: &SessionState,
    vocab: &Vocabulary,
    metadata: &MetadataIndex,
    format: ExportFormat,
) -> Result<String, OrchestratorError> {
    match format {
        ExportFormat::Tex => Ok(render_tex(s, vocab)),
        ExportFormat::Bib => render_bib(s, metadata),
    }
}
