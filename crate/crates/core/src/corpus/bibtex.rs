use super::latex::{balanced_group, collapse_ws, latex_to_text};
use super::CorpusError;

/// One parsed BibTeX entry. Field values keep their inner markup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BibEntry {
    pub kind: String,
    pub key: String,
    pub fields: Vec<(String, String)>,
    /// The entry's source text from `@` through the closing delimiter.
    pub raw: String,
}

impl BibEntry {
    pub fn field(&self, name: &str) -> Option<&str> {
        self.fields.iter().find(|(n, _)| n.eq_ignore_ascii_case(name)).map(|(_, v)| v.as_str())
    }
}

struct Cursor<'a> {
    s: &'a str,
    i: usize,
}

impl<'a> Cursor<'a> {
    fn peek(&self) -> Option<u8> {
        self.s.as_bytes().get(self.i).copied()
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(c) if c.is_ascii_whitespace()) {
            self.i += 1;
        }
    }

    fn ident(&mut self) -> &'a str {
        let start = self.i;
        while matches!(self.peek(), Some(c) if c.is_ascii_alphanumeric() || matches!(c, b'_' | b'-' | b':' | b'.' | b'+' | b'/'))
        {
            self.i += 1;
        }
        &self.s[start..self.i]
    }

    fn err(&self, msg: &str) -> CorpusError {
        CorpusError::Bib { offset: self.i, message: msg.to_string() }
    }

    /// `{...}`, `"..."` or a bare word/number, joined by `#`.
    fn value(&mut self) -> Result<String, CorpusError> {
        let mut out = String::new();
        loop {
            self.skip_ws();
            match self.peek() {
                Some(b'{') => {
                    let (inner, end) = balanced_group(self.s, self.i).ok_or_else(|| self.err("unbalanced braces"))?;
                    out.push_str(inner);
                    self.i = end;
                }
                Some(b'"') => {
                    let start = self.i + 1;
                    let b = self.s.as_bytes();
                    let mut j = start;
                    let mut depth = 0i32;
                    while j < b.len() {
                        match b[j] {
                            b'\\' => j += 1,
                            b'{' => depth += 1,
                            b'}' => depth -= 1,
                            b'"' if depth == 0 => break,
                            _ => {}
                        }
                        j += 1;
                    }
                    if j >= b.len() {
                        return Err(self.err("unterminated quoted value"));
                    }
                    out.push_str(&self.s[start..j]);
                    self.i = j + 1;
                }
                Some(_) => {
                    let word = self.ident();
                    if word.is_empty() {
                        return Err(self.err("expected a field value"));
                    }
                    out.push_str(word);
                }
                None => return Err(self.err("unexpected end of input")),
            }
            self.skip_ws();
            if self.peek() == Some(b'#') {
                self.i += 1;
                continue;
            }
            return Ok(out);
        }
    }
}

/// Parses every entry in a BibTeX source. `@comment`, `@string` and
/// `@preamble` blocks are skipped.
pub fn parse_bib(src: &str) -> Result<Vec<BibEntry>, CorpusError> {
    let mut entries = Vec::new();
    let mut cur = Cursor { s: src, i: 0 };
    while let Some(off) = src[cur.i..].find('@') {
        let start = cur.i + off;
        cur.i = start + 1;
        let kind = cur.ident().to_ascii_lowercase();
        cur.skip_ws();
        let (open, close) = match cur.peek() {
            Some(b'{') => (b'{', b'}'),
            Some(b'(') => (b'(', b')'),
            _ => continue,
        };
        if matches!(kind.as_str(), "comment" | "string" | "preamble") {
            if open == b'{' {
                if let Some((_, end)) = balanced_group(src, cur.i) {
                    cur.i = end;
                }
            }
            continue;
        }
        cur.i += 1;
        cur.skip_ws();
        let key = cur.ident().to_string();
        if key.is_empty() {
            return Err(cur.err("missing entry key"));
        }
        let mut fields = Vec::new();
        loop {
            cur.skip_ws();
            match cur.peek() {
                Some(b',') => {
                    cur.i += 1;
                }
                Some(c) if c == close => {
                    cur.i += 1;
                    break;
                }
                Some(_) => {
                    let name = cur.ident().to_ascii_lowercase();
                    if name.is_empty() {
                        return Err(cur.err("expected a field name"));
                    }
                    cur.skip_ws();
                    if cur.peek() != Some(b'=') {
                        return Err(cur.err("expected '=' after field name"));
                    }
                    cur.i += 1;
                    let value = cur.value()?;
                    fields.push((name, value));
                }
                None => return Err(cur.err("unterminated entry")),
            }
        }
        let _ = open;
        entries.push(BibEntry { kind, key, fields, raw: src[start..cur.i].to_string() });
    }
    Ok(entries)
}

/// Plain-text title of a single BibTeX entry: braces stripped, embedded
/// commands reduced to their text, whitespace collapsed.
pub fn extract_citation_title(entry_text: &str) -> Result<String, CorpusError> {
    let entries = parse_bib(entry_text)?;
    let entry = entries.first().ok_or(CorpusError::NoTitle)?;
    title_of(entry).ok_or(CorpusError::NoTitle)
}

pub fn title_of(entry: &BibEntry) -> Option<String> {
    let t = collapse_ws(&latex_to_text(entry.field("title")?));
    (!t.is_empty()).then_some(t)
}
