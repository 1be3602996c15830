//! The supported LaTeX subset: `\title`, the abstract environment,
//! `\section` bodies and `\cite`-family marks. Any other command is reduced
//! to the text of its arguments.

/// Commands whose arguments carry no prose and are dropped with them.
const DROPPED: &[&str] = &[
    "label",
    "ref",
    "eqref",
    "autoref",
    "cref",
    "vspace",
    "hspace",
    "includegraphics",
    "bibliographystyle",
    "bibliography",
    "maketitle",
    "cite",
    "citep",
    "citet",
    "citealp",
    "nocite",
    "footnotetext",
    "usepackage",
    "documentclass",
    "newcommand",
    "renewcommand",
    "author",
    "date",
    "thanks",
    "begin",
    "end",
];

pub(crate) const CITE_COMMANDS: &[&str] = &["cite", "citep", "citet", "citealp", "citeauthor"];

/// Removes `%` comments together with their line break, keeping `\%`.
pub fn strip_comments(src: &str) -> String {
    let mut out = String::with_capacity(src.len());
    for line in src.split_inclusive('\n') {
        let bytes = line.as_bytes();
        let mut cut = None;
        let mut i = 0;
        while i < bytes.len() {
            match bytes[i] {
                b'\\' => i += 2,
                b'%' => {
                    cut = Some(i);
                    break;
                }
                _ => i += 1,
            }
        }
        match cut {
            Some(c) => out.push_str(&line[..c]),
            None => out.push_str(line),
        }
    }
    out
}

/// Given `s[open] == '{'`, returns the inner text and the index just past the
/// matching `}`.
pub fn balanced_group(s: &str, open: usize) -> Option<(&str, usize)> {
    let bytes = s.as_bytes();
    if bytes.get(open) != Some(&b'{') {
        return None;
    }
    let mut depth = 0usize;
    let mut i = open;
    while i < bytes.len() {
        match bytes[i] {
            b'\\' => {
                i += 2;
                continue;
            }
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return Some((&s[open + 1..i], i + 1));
                }
            }
            _ => {}
        }
        i += 1;
    }
    None
}

fn skip_ws(s: &str, mut i: usize) -> usize {
    let b = s.as_bytes();
    while i < b.len() && (b[i] as char).is_ascii_whitespace() {
        i += 1;
    }
    i
}

/// Skips `*` and any `[...]` optional arguments after a command name.
fn skip_optional(s: &str, mut i: usize) -> usize {
    let b = s.as_bytes();
    if b.get(i) == Some(&b'*') {
        i += 1;
    }
    loop {
        let j = skip_ws(s, i);
        if b.get(j) != Some(&b'[') {
            return i;
        }
        match s[j..].find(']') {
            Some(end) => i = j + end + 1,
            None => return i,
        }
    }
}

/// Reads a control word at `s[i] == '\\'`, returning the name and the index
/// after it. Control symbols (`\%`) have a one-character name.
fn control_word(s: &str, i: usize) -> (&str, usize) {
    let rest = &s[i + 1..];
    let len = rest.char_indices().find(|(_, c)| !c.is_ascii_alphabetic()).map_or(rest.len(), |(k, _)| k);
    if len == 0 {
        let ch_len = rest.chars().next().map_or(0, char::len_utf8);
        (&rest[..ch_len], i + 1 + ch_len)
    } else {
        (&rest[..len], i + 1 + len)
    }
}

/// Reduces LaTeX markup to plain text: braces stripped, comments removed,
/// unknown commands replaced by their argument text, whitespace collapsed.
pub fn latex_to_text(src: &str) -> String {
    let src = strip_comments(src);
    let mut out = String::with_capacity(src.len());
    raw_text(&src, &mut out);
    collapse_ws(&out)
}

fn raw_text(s: &str, out: &mut String) {
    let mut i = 0;
    let b = s.as_bytes();
    while i < s.len() {
        match b[i] {
            b'\\' => {
                let (name, after) = control_word(s, i);
                match name {
                    "" => i = after,
                    "\\" | "," | ";" | " " | "\n" | "quad" | "qquad" | "par" | "newline" => {
                        out.push(' ');
                        i = after;
                    }
                    n if n.chars().all(|c| !c.is_ascii_alphabetic()) => {
                        out.push_str(n);
                        i = after;
                    }
                    n if DROPPED.contains(&n) => {
                        let mut j = skip_optional(s, after);
                        loop {
                            let k = skip_ws(s, j);
                            match balanced_group(s, k) {
                                Some((_, end)) => j = end,
                                None => break,
                            }
                            // `\begin`/`\end` and most dropped commands take one argument.
                            if !matches!(n, "newcommand" | "renewcommand") {
                                break;
                            }
                        }
                        out.push(' ');
                        i = j;
                    }
                    _ => {
                        i = skip_optional(s, after);
                    }
                }
            }
            b'{' | b'}' | b'$' => i += 1,
            b'~' => {
                out.push(' ');
                i += 1;
            }
            _ => {
                let ch = s[i..].chars().next().expect("in bounds");
                out.push(ch);
                i += ch.len_utf8();
            }
        }
    }
}

pub fn collapse_ws(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Escapes characters the parser would otherwise treat as markup.
pub fn escape_text(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        if matches!(c, '%' | '&' | '_' | '#' | '$' | '~' | '{' | '}' | '\\') {
            out.push('\\');
        }
        out.push(c);
    }
    out
}

/// A piece of section body: prose or one cited bib key.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Inline {
    Text(String),
    Cite(String),
}

/// Splits a section body into text runs and cite marks, one mark per key.
pub fn parse_inline(body: &str) -> Vec<Inline> {
    let mut out = Vec::new();
    let mut text = String::new();
    let mut i = 0;
    let b = body.as_bytes();
    let flush = |text: &mut String, out: &mut Vec<Inline>| {
        let t = latex_to_text(text);
        if !t.is_empty() {
            out.push(Inline::Text(t));
        }
        text.clear();
    };
    while i < body.len() {
        if b[i] == b'\\' {
            let (name, after) = control_word(body, i);
            if CITE_COMMANDS.contains(&name) {
                let j = skip_ws(body, skip_optional(body, after));
                if let Some((keys, end)) = balanced_group(body, j) {
                    flush(&mut text, &mut out);
                    for key in keys.split(',').map(str::trim).filter(|k| !k.is_empty()) {
                        out.push(Inline::Cite(key.to_string()));
                    }
                    i = end;
                    continue;
                }
            }
            text.push_str(&body[i..after]);
            i = after;
            continue;
        }
        let ch = body[i..].chars().next().expect("in bounds");
        text.push(ch);
        i += ch.len_utf8();
    }
    flush(&mut text, &mut out);
    out
}

/// Start offsets and names of every `\section` command.
pub fn find_sections(src: &str) -> Vec<(usize, usize, String)> {
    let mut out = Vec::new();
    let mut from = 0;
    while let Some(off) = src[from..].find("\\section") {
        let start = from + off;
        let after_name = start + "\\section".len();
        if src[after_name..].starts_with(|c: char| c.is_ascii_alphabetic()) {
            from = after_name;
            continue;
        }
        let j = skip_ws(src, skip_optional(src, after_name));
        match balanced_group(src, j) {
            Some((name, end)) => {
                out.push((start, end, latex_to_text(name)));
                from = end;
            }
            None => from = after_name,
        }
    }
    out
}

/// Argument of the first `\name{...}` command in `src`.
pub fn command_arg<'a>(src: &'a str, name: &str) -> Option<&'a str> {
    let pat = format!("\\{name}");
    let mut from = 0;
    while let Some(off) = src[from..].find(&pat) {
        let after = from + off + pat.len();
        if src[after..].starts_with(|c: char| c.is_ascii_alphabetic()) {
            from = after;
            continue;
        }
        let j = skip_ws(src, skip_optional(src, after));
        return balanced_group(src, j).map(|(inner, _)| inner);
    }
    None
}

/// Body of the first `\begin{env} ... \end{env}`.
pub fn environment<'a>(src: &'a str, env: &str) -> Option<&'a str> {
    let open = format!("\\begin{{{env}}}");
    let close = format!("\\end{{{env}}}");
    let start = src.find(&open)? + open.len();
    let end = src[start..].find(&close)? + start;
    Some(&src[start..end])
}
