//! Tolerant HTML scanning: tag-frequency vectors and canonical text tokens.

use std::collections::BTreeMap;

/// Occurrence count per lowercase opening-tag name.
pub type TagVector = BTreeMap<String, u32>;

enum Piece<'a> {
    Text(&'a str),
    /// Opening (or self-closing) tag with its lowercase name.
    Open(String),
    /// Anything else that is markup: closing tags, comments, declarations.
    Markup,
}

fn find_ci(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w.eq_ignore_ascii_case(needle))
}

/// Index just past the `>` closing a tag starting at `from`, honoring quoted
/// attribute values. `None` when the tag never closes.
fn tag_end(b: &[u8], from: usize) -> Option<usize> {
    let mut quote: Option<u8> = None;
    for (i, &c) in b.iter().enumerate().skip(from) {
        match quote {
            Some(q) if c == q => quote = None,
            Some(_) => {}
            None if c == b'"' || c == b'\'' => quote = Some(c),
            None if c == b'>' => return Some(i + 1),
            None => {}
        }
    }
    None
}

/// Splits a document into text runs and markup. Script and style contents are
/// reported as markup so they contribute neither tags nor text.
fn scan(doc: &str) -> Vec<Piece<'_>> {
    let b = doc.as_bytes();
    let mut out = Vec::new();
    let mut text_start = 0;
    let mut i = 0;
    while i < b.len() {
        if b[i] != b'<' {
            i += 1;
            continue;
        }
        let rest = &b[i..];
        let (end, piece) = if rest.starts_with(b"<!--") {
            let end = find_ci(&rest[4..], b"-->").map_or(b.len(), |p| i + 4 + p + 3);
            (end, Piece::Markup)
        } else if rest.len() > 1 && (rest[1] == b'!' || rest[1] == b'?' || rest[1] == b'/') {
            match tag_end(b, i + 1) {
                Some(end) => (end, Piece::Markup),
                None => {
                    i += 1;
                    continue;
                }
            }
        } else if rest.len() > 1 && rest[1].is_ascii_alphabetic() {
            let name_len = rest[1..]
                .iter()
                .take_while(|c| c.is_ascii_alphanumeric() || **c == b'-' || **c == b':')
                .count();
            let name = doc[i + 1..i + 1 + name_len].to_ascii_lowercase();
            match tag_end(b, i + 1 + name_len) {
                Some(mut end) => {
                    if name == "script" || name == "style" {
                        let close = format!("</{name}");
                        end = find_ci(&b[end..], close.as_bytes())
                            .and_then(|p| tag_end(b, end + p))
                            .unwrap_or(b.len());
                    }
                    (end, Piece::Open(name))
                }
                None => {
                    i += 1;
                    continue;
                }
            }
        } else {
            i += 1;
            continue;
        };
        if text_start < i {
            out.push(Piece::Text(&doc[text_start..i]));
        }
        out.push(piece);
        i = end;
        text_start = end;
    }
    if text_start < b.len() {
        out.push(Piece::Text(&doc[text_start..]));
    }
    out
}

/// Counts every well-formed opening tag. Unterminated fragments are ignored;
/// closing tags and comments are not counted.
pub fn tag_vector(body: &[u8]) -> TagVector {
    let doc = String::from_utf8_lossy(body);
    let mut v = TagVector::new();
    for piece in scan(&doc) {
        if let Piece::Open(name) = piece {
            *v.entry(name).or_insert(0) += 1;
        }
    }
    v
}

fn named_entity(name: &str) -> Option<char> {
    Some(match name {
        "amp" => '&',
        "lt" => '<',
        "gt" => '>',
        "quot" => '"',
        "apos" => '\'',
        "nbsp" => ' ',
        "rsquo" | "lsquo" => '\'',
        "ldquo" | "rdquo" => '"',
        "ndash" | "mdash" => '-',
        "copy" => '©',
        _ => return None,
    })
}

pub fn decode_entities(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(amp) = rest.find('&') {
        out.push_str(&rest[..amp]);
        let tail = &rest[amp + 1..];
        let decoded = tail.find(';').filter(|&semi| semi <= 10).and_then(|semi| {
            let ent = &tail[..semi];
            let c = if let Some(num) = ent.strip_prefix('#') {
                let code = match num.strip_prefix(['x', 'X']) {
                    Some(hex) => u32::from_str_radix(hex, 16).ok()?,
                    None => num.parse().ok()?,
                };
                char::from_u32(code)?
            } else {
                named_entity(ent)?
            };
            Some((c, semi + 1))
        });
        match decoded {
            Some((c, consumed)) => {
                out.push(c);
                rest = &tail[consumed..];
            }
            None => {
                out.push('&');
                rest = tail;
            }
        }
    }
    out.push_str(rest);
    out
}

fn normalize_apostrophe(c: char) -> char {
    match c {
        '\u{2018}' | '\u{2019}' | '`' => '\'',
        other => other,
    }
}

/// Word tokens of the document's visible text: markup removed, entities
/// decoded, lowercased, split on anything but letters, digits and inner
/// apostrophes.
pub fn canonicalize_text(body: &[u8]) -> Vec<String> {
    let doc = String::from_utf8_lossy(body);
    let mut text = String::with_capacity(doc.len());
    for piece in scan(&doc) {
        match piece {
            Piece::Text(t) => text.push_str(t),
            _ => text.push(' '),
        }
    }
    let text = decode_entities(&text).to_lowercase();
    text.split(|c: char| {
        let c = normalize_apostrophe(c);
        !(c.is_alphanumeric() || c == '\'')
    })
    .map(|w| {
        w.chars()
            .map(normalize_apostrophe)
            .collect::<String>()
            .trim_matches('\'')
            .to_string()
    })
    .filter(|w| !w.is_empty())
    .collect()
}
