//! Word/character hybrid tokenizer.
//!
//! Text is split into pieces: role markers, newlines, and an optional single
//! leading space followed by either a word (alphanumerics with inner
//! apostrophes) or one other character. Pieces outside the learned
//! vocabulary fall back to characters, then to raw UTF-8 bytes, so every
//! string round-trips without an unknown token.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SYSTEM: &str = "<|system|>";
pub const USER: &str = "<|user|>";
pub const ASSISTANT: &str = "<|assistant|>";
pub const SPECIALS: [&str; 3] = [SYSTEM, USER, ASSISTANT];

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric()
}

fn is_apostrophe(c: char) -> bool {
    c == '\'' || c == '\u{2019}'
}

/// Splits text into pieces. Concatenating the pieces gives back the input.
pub fn pretokenize(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    let mut rest = text;
    'outer: while !rest.is_empty() {
        for s in SPECIALS {
            if rest.starts_with(s) {
                out.push(&rest[..s.len()]);
                rest = &rest[s.len()..];
                continue 'outer;
            }
        }
        let mut chars = rest.char_indices().peekable();
        let (_, first) = chars.next().expect("non-empty");
        let mut body_start = 0;
        if first == ' ' {
            match chars.peek() {
                Some(&(i, c)) if c != ' ' && c != '\n' && !rest[i..].starts_with("<|") => {
                    body_start = i;
                }
                _ => {
                    out.push(&rest[..1]);
                    rest = &rest[1..];
                    continue;
                }
            }
        }
        let body = &rest[body_start..];
        let c0 = body.chars().next().expect("non-empty");
        let mut end = body_start + c0.len_utf8();
        if is_word_char(c0) {
            let mut it = body.char_indices().skip(1).peekable();
            while let Some((i, c)) = it.next() {
                if is_word_char(c) || (is_apostrophe(c) && it.peek().is_some_and(|&(_, n)| is_word_char(n))) {
                    end = body_start + i + c.len_utf8();
                } else {
                    break;
                }
            }
        }
        out.push(&rest[..end]);
        rest = &rest[end..];
    }
    out
}

fn byte_piece(b: u8) -> String {
    format!("<0x{b:02X}>")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    pieces: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Specials, bytes, newline, and every printable ASCII character with and
    /// without a leading space.
    pub fn base_pieces() -> Vec<String> {
        let mut v: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        v.push("\n".into());
        for c in (0x20u8..0x7f).map(char::from) {
            v.push(c.to_string());
            if c != ' ' {
                v.push(format!(" {c}"));
            }
        }
        v.extend((0..=255u8).map(byte_piece));
        v
    }

    /// Learns word pieces from `texts`, most frequent first (ties broken
    /// lexicographically), until the vocabulary holds `vocab_limit` entries.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, vocab_limit: usize) -> Result<Self> {
        let mut pieces = Self::base_pieces();
        if vocab_limit < pieces.len() {
            return Err(Error::Config(format!(
                "vocab_limit {vocab_limit} is below the {} reserved pieces",
                pieces.len()
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for t in texts {
            for p in pretokenize(t) {
                *counts.entry(p).or_default() += 1;
            }
        }
        let base: std::collections::HashSet<String> = pieces.iter().cloned().collect();
        let mut learned: Vec<(&str, usize)> = counts.into_iter().filter(|(p, _)| !base.contains(*p)).collect();
        learned.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let room = vocab_limit - pieces.len();
        pieces.extend(learned.into_iter().take(room).map(|(p, _)| p.to_string()));
        Ok(Self::from_pieces(pieces))
    }

    pub fn from_pieces(pieces: Vec<String>) -> Self {
        let index = pieces.iter().enumerate().map(|(i, p)| (p.clone(), i as u32)).collect();
        Tokenizer { pieces, index }
    }

    /// Restores the lookup table after deserialisation.
    pub fn reindex(&mut self) {
        *self = Self::from_pieces(std::mem::take(&mut self.pieces));
    }

    pub fn pieces(&self) -> &[String] {
        &self.pieces
    }

    pub fn vocab_size(&self) -> usize {
        self.pieces.len()
    }

    pub fn id(&self, piece: &str) -> Option<u32> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.pieces.get(id as usize).map(String::as_str)
    }

    fn push_fallback(&self, piece: &str, out: &mut Vec<u32>) {
        let mut chars = piece.chars();
        let mut pending = String::new();
        if piece.starts_with(' ') && piece.len() > 1 {
            chars.next();
            let c = chars.next().expect("piece has a body");
            pending = format!(" {c}");
            if let Some(id) = self.id(&pending) {
                out.push(id);
                pending.clear();
            } else {
                out.push(self.id(" ").expect("space is reserved"));
                pending = c.to_string();
            }
        }
        let rest: Vec<String> = pending.chars().chain(chars).map(|c| c.to_string()).collect();
        for c in rest {
            match self.id(&c) {
                Some(id) => out.push(id),
                None => out.extend(c.bytes().map(|b| self.id(&byte_piece(b)).expect("bytes are reserved"))),
            }
        }
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for p in pretokenize(text) {
            match self.id(p) {
                Some(id) => out.push(id),
                None => self.push_fallback(p, &mut out),
            }
        }
        out
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            let Some(p) = self.piece(id) else { continue };
            if p.len() == 6 && p.starts_with("<0x") && p.ends_with('>') {
                if let Ok(b) = u8::from_str_radix(&p[3..5], 16) {
                    bytes.push(b);
                    continue;
                }
            }
            bytes.extend_from_slice(p.as_bytes());
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }

    /// Number of '|' characters the token contributes to decoded text.
    pub fn pipe_count(&self, id: u32) -> usize {
        self.piece(id).map_or(0, |p| {
            if p.starts_with("<0x") {
                usize::from(p == "<0x7C>")
            } else {
                p.matches('|').count()
            }
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.pieces).expect("strings serialise")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let pieces: Vec<String> =
            serde_json::from_str(s).map_err(|e| Error::Config(format!("bad tokenizer vocabulary: {e}")))?;
        Ok(Self::from_pieces(pieces))
    }
}
