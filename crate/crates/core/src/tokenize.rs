//! Whitespace tokenization with punctuation splitting, and the vocabulary.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;

/// A tokenized sentence. Offsets count Unicode scalar values, end exclusive.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    pub text: String,
    pub tokens: Vec<String>,
    pub char_start: Vec<usize>,
    pub char_end: Vec<usize>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Surface text of the 1-based inclusive token span `[start, end]`.
    pub fn span_text(&self, start: usize, end: usize) -> String {
        if start == 0 || end < start || end > self.len() {
            return String::new();
        }
        self.text
            .chars()
            .skip(self.char_start[start - 1])
            .take(self.char_end[end - 1] - self.char_start[start - 1])
            .collect()
    }

    /// 1-based start of the leftmost whole-token occurrence of `needle`.
    pub fn find(&self, needle: &[String]) -> Option<usize> {
        if needle.is_empty() || needle.len() > self.len() {
            return None;
        }
        (0..=self.len() - needle.len())
            .find(|&s| self.tokens[s..s + needle.len()] == *needle)
            .map(|s| s + 1)
    }
}

/// Splits on whitespace; every non-alphanumeric character becomes its own
/// token.
pub fn tokenize(text: &str) -> TokenSeq {
    let mut seq = TokenSeq {
        text: text.to_string(),
        tokens: Vec::new(),
        char_start: Vec::new(),
        char_end: Vec::new(),
    };
    let mut current: Option<(usize, String)> = None;
    let flush = |cur: &mut Option<(usize, String)>, end: usize, seq: &mut TokenSeq| {
        if let Some((start, tok)) = cur.take() {
            seq.tokens.push(tok);
            seq.char_start.push(start);
            seq.char_end.push(end);
        }
    };
    for (i, ch) in text.chars().enumerate() {
        if ch.is_whitespace() {
            flush(&mut current, i, &mut seq);
        } else if ch.is_alphanumeric() {
            current.get_or_insert_with(|| (i, String::new())).1.push(ch);
        } else {
            flush(&mut current, i, &mut seq);
            current = Some((i, ch.to_string()));
            flush(&mut current, i + 1, &mut seq);
        }
    }
    flush(&mut current, text.chars().count(), &mut seq);
    seq
}

/// Token strings for an entity mention, tokenized like sentences.
pub fn tokenize_words(text: &str) -> Vec<String> {
    tokenize(text).tokens
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut v = Vocab {
            words: Vec::new(),
            index: HashMap::new(),
        };
        v.add("<pad>");
        v.add("<unk>");
        v
    }
}

impl Vocab {
    /// Every distinct token of `sentences`, in first-seen order.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a TokenSeq>) -> Self {
        let mut v = Vocab::default();
        for s in sentences {
            for t in &s.tokens {
                v.add(t);
            }
        }
        v
    }

    pub fn add(&mut self, word: &str) -> usize {
        if let Some(&id) = self.index.get(word) {
            return id;
        }
        let id = self.words.len();
        self.words.push(word.to_string());
        self.index.insert(word.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn ids(&self, seq: &TokenSeq) -> Vec<usize> {
        seq.tokens.iter().map(|t| self.id(t)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.words.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::file(path, e))
    }

    /// One token per line; line number is the id. Lines 0 and 1 are the
    /// reserved PAD and UNK entries, whatever their spelling.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut v = Vocab {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for (n, line) in text.lines().enumerate() {
            if v.index.contains_key(line) {
                return Err(Error::data(format!("{}: duplicate token {line:?} on line {}", path.display(), n + 1)));
            }
            v.words.push(line.to_string());
            v.index.insert(line.to_string(), n);
        }
        if v.len() < 2 {
            return Err(Error::data(format!("{}: vocabulary lacks PAD/UNK lines", path.display())));
        }
        Ok(v)
    }
}
