//! Word-level vocabulary with the conversation special tokens.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const POINT: &str = "<point>";
pub const EOS: &str = "</s>";
pub const NEWLINE: &str = "\n";
pub const USER: &str = "USER:";
pub const ASSISTANT: &str = "ASSISTANT:";

/// Special tokens in id order; ids `0..SPECIALS.len()` are reserved for them.
pub const SPECIALS: [&str; 6] = [UNK, POINT, EOS, NEWLINE, USER, ASSISTANT];

const PUNCTUATION: &[char] = &['.', ',', '?', '!', ';', ':'];

/// Split text into word and punctuation tokens.
///
/// Special tokens written inline (for example `<point>`) come out as single
/// tokens, so callers can detect them.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        if SPECIALS.contains(&word) {
            out.push(word.to_string());
            continue;
        }
        let trimmed = word.trim_end_matches(PUNCTUATION);
        if !trimmed.is_empty() {
            out.push(trimmed.to_string());
        }
        out.extend(word[trimmed.len()..].chars().map(String::from));
    }
    out
}

/// Join tokens back into text, attaching punctuation to the previous word.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for t in tokens {
        let t = t.as_ref();
        let attach = t.len() == 1 && t.starts_with(PUNCTUATION);
        if !out.is_empty() && !attach {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

/// Bijection between token strings and ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::format("vocabulary", "must start with the special tokens in order"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::format("vocabulary", format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Specials followed by every distinct token of `texts` in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> =
            texts.into_iter().flat_map(tokenize).filter(|w| !SPECIALS.contains(&w.as_str())).collect();
        let tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).chain(words).collect();
        Self::try_from(tokens).expect("specials are distinct from words")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Id of `token`, the unknown id when absent.
    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn point_id(&self) -> usize {
        1
    }

    pub fn eos_id(&self) -> usize {
        2
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    /// Text of `ids`; out-of-range ids decode as the unknown token.
    pub fn decode(&self, ids: &[usize]) -> String {
        let toks: Vec<&str> = ids.iter().map(|&i| self.token(i).unwrap_or(UNK)).collect();
        detokenize(&toks)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
