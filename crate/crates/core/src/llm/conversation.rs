//! Instruction conversations around a point-token placeholder.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::llm::vocab::{tokenize, Vocab, ASSISTANT, NEWLINE, POINT, SPECIALS, USER};

/// Authored instruction strings; none of them is taken from published material.
pub const DEFAULT_TEMPLATES: [&str; 11] = [
    "describe this 3D shape.",
    "what object is shown here?",
    "give a short caption for this point cloud.",
    "what does this shape look like?",
    "name the object in this scan.",
    "summarize the geometry you see.",
    "briefly caption the 3D model.",
    "what kind of shape is this?",
    "tell me what this point cloud represents.",
    "write one phrase describing the object.",
    "identify the 3D object.",
];

pub fn default_templates() -> Vec<String> {
    DEFAULT_TEMPLATES.iter().map(|s| s.to_string()).collect()
}

/// Where the point block sits relative to the instruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Layout {
    /// `USER: <point> \n instruction ASSISTANT: caption </s>`
    PointFirst,
    /// `USER: instruction \n <point> ASSISTANT: caption </s>`
    PointLast,
}

/// One line of a conversation file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conversation {
    pub id: String,
    pub layout: Layout,
    pub instruction: String,
    pub caption: String,
}

fn has_special(text: &str) -> bool {
    tokenize(text).iter().any(|t| SPECIALS.contains(&t.as_str()))
}

impl Conversation {
    /// Token strings of the full conversation, exactly one placeholder included.
    pub fn tokens(&self) -> Vec<String> {
        let s = |x: &str| x.to_string();
        let mut out = vec![s(USER)];
        match self.layout {
            Layout::PointFirst => {
                out.extend([s(POINT), s(NEWLINE)]);
                out.extend(tokenize(&self.instruction));
            }
            Layout::PointLast => {
                out.extend(tokenize(&self.instruction));
                out.extend([s(NEWLINE), s(POINT)]);
            }
        }
        out.push(s(ASSISTANT));
        out.extend(tokenize(&self.caption));
        out.push(s(crate::llm::vocab::EOS));
        out
    }

    /// Texts that feed the vocabulary.
    pub fn texts(&self) -> [&str; 2] {
        [&self.instruction, &self.caption]
    }

    /// Token ids plus a mask that is true on the caption and end-of-sequence tokens.
    pub fn render(&self, vocab: &Vocab) -> Result<ConversationRecord> {
        if has_special(&self.caption) || has_special(&self.instruction) {
            return Err(Error::InvalidArgument(format!("conversation {:?} contains a reserved token", self.id)));
        }
        let tokens = self.tokens();
        let ids: Vec<usize> = tokens.iter().map(|t| vocab.id(t)).collect();
        let answer = tokens.iter().position(|t| t == ASSISTANT).expect("rendered above") + 1;
        let mask = (0..ids.len()).map(|i| i >= answer).collect();
        Ok(ConversationRecord { conversation: self.clone(), ids, mask, prompt_len: answer })
    }
}

/// A conversation rendered against a vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConversationRecord {
    pub conversation: Conversation,
    pub ids: Vec<usize>,
    /// True on the tokens the model is trained to produce.
    pub mask: Vec<bool>,
    /// Tokens up to and including `ASSISTANT:`.
    pub prompt_len: usize,
}

impl ConversationRecord {
    pub fn placeholder_positions(&self, vocab: &Vocab) -> Vec<usize> {
        self.ids.iter().enumerate().filter(|(_, &t)| t == vocab.point_id()).map(|(i, _)| i).collect()
    }

    /// Caption ids followed by the end-of-sequence id.
    pub fn answer_ids(&self) -> &[usize] {
        &self.ids[self.prompt_len..]
    }
}

/// One conversation per caption with a uniformly drawn template and layout.
pub fn build_conversations(captions: &[(String, String)], templates: &[String], seed: u64) -> Result<Vec<Conversation>> {
    if templates.is_empty() {
        return Err(Error::InvalidArgument("at least one instruction template is required".into()));
    }
    if captions.is_empty() {
        return Err(Error::InvalidArgument("no captions to build conversations from".into()));
    }
    if let Some(t) = templates.iter().find(|t| has_special(t)) {
        return Err(Error::InvalidArgument(format!("template {t:?} contains a reserved token")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    captions
        .iter()
        .map(|(id, caption)| {
            if has_special(caption) {
                return Err(Error::InvalidArgument(format!("caption of {id:?} contains a reserved token")));
            }
            if tokenize(caption).is_empty() {
                return Err(Error::InvalidArgument(format!("caption of {id:?} is empty")));
            }
            let instruction = templates[rng.random_range(0..templates.len())].clone();
            let layout = if rng.random_bool(0.5) { Layout::PointFirst } else { Layout::PointLast };
            Ok(Conversation { id: id.clone(), layout, instruction, caption: caption.clone() })
        })
        .collect()
}

fn read_jsonl<R: for<'de> Deserialize<'de>>(path: &Path, what: &'static str) -> Result<Vec<R>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::format(what, format!("line {}: {e}", n + 1))))
        .collect()
}

fn write_jsonl<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in rows {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_conversations(path: &Path) -> Result<Vec<Conversation>> {
    read_jsonl(path, "conversation file")
}

pub fn write_conversations(path: &Path, convs: &[Conversation]) -> Result<()> {
    write_jsonl(path, convs)
}

/// One `{id, caption}` line of an external caption file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionRecord {
    pub id: String,
    pub caption: String,
}

pub fn read_captions(path: &Path) -> Result<Vec<(String, String)>> {
    Ok(read_jsonl::<CaptionRecord>(path, "caption file")?.into_iter().map(|r| (r.id, r.caption)).collect())
}

/// One line of a decode report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodedCaption {
    pub id: String,
    pub prediction: String,
    pub exact_match: bool,
}

pub fn write_decoded(path: &Path, rows: &[DecodedCaption]) -> Result<()> {
    write_jsonl(path, rows)
}

pub fn read_decoded(path: &Path) -> Result<Vec<DecodedCaption>> {
    read_jsonl(path, "decode report")
}
