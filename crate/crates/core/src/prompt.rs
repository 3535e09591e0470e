//! Tabular-to-text prompt rendering and the word-level tokenizer that feeds
//! the text tower.
//!
//! All five templates render the user side, then the item side (context
//! fields ride along with the item), each side closed by a period:
//!
//! 1. `This is a user, gender is female, ..., who has recently watched A|B. This is a movie, title is X, ...`
//! 2. `gender-female, ..., history-A|B. title-X, ...`
//! 3. `female, ..., A|B. X, ...`
//! 4. `Field-female, ..., Field-A|B. Field-X, ...`
//! 5. `gender:female, ..., history:A|B. title:X, ...`

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::{FeatureSchema, Side, TabularInstance};
use crate::error::{CtrlError, Result};

pub const MASK_WORD: &str = "Field";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum PromptTemplate {
    /// Natural-language "field is value" clauses with side openers.
    Descriptive = 1,
    /// `field-value`, no auxiliary text.
    Hyphenated = 2,
    /// Values only.
    ValuesOnly = 3,
    /// `Field-value`: every field name masked by one shared word.
    Masked = 4,
    /// `field:value`.
    Colon = 5,
}

impl TryFrom<u8> for PromptTemplate {
    type Error = CtrlError;

    fn try_from(v: u8) -> Result<Self> {
        Ok(match v {
            1 => Self::Descriptive,
            2 => Self::Hyphenated,
            3 => Self::ValuesOnly,
            4 => Self::Masked,
            5 => Self::Colon,
            other => return Err(CtrlError::Config(format!("prompt variant {other} not in 1..=5"))),
        })
    }
}

impl From<PromptTemplate> for u8 {
    fn from(t: PromptTemplate) -> u8 {
        t as u8
    }
}

impl std::fmt::Display for PromptTemplate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", *self as u8)
    }
}

impl PromptTemplate {
    pub const ALL: [PromptTemplate; 5] = [
        Self::Descriptive,
        Self::Hyphenated,
        Self::ValuesOnly,
        Self::Masked,
        Self::Colon,
    ];

    fn clause(self, name: &str, phrase: Option<&str>, value: &str) -> String {
        match self {
            Self::Descriptive => match phrase {
                Some(p) => format!("{p} {value}"),
                None => format!("{name} is {value}"),
            },
            Self::Hyphenated => format!("{name}-{value}"),
            Self::ValuesOnly => value.to_string(),
            Self::Masked => format!("{MASK_WORD}-{value}"),
            Self::Colon => format!("{name}:{value}"),
        }
    }
}

/// Renders one instance. Field order follows the schema; fields with
/// `in_prompt = false` are skipped.
pub fn build_prompt(instance: &TabularInstance, schema: &FeatureSchema, template: PromptTemplate) -> Result<String> {
    if instance.raw.len() != schema.num_fields() {
        return Err(CtrlError::Prompt(format!(
            "instance has {} fields, schema has {}",
            instance.raw.len(),
            schema.num_fields()
        )));
    }
    let mut user = Vec::new();
    let mut item = Vec::new();
    for (field, values) in schema.fields.iter().zip(&instance.raw) {
        if !field.in_prompt || values.is_empty() || values.iter().all(|v| v.is_empty()) {
            continue;
        }
        let value = values.join("|");
        let clause = template.clause(&field.name, field.phrase.as_deref(), &value);
        match field.side {
            Side::User => user.push(clause),
            Side::Item | Side::Context => item.push(clause),
        }
    }
    if user.is_empty() && item.is_empty() {
        return Err(CtrlError::Prompt("instance has no renderable feature".into()));
    }
    let sentence = |opener: Option<String>, clauses: Vec<String>| -> String {
        let mut parts: Vec<String> = opener.into_iter().collect();
        parts.extend(clauses);
        format!("{}.", parts.join(", "))
    };
    let (user_open, item_open) = match template {
        PromptTemplate::Descriptive => (
            Some(format!("This is a {}", schema.user_noun)),
            Some(format!("This is a {}", schema.item_noun)),
        ),
        _ => (None, None),
    };
    let mut sentences = Vec::with_capacity(2);
    if !user.is_empty() {
        sentences.push(sentence(user_open, user));
    }
    if !item.is_empty() {
        sentences.push(sentence(item_open, item));
    }
    Ok(sentences.join(" "))
}

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";

/// Lower-cased whitespace tokenizer where every ASCII punctuation mark is a
/// token of its own.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    /// `tokens[id]`; ids 0 and 1 are pad and unknown.
    tokens: Vec<String>,
    pub lowercase: bool,
    pub max_tokens: usize,
    #[serde(skip)]
    ids: HashMap<String, usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub lowercase: bool,
    pub max_tokens: usize,
    pub min_count: usize,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            lowercase: true,
            max_tokens: 128,
            min_count: 1,
        }
    }
}

/// Splits text into word and punctuation pieces.
pub fn split_words(text: &str, lowercase: bool) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else if lowercase {
            cur.extend(ch.to_lowercase());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Token ids of one text plus its attention mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub mask: Vec<f64>,
    /// True when the input produced no tokens and a lone pad stands in.
    pub empty: bool,
}

/// Row-major `[N, len]` ids and mask, padded to the longest row.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub mask: Vec<f64>,
    pub rows: usize,
    pub len: usize,
}

impl Tokenizer {
    /// Fits a first-seen-ordered vocabulary on `corpus`.
    pub fn fit<S: AsRef<str>>(corpus: &[S], config: TokenizerConfig) -> Result<Self> {
        if corpus.is_empty() {
            return Err(CtrlError::Prompt("cannot fit a tokenizer on an empty corpus".into()));
        }
        if config.max_tokens == 0 {
            return Err(CtrlError::Config("max_tokens must be positive".into()));
        }
        let mut order: Vec<String> = Vec::new();
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in corpus {
            for w in split_words(text.as_ref(), config.lowercase) {
                let c = counts.entry(w.clone()).or_insert(0);
                if *c == 0 {
                    order.push(w);
                }
                *c += 1;
            }
        }
        let mut tokens = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        tokens.extend(order.into_iter().filter(|w| counts[w] >= config.min_count));
        Ok(Self::from_tokens(tokens, config.lowercase, config.max_tokens))
    }

    fn from_tokens(tokens: Vec<String>, lowercase: bool, max_tokens: usize) -> Self {
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self {
            tokens,
            lowercase,
            max_tokens,
            ids,
        }
    }

    /// Restores the lookup table after deserialization.
    pub fn reindex(mut self) -> Self {
        self.ids = self.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        self
    }

    pub fn vocab_size(&self) -> usize {
        self.tokens.len()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Head-truncated ids; an empty text becomes a single masked pad.
    pub fn encode(&self, text: &str) -> Encoded {
        let mut ids: Vec<usize> = split_words(text, self.lowercase)
            .iter()
            .map(|w| self.ids.get(w).copied().unwrap_or(UNK_ID))
            .collect();
        ids.truncate(self.max_tokens);
        if ids.is_empty() {
            return Encoded {
                ids: vec![PAD_ID],
                mask: vec![0.0],
                empty: true,
            };
        }
        let mask = vec![1.0; ids.len()];
        Encoded {
            ids,
            mask,
            empty: false,
        }
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD_ID)
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn encode_batch<S: AsRef<str>>(&self, texts: &[S]) -> TokenBatch {
        let encoded: Vec<Encoded> = texts.iter().map(|t| self.encode(t.as_ref())).collect();
        pad_batch(&encoded)
    }
}

/// Pads already-encoded rows into one batch.
pub fn pad_batch(rows: &[Encoded]) -> TokenBatch {
    let len = rows.iter().map(|e| e.ids.len()).max().unwrap_or(1).max(1);
    let mut ids = vec![PAD_ID; rows.len() * len];
    let mut mask = vec![0.0; rows.len() * len];
    for (r, e) in rows.iter().enumerate() {
        ids[r * len..r * len + e.ids.len()].copy_from_slice(&e.ids);
        mask[r * len..r * len + e.mask.len()].copy_from_slice(&e.mask);
    }
    TokenBatch {
        ids,
        mask,
        rows: rows.len(),
        len,
    }
}
