//! Token vocabulary shared by the language model, the simulated recognizer
//! and the corpus generator.
//!
//! Layout: reserved markers first, then the base tokens (words, fillers,
//! fragments, phones), then the label alphabet (`Blk` .. `Mod`, `None`, `;`,
//! `[EOS]`) as one contiguous tail. The tail is what the adapters treat as
//! newly added tokens.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{DysfluencyClass, NONE_TAG};

pub type TokenId = u32;

pub const PAD: &str = "[PAD]";
pub const BOS: &str = "[BOS]";
pub const LAB: &str = "[LAB]";
pub const SEP: &str = "[SEP]";
pub const UNK: &str = "[UNK]";
pub const EOS: &str = "[EOS]";
pub const LABEL_SEPARATOR: &str = ";";

const MARKERS: [&str; 5] = [PAD, BOS, LAB, SEP, UNK];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Alphabet {
    Word,
    Phone,
    Label,
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub alphabet: Alphabet,
}

impl TokenSequence {
    pub fn new(ids: Vec<TokenId>, alphabet: Alphabet) -> Self {
        TokenSequence { ids, alphabet }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
    label_start: usize,
}

fn label_alphabet() -> Vec<String> {
    DysfluencyClass::ALL
        .iter()
        .map(|c| c.tag().to_string())
        .chain([NONE_TAG, LABEL_SEPARATOR, EOS].map(String::from))
        .collect()
}

impl Vocab {
    /// Build a vocabulary from base tokens; duplicates and reserved names are
    /// rejected.
    pub fn new<I, S>(base: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = MARKERS.iter().map(|s| s.to_string()).collect();
        tokens.extend(base.into_iter().map(Into::into));
        let label_start = tokens.len();
        tokens.extend(label_alphabet());
        Self::from_tokens(tokens, label_start)
    }

    /// Rebuild from a stored token list (checkpoint metadata).
    pub fn from_tokens(tokens: Vec<String>, label_start: usize) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid token {t:?}")));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::Config(format!("duplicate token {t:?}")));
            }
        }
        let vocab = Vocab {
            tokens,
            index,
            label_start,
        };
        let expected = label_alphabet();
        if vocab.tokens.get(label_start..) != Some(&expected[..])
            || MARKERS
                .iter()
                .enumerate()
                .any(|(i, m)| vocab.tokens.get(i).map(String::as_str) != Some(*m))
        {
            return Err(Error::Config("vocabulary layout is corrupted".into()));
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Index of the first label-alphabet token.
    pub fn label_start(&self) -> usize {
        self.label_start
    }

    pub fn n_label_tokens(&self) -> usize {
        self.tokens.len() - self.label_start
    }

    pub fn is_label_token(&self, id: TokenId) -> bool {
        (id as usize) >= self.label_start
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> TokenId {
        self.id(token).unwrap_or_else(|| self.unk())
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id as usize).map_or(UNK, String::as_str)
    }

    pub fn pad(&self) -> TokenId {
        0
    }
    pub fn bos(&self) -> TokenId {
        1
    }
    pub fn lab(&self) -> TokenId {
        2
    }
    pub fn sep(&self) -> TokenId {
        3
    }
    pub fn unk(&self) -> TokenId {
        4
    }
    pub fn eos(&self) -> TokenId {
        (self.tokens.len() - 1) as TokenId
    }

    /// Whitespace tokenization; unknown words map to `[UNK]`.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace().map(|w| self.id_or_unk(w)).collect()
    }

    pub fn encode_words<S: AsRef<str>>(&self, words: &[S]) -> Vec<TokenId> {
        words.iter().map(|w| self.id_or_unk(w.as_ref())).collect()
    }

    /// Space-joined surface form.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Concatenated surface form, the way generated label strings are read.
    pub fn detokenize(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    /// Token ids of a serialized label string (`Blk;Int` -> Blk ; Int).
    pub fn encode_label_string(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::new();
        for (i, part) in text.split(';').enumerate() {
            if i > 0 {
                out.push(self.id_or_unk(LABEL_SEPARATOR));
            }
            out.push(self.id_or_unk(part));
        }
        out
    }
}
