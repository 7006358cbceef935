use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const SYS: &str = "<sys>";
pub const EOS: &str = "<eos>";
pub const ANSWER: &str = "answer";
pub const TRANSCRIBE: &str = "transcribe";

const SPECIAL: [&str; 2] = [SYS, EOS];

const WORDS: [&str; 28] = [
    ANSWER, TRANSCRIBE, "is", "there", "a", "b", "what", "color", "shape", "at", "row", "col", "how",
    "many", "describe", "the", "grid", "which", "matches", "or", "left", "of", "above", "empty",
    "yes", "no", "object", "image",
];

pub const COLORS: [&str; 4] = ["red", "green", "blue", "yellow"];
pub const SHAPES: [&str; 3] = ["circle", "square", "triangle"];

/// Closed word-level vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Standard vocabulary for a `grid_size × grid_size` world: special
    /// tokens, template words, colors, shapes and the numbers `0..=G²`.
    pub fn standard(grid_size: usize) -> Self {
        let mut words: Vec<String> = SPECIAL.iter().chain(&WORDS).map(|s| s.to_string()).collect();
        words.extend(COLORS.iter().chain(&SHAPES).map(|s| s.to_string()));
        words.extend((0..=grid_size * grid_size).map(|n| n.to_string()));
        Self::from_words(words).expect("standard vocabulary has unique words")
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i as TokenId).is_some() {
                return Err(Error::Format { field: "vocab".into(), reason: format!("duplicate word {w:?}") });
            }
        }
        Ok(Self { words, index })
    }

    /// Restores the lookup table after deserialization.
    pub(crate) fn reindex(&mut self) -> Result<()> {
        *self = Self::from_words(std::mem::take(&mut self.words))?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Result<TokenId> {
        self.index.get(word).copied().ok_or_else(|| Error::UnknownToken(word.to_string()))
    }

    /// Lookup for words that the standard vocabulary is known to contain.
    pub(crate) fn id_of(&self, word: &str) -> TokenId {
        self.index[word]
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter().map(|&i| self.word(i).unwrap_or("<unk>")).collect::<Vec<_>>().join(" ")
    }

    pub fn eos(&self) -> TokenId {
        self.id_of(EOS)
    }

    /// Tokens that may appear in spoken or transcribed content.
    pub fn content_ids(&self) -> Vec<TokenId> {
        (0..self.len() as TokenId).filter(|&i| !SPECIAL.contains(&self.words[i as usize].as_str())).collect()
    }
}
