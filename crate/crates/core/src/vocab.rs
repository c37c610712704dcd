//! Vocabulary and the whitespace/punctuation tokenizer used by the toy backend.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{PetError, Result};

pub type TokenId = u32;

pub const MASK_TOKEN: &str = "<mask>";
pub const SEP_TOKEN: &str = "<sep>";
pub const UNK_TOKEN: &str = "<unk>";

/// Turns text into token ids. Implemented by [`Vocabulary`] and by backends
/// that tokenize remotely.
pub trait Tokenizer {
    fn encode(&self, text: &str) -> Result<Vec<TokenId>>;
    fn mask_id(&self) -> TokenId;
    /// Separator emitted for segment boundaries, if the backend uses one.
    fn sep_id(&self) -> Option<TokenId>;
    /// Resolves `word` to exactly one token, failing if it is unknown or splits.
    fn single_token(&self, word: &str) -> Result<TokenId>;
}

/// Splits on whitespace, then separates runs of alphanumeric characters from
/// individual punctuation characters. Special tokens of the form `<...>` are
/// kept whole.
pub fn split_words(text: &str) -> Vec<&str> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut start = None;
        let mut skip_to = 0;
        for (i, c) in word.char_indices() {
            if i < skip_to {
                continue;
            }
            if c == '<' {
                if let Some(len) = special_len(&word[i..]) {
                    if let Some(s) = start.take() {
                        out.push(&word[s..i]);
                    }
                    out.push(&word[i..i + len]);
                    skip_to = i + len;
                    continue;
                }
            }
            if c.is_alphanumeric() || c == '\'' {
                if start.is_none() {
                    start = Some(i);
                }
            } else {
                if let Some(s) = start.take() {
                    out.push(&word[s..i]);
                }
                out.push(&word[i..i + c.len_utf8()]);
            }
        }
        if let Some(s) = start {
            out.push(&word[s..]);
        }
    }
    out
}

/// Length of a leading `<name>` special token, if any.
fn special_len(s: &str) -> Option<usize> {
    let close = s.find('>')?;
    let name = &s[1..close];
    (!name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')).then_some(close + 1)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(from = "VocabularyRepr")]
pub struct Vocabulary {
    tokens: Vec<String>,
    mask: TokenId,
    sep: Option<TokenId>,
    unk: Option<TokenId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frequencies: Option<Vec<u64>>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

#[derive(Deserialize)]
struct VocabularyRepr {
    tokens: Vec<String>,
    mask: TokenId,
    sep: Option<TokenId>,
    unk: Option<TokenId>,
    #[serde(default)]
    frequencies: Option<Vec<u64>>,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(r: VocabularyRepr) -> Self {
        let mut v = Vocabulary {
            tokens: r.tokens,
            mask: r.mask,
            sep: r.sep,
            unk: r.unk,
            frequencies: r.frequencies,
            index: HashMap::new(),
        };
        v.reindex();
        v
    }
}

impl Vocabulary {
    /// Builds a vocabulary from explicit token strings. `mask` must appear
    /// exactly once.
    pub fn from_tokens(
        tokens: Vec<String>,
        mask: &str,
        sep: Option<&str>,
        unk: Option<&str>,
    ) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(PetError::Vocabulary(format!("duplicate token {t:?}")));
            }
        }
        let find = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| PetError::Vocabulary(format!("special token {name:?} missing")))
        };
        let mask = find(mask)?;
        let sep = sep.map(find).transpose()?;
        let unk = unk.map(find).transpose()?;
        Ok(Vocabulary {
            tokens,
            mask,
            sep,
            unk,
            frequencies: None,
            index,
        })
    }

    /// Builds a vocabulary with the three special tokens first, followed by
    /// every token of `texts` in first-occurrence order, then `extra` words.
    pub fn build<'a>(
        texts: impl IntoIterator<Item = &'a str>,
        extra: impl IntoIterator<Item = &'a str>,
    ) -> Self {
        let mut tokens: Vec<String> = vec![MASK_TOKEN.into(), SEP_TOKEN.into(), UNK_TOKEN.into()];
        let mut seen: HashMap<String, ()> = tokens.iter().map(|t| (t.clone(), ())).collect();
        for text in texts.into_iter().chain(extra) {
            for w in split_words(text) {
                if !seen.contains_key(w) {
                    seen.insert(w.to_string(), ());
                    tokens.push(w.to_string());
                }
            }
        }
        Self::from_tokens(tokens, MASK_TOKEN, Some(SEP_TOKEN), Some(UNK_TOKEN))
            .expect("specials are present and tokens are deduplicated")
    }

    fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
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

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(PetError::TokenOutOfRange(id as usize))
    }

    pub fn unk_id(&self) -> Option<TokenId> {
        self.unk
    }

    pub fn is_special(&self, id: TokenId) -> bool {
        id == self.mask || Some(id) == self.sep || Some(id) == self.unk
    }

    pub fn check(&self, id: TokenId) -> Result<()> {
        if (id as usize) < self.tokens.len() {
            Ok(())
        } else {
            Err(PetError::TokenOutOfRange(id as usize))
        }
    }

    pub fn frequencies(&self) -> Option<&[u64]> {
        self.frequencies.as_deref()
    }

    /// Counts token occurrences over `texts` (normally the unlabeled pool).
    pub fn count_frequencies<'a>(&mut self, texts: impl IntoIterator<Item = &'a str>) {
        let mut counts = vec![0u64; self.tokens.len()];
        for text in texts {
            for w in split_words(text) {
                if let Some(id) = self.id(w) {
                    counts[id as usize] += 1;
                }
            }
        }
        self.frequencies = Some(counts);
    }

    pub fn set_frequencies(&mut self, counts: Vec<u64>) -> Result<()> {
        if counts.len() != self.tokens.len() {
            return Err(PetError::Vocabulary(format!(
                "frequency table has {} entries for {} tokens",
                counts.len(),
                self.tokens.len()
            )));
        }
        self.frequencies = Some(counts);
        Ok(())
    }
}

impl Tokenizer for Vocabulary {
    fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        split_words(text)
            .into_iter()
            .map(|w| match self.id(w) {
                Some(id) => Ok(id),
                None => self.unk.ok_or_else(|| PetError::UnknownToken(w.to_string())),
            })
            .collect()
    }

    fn mask_id(&self) -> TokenId {
        self.mask
    }

    fn sep_id(&self) -> Option<TokenId> {
        self.sep
    }

    fn single_token(&self, word: &str) -> Result<TokenId> {
        let parts = split_words(word);
        if parts.len() != 1 {
            return Err(PetError::Verbalizer(format!(
                "{word:?} is not a single token ({} pieces)",
                parts.len()
            )));
        }
        let id = self
            .id(parts[0])
            .ok_or_else(|| PetError::UnknownToken(word.to_string()))?;
        if id == self.mask {
            return Err(PetError::Verbalizer("verbalizer may not use the mask token".into()));
        }
        Ok(id)
    }
}
