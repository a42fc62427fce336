use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::tokenize;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const DGT: usize = 4;

/// Reserved tokens, in id order.
pub const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<dgt>"];

/// Bidirectional token/id map. Ids 0-4 are the reserved specials; the rest
/// are ordered by descending corpus frequency, ties broken lexicographically.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from tokenized texts. Tokens seen fewer than
    /// `min_count` times, or beyond the `max_size` cap, are left out and
    /// encode to `<unk>`.
    pub fn build<'a, I>(texts: I, max_size: usize, min_count: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [String]>,
    {
        if max_size < SPECIALS.len() {
            return Err(Error::Invalid(format!(
                "vocabulary max_size {max_size} cannot hold the {} reserved tokens",
                SPECIALS.len()
            )));
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for text in texts {
            for tok in text {
                if !SPECIALS.contains(&tok.as_str()) {
                    *counts.entry(tok.as_str()).or_default() += 1;
                }
            }
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        ranked.truncate(max_size - SPECIALS.len());
        Ok(Self::from_tokens(
            SPECIALS
                .iter()
                .map(|s| s.to_string())
                .chain(ranked.into_iter().map(|(t, _)| t.to_string())),
        )
        .expect("ranked tokens are unique"))
    }

    /// Rebuilds a vocabulary from its ordered token list (line = token,
    /// line number = id). The first five entries must be the specials.
    pub fn from_tokens(tokens: impl IntoIterator<Item = String>) -> Result<Self> {
        let id_to_token: Vec<String> = tokens.into_iter().collect();
        if id_to_token.len() < SPECIALS.len() || id_to_token[..SPECIALS.len()].iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err(Error::Invalid("vocabulary must start with the reserved tokens".into()));
        }
        let mut token_to_id = HashMap::with_capacity(id_to_token.len());
        for (id, t) in id_to_token.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Invalid(format!("vocabulary entry {id} is not a single token: {t:?}")));
            }
            if token_to_id.insert(t.clone(), id).is_some() {
                return Err(Error::Invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Self {
            id_to_token,
            token_to_id,
        })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.id_to_token.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn encode_tokens(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        self.encode_tokens(&tokenize(text))
    }

    /// Space-joined tokens; ids outside the vocabulary render as `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(SPECIALS[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.id_to_token.join("\n");
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string))
    }
}
