use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

/// Lowercases and splits on whitespace and punctuation. Punctuation is a
/// separator, not a token.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| c.is_whitespace() || c.is_ascii_punctuation() || is_unicode_punct(c))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn is_unicode_punct(c: char) -> bool {
    !c.is_ascii()
        && matches!(c,
            '\u{2010}'..='\u{2027}' | '\u{2030}'..='\u{205E}' | '\u{3000}'..='\u{303F}'
            | '\u{00A1}' | '\u{00A7}' | '\u{00AB}' | '\u{00B6}' | '\u{00B7}' | '\u{00BB}' | '\u{00BF}')
}

/// Word-level vocabulary with dense ids. Ids 0 and 1 are always `<pad>`
/// and `<unk>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Keeps the `max_size - 2` most frequent tokens, ties broken
    /// lexicographically.
    pub fn build<'a, I>(corpus: I, max_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        if max_size < 2 {
            return Err(Error::Param(format!(
                "vocabulary max_size must be >= 2, got {max_size}"
            )));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut docs = 0usize;
        for text in corpus {
            docs += 1;
            for tok in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if docs == 0 {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        counts.remove(PAD_TOKEN);
        counts.remove(UNK_TOKEN);
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - 2);
        let tokens = [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]
            .into_iter()
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 2 || tokens[PAD] != PAD_TOKEN || tokens[UNK] != UNK_TOKEN {
            return Err(Error::Data(format!(
                "vocabulary must start with {PAD_TOKEN:?}, {UNK_TOKEN:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (id, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), id).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {tok:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Encodes text; text with no tokens becomes a single `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        let ids: Vec<usize> = tokenize(text).iter().map(|t| self.id(t)).collect();
        if ids.is_empty() {
            vec![UNK]
        } else {
            ids
        }
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&VocabFile {
            tokens: self.tokens.clone(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        Self::from_tokens(file.tokens)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
