//! Dataset ingestion, tokenization, synthetic tasks and padded batching.

mod batch;
mod jsonl;
mod synthetic;
mod vocab;

pub use batch::{Batch, Batcher};
pub use jsonl::{load_jsonl, parse_jsonl_line, write_jsonl, LoadReport};
pub use synthetic::{make_synthetic, SyntheticSet, TaskKind, TaskSpec};
pub use vocab::{tokenize, Vocabulary, PAD, PAD_TOKEN, UNK, UNK_TOKEN};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Simple,
    Medium,
    Hard,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Simple, Tier::Medium, Tier::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Tier::Simple => "simple",
            Tier::Medium => "medium",
            Tier::Hard => "hard",
        }
    }
}

/// One unpadded classification example.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedExample {
    pub token_ids: Vec<usize>,
    pub pad_mask: Vec<bool>,
    pub label: usize,
    pub tier: Option<Tier>,
}

impl ClassifiedExample {
    /// Builds an example with an all-ones mask. Empty input becomes `[UNK]`.
    pub fn new(mut token_ids: Vec<usize>, label: usize, tier: Option<Tier>) -> Self {
        if token_ids.is_empty() {
            token_ids.push(UNK);
        }
        let pad_mask = vec![true; token_ids.len()];
        Self {
            token_ids,
            pad_mask,
            label,
            tier,
        }
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Truncates to `max_len` tokens; returns whether anything was cut.
    pub fn truncate(&mut self, max_len: usize) -> bool {
        let cut = self.token_ids.len() > max_len;
        self.token_ids.truncate(max_len.max(1));
        self.pad_mask.truncate(max_len.max(1));
        cut
    }

    pub fn validate(&self, classes: usize, vocab_size: usize) -> Result<()> {
        if self.token_ids.len() != self.pad_mask.len() || !self.pad_mask.iter().any(|&m| m) {
            return Err(Error::Data("example mask must match ids and contain a real token".into()));
        }
        if self.label >= classes {
            return Err(Error::Data(format!(
                "label {} is outside [0, {classes})",
                self.label
            )));
        }
        if let Some(&id) = self.token_ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::Data(format!(
                "token id {id} is outside the vocabulary of size {vocab_size}"
            )));
        }
        Ok(())
    }
}
