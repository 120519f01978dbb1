use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ClassifiedExample, Tier, Vocabulary, PAD_TOKEN, UNK_TOKEN};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Label is the index of the single marker token present; the tier sets
    /// how many filler tokens surround it.
    KeywordDetection,
    /// Label is the sum of the marker values mod `classes`; the tier sets how
    /// many markers (1 to 3) must be combined.
    Composition,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub classes: usize,
    pub max_len: usize,
    pub fillers: usize,
}

impl TaskSpec {
    pub fn keyword_detection(classes: usize) -> Self {
        Self {
            kind: TaskKind::KeywordDetection,
            classes,
            max_len: 32,
            fillers: 50,
        }
    }

    pub fn composition(classes: usize) -> Self {
        Self {
            kind: TaskKind::Composition,
            ..Self::keyword_detection(classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("task.classes", "must be >= 2"));
        }
        if self.max_len < 8 {
            return Err(Error::config("task.max_len", "must be >= 8"));
        }
        if self.fillers == 0 {
            return Err(Error::config("task.fillers", "must be >= 1"));
        }
        Ok(())
    }

    /// Vocabulary determined by the spec alone: reserved ids, markers, fillers.
    pub fn vocabulary(&self) -> Vocabulary {
        let tokens = [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]
            .into_iter()
            .chain((0..self.classes).map(marker))
            .chain((0..self.fillers).map(|i| format!("w{i:03}")))
            .collect();
        Vocabulary::from_tokens(tokens).expect("generated tokens are unique")
    }
}

/// "aaa", "bbb", ... then "m26", "m27", ...
pub fn marker(i: usize) -> String {
    if i < 26 {
        let c = (b'a' + i as u8) as char;
        std::iter::repeat_n(c, 3).collect()
    } else {
        format!("m{i}")
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSet {
    pub vocab: Vocabulary,
    pub examples: Vec<ClassifiedExample>,
}

/// Generates `size` examples. Tiers are assigned round-robin so each holds
/// `size / 3` examples up to rounding.
pub fn make_synthetic(spec: &TaskSpec, size: usize, seed: u64) -> Result<SyntheticSet> {
    spec.validate()?;
    let vocab = spec.vocabulary();
    let marker_id = |i: usize| 2 + i;
    let filler_id = |i: usize| 2 + spec.classes + i;
    let mut rng = seed::rng(seed, &[seed::STREAM_DATA]);
    let max_fill = spec.max_len - 1;

    let mut examples = Vec::with_capacity(size);
    for i in 0..size {
        let tier = Tier::ALL[i % 3];
        let (markers, label) = match spec.kind {
            TaskKind::KeywordDetection => {
                let label = rng.random_range(0..spec.classes);
                (vec![label], label)
            }
            TaskKind::Composition => {
                let depth = tier as usize + 1;
                let values: Vec<usize> = (0..depth).map(|_| rng.random_range(0..spec.classes)).collect();
                let label = values.iter().sum::<usize>() % spec.classes;
                (values, label)
            }
        };
        let fill = match spec.kind {
            TaskKind::KeywordDetection => {
                let (lo, hi) = match tier {
                    Tier::Simple => (1, max_fill / 4),
                    Tier::Medium => (max_fill / 4 + 1, max_fill / 2),
                    Tier::Hard => (max_fill / 2 + 1, max_fill),
                };
                rng.random_range(lo..=hi)
            }
            TaskKind::Composition => rng.random_range(1..=spec.max_len - markers.len()),
        };
        let mut ids: Vec<usize> = (0..fill).map(|_| filler_id(rng.random_range(0..spec.fillers))).collect();
        for &m in &markers {
            let at = rng.random_range(0..=ids.len());
            ids.insert(at, marker_id(m));
        }
        examples.push(ClassifiedExample::new(ids, label, Some(tier)));
    }
    Ok(SyntheticSet { vocab, examples })
}
