use rand::seq::SliceRandom;

use super::{ClassifiedExample, Tier, PAD};
use crate::seed;
use crate::tensor::Tensor;

/// A padded batch. `ids` is row-major `[batch, seq_len]`, `mask` holds 1.0
/// for real tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub mask: Tensor,
    pub labels: Vec<usize>,
    pub lengths: Vec<usize>,
    pub tiers: Vec<Option<Tier>>,
    /// Positions of the members in the source example list.
    pub indices: Vec<usize>,
}

impl Batch {
    /// Pads every member to the longest one. Panics on an empty slice.
    pub fn collate(examples: &[ClassifiedExample], indices: &[usize]) -> Self {
        assert!(!indices.is_empty(), "cannot collate an empty batch");
        let members: Vec<&ClassifiedExample> = indices.iter().map(|&i| &examples[i]).collect();
        let n = members.iter().map(|e| e.len()).max().unwrap_or(1);
        let b = members.len();
        let mut ids = vec![PAD; b * n];
        let mut mask = vec![0.0; b * n];
        for (r, ex) in members.iter().enumerate() {
            for (c, (&id, &m)) in ex.token_ids.iter().zip(&ex.pad_mask).enumerate() {
                ids[r * n + c] = id;
                mask[r * n + c] = if m { 1.0 } else { 0.0 };
            }
        }
        Self {
            ids,
            mask: Tensor::new(&[b, n], mask).expect("consistent batch shape"),
            labels: members.iter().map(|e| e.label).collect(),
            lengths: members.iter().map(|e| e.len()).collect(),
            tiers: members.iter().map(|e| e.tier).collect(),
            indices: indices.to_vec(),
        }
    }

    pub fn size(&self) -> usize {
        self.labels.len()
    }

    pub fn seq_len(&self) -> usize {
        self.mask.shape()[1]
    }
}

/// Splits a dataset into padded batches, optionally reshuffled each epoch.
#[derive(Clone, Debug)]
pub struct Batcher<'a> {
    examples: &'a [ClassifiedExample],
    batch_size: usize,
    seed: u64,
    shuffle: bool,
}

impl<'a> Batcher<'a> {
    pub fn new(examples: &'a [ClassifiedExample], batch_size: usize, seed: u64, shuffle: bool) -> Self {
        Self {
            examples,
            batch_size: batch_size.max(1),
            seed,
            shuffle,
        }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.examples.len().div_ceil(self.batch_size)
    }

    pub fn order(&self, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.examples.len()).collect();
        if self.shuffle {
            order.shuffle(&mut seed::rng(self.seed, &[seed::STREAM_SHUFFLE, epoch]));
        }
        order
    }

    pub fn epoch(&self, epoch: u64) -> impl Iterator<Item = Batch> + 'a {
        let order = self.order(epoch);
        let examples = self.examples;
        let size = self.batch_size;
        (0..order.len().div_ceil(size)).map(move |i| {
            let end = ((i + 1) * size).min(order.len());
            Batch::collate(examples, &order[i * size..end])
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ex(len: usize, label: usize) -> ClassifiedExample {
        ClassifiedExample::new((2..2 + len).collect(), label, None)
    }

    #[test]
    fn pads_to_longest() {
        let data = [ex(3, 0), ex(5, 1)];
        let b = Batch::collate(&data, &[0, 1]);
        assert_eq!(b.mask.shape(), &[2, 5]);
        assert_eq!(b.mask.row(0), &[1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(b.mask.row(1), &[1.0; 5]);
        assert_eq!(&b.ids[..5], &[2, 3, 4, PAD, PAD]);
    }

    #[test]
    fn ordering() {
        let data: Vec<_> = (0..10).map(|i| ex(1 + i % 3, i % 2)).collect();
        let plain = Batcher::new(&data, 4, 1, false);
        let seen: Vec<usize> = plain.epoch(0).flat_map(|b| b.indices).collect();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(plain.batches_per_epoch(), 3);

        let shuffled = Batcher::new(&data, 4, 1, true);
        let mut e0: Vec<usize> = shuffled.epoch(0).flat_map(|b| b.indices).collect();
        let e1: Vec<usize> = shuffled.epoch(1).flat_map(|b| b.indices).collect();
        assert_ne!(e0, e1);
        assert_eq!(e0, shuffled.epoch(0).flat_map(|b| b.indices).collect::<Vec<_>>());
        e0.sort_unstable();
        assert_eq!(e0, (0..10).collect::<Vec<_>>());
    }
}
