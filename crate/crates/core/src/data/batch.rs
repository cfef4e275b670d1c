use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::encode::TokenizedExample;
use crate::autodiff::IGNORE_INDEX;
use crate::error::{Error, Result};

pub const DEFAULT_BATCH_SIZE: usize = 32;

/// Right-padded examples of a single task, stored as flat `[B×n]` arrays.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MiniBatch {
    pub task_id: String,
    pub batch_size: usize,
    pub seq_len: usize,
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub label_ids: Vec<usize>,
    pub first_subword: Vec<bool>,
    pub mask: Vec<bool>,
    /// Word count of each member.
    pub word_counts: Vec<usize>,
    /// Index of each member in the example list the batch was drawn from.
    pub members: Vec<usize>,
}

impl MiniBatch {
    /// Pads every example to the longest one with `[PAD]` (id 0).
    pub fn from_examples(
        task_id: &str,
        examples: &[&TokenizedExample],
        members: Vec<usize>,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::contract("mini-batch needs at least one example"));
        }
        let seq_len = examples.iter().map(|e| e.len()).max().unwrap_or(0);
        let b = examples.len();
        let mut batch = MiniBatch {
            task_id: task_id.to_string(),
            batch_size: b,
            seq_len,
            token_ids: vec![0; b * seq_len],
            segment_ids: vec![0; b * seq_len],
            label_ids: vec![IGNORE_INDEX; b * seq_len],
            first_subword: vec![false; b * seq_len],
            mask: vec![false; b * seq_len],
            word_counts: examples.iter().map(|e| e.word_count).collect(),
            members,
        };
        for (i, ex) in examples.iter().enumerate() {
            let o = i * seq_len;
            let n = ex.len();
            batch.token_ids[o..o + n].copy_from_slice(&ex.token_ids);
            batch.segment_ids[o..o + n].copy_from_slice(&ex.segment_ids);
            batch.label_ids[o..o + n].copy_from_slice(&ex.label_ids);
            batch.first_subword[o..o + n].copy_from_slice(&ex.first_subword);
            batch.mask[o..o + n].copy_from_slice(&ex.attention_mask);
        }
        Ok(batch)
    }

    /// Number of positions that carry a label.
    pub fn labelled_positions(&self) -> usize {
        self.label_ids
            .iter()
            .filter(|&&l| l != IGNORE_INDEX)
            .count()
    }
}

/// Shuffles `examples` with a generator seeded by `seed`, then cuts them into
/// consecutive batches of `batch_size`; the last batch holds the remainder.
pub fn make_minibatches(
    task_id: &str,
    examples: &[TokenizedExample],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<MiniBatch>> {
    if examples.is_empty() {
        return Err(Error::contract(format!(
            "task {task_id:?}: cannot batch an empty split"
        )));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks(batch_size)
        .map(|idx| {
            let members: Vec<&TokenizedExample> = idx.iter().map(|&i| &examples[i]).collect();
            MiniBatch::from_examples(task_id, &members, idx.to_vec())
        })
        .collect()
}

/// Batches in input order, no shuffling. Used for evaluation.
pub fn sequential_minibatches(
    task_id: &str,
    examples: &[TokenizedExample],
    batch_size: usize,
) -> Result<Vec<MiniBatch>> {
    let batch_size = batch_size.max(1);
    let order: Vec<usize> = (0..examples.len()).collect();
    order
        .chunks(batch_size)
        .map(|idx| {
            let members: Vec<&TokenizedExample> = idx.iter().map(|&i| &examples[i]).collect();
            MiniBatch::from_examples(task_id, &members, idx.to_vec())
        })
        .collect()
}
