//! Corpus ingestion, subword tokenization, label alignment and batching.

mod batch;
mod conll;
mod encode;
mod labels;
mod vocab;

use std::path::Path;

pub use batch::{make_minibatches, sequential_minibatches, MiniBatch, DEFAULT_BATCH_SIZE};
pub use conll::{parse_conll, read_conll, write_conll, ConllColumns};
pub use encode::{
    encode_chunks, encode_example, encode_with_policy, encode_words, LongSentencePolicy,
    TokenizedExample, DEFAULT_MAX_LEN,
};
pub use labels::{is_valid_label, IobTag, LabelMap};
pub use vocab::{wordpiece_tokenize, Vocab, CLS, CONTINUATION_PREFIX, PAD, SEP, UNK};

use crate::error::{Error, Result};

/// Words of one sentence with their IOB labels.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RawSentence {
    pub words: Vec<String>,
    pub labels: Vec<String>,
}

impl RawSentence {
    pub fn new(words: Vec<String>, labels: Vec<String>) -> Result<Self> {
        if words.len() != labels.len() {
            return Err(Error::contract(format!(
                "{} words but {} labels",
                words.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|l| !is_valid_label(l)) {
            return Err(Error::InvalidLabel {
                line: None,
                label: bad.clone(),
            });
        }
        Ok(Self { words, labels })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Train/dev/test splits of one dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaskDataset {
    pub task_id: String,
    pub train: Vec<RawSentence>,
    pub dev: Vec<RawSentence>,
    pub test: Vec<RawSentence>,
}

impl TaskDataset {
    pub fn load(
        task_id: &str,
        train: &Path,
        dev: Option<&Path>,
        test: Option<&Path>,
        columns: ConllColumns,
    ) -> Result<Self> {
        let read = |p: Option<&Path>| p.map_or(Ok(Vec::new()), |p| read_conll(p, columns));
        Ok(Self {
            task_id: task_id.to_string(),
            train: read_conll(train, columns)?,
            dev: read(dev)?,
            test: read(test)?,
        })
    }

    /// Appends the dev split to the training split (final-model training).
    pub fn merge_dev_into_train(&mut self) {
        self.train.extend(self.dev.iter().cloned());
    }

    /// Label set covering every split.
    pub fn label_map(&self) -> Result<LabelMap> {
        LabelMap::from_label_sequences(
            self.train
                .iter()
                .chain(&self.dev)
                .chain(&self.test)
                .map(|s| s.labels.as_slice()),
        )
    }

    pub fn n_train(&self) -> usize {
        self.train.len()
    }
}
