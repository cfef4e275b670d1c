//! Sentence → `[CLS] subwords [SEP]` with word labels on first subwords.

use serde::{Deserialize, Serialize};

use super::labels::LabelMap;
use super::vocab::Vocab;
use super::RawSentence;
use crate::autodiff::IGNORE_INDEX;
use crate::error::{Error, Result};

/// Longest admitted token sequence, special tokens included.
pub const DEFAULT_MAX_LEN: usize = 128;

/// What to do with a sentence whose subwords do not fit in `max_len`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LongSentencePolicy {
    /// Keep the longest word prefix that fits.
    #[default]
    Truncate,
    /// Cut into consecutive word-aligned chunks that each fit.
    Split,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedExample {
    pub token_ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    /// Word label on first subwords, [`IGNORE_INDEX`] everywhere else.
    pub label_ids: Vec<usize>,
    pub first_subword: Vec<bool>,
    pub attention_mask: Vec<bool>,
    /// Words represented in this example.
    pub word_count: usize,
    /// Index of this example's first word within its source sentence.
    pub word_offset: usize,
}

impl TokenizedExample {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }
}

fn check_max_len(max_len: usize) -> Result<()> {
    if max_len < 3 {
        return Err(Error::Config(format!(
            "max_len {max_len} leaves no room for a word"
        )));
    }
    Ok(())
}

fn map_labels(raw: &RawSentence, label_map: &LabelMap, task: &str) -> Result<Vec<usize>> {
    raw.labels
        .iter()
        .map(|l| {
            label_map.id(l).ok_or_else(|| Error::UnknownLabel {
                task: task.to_string(),
                label: l.clone(),
            })
        })
        .collect()
}

/// Assembles one example from consecutive words starting at `offset`; takes
/// as many words as fit and returns how many were taken. At least one word is
/// always taken, with its subwords clipped if that word alone is too long.
fn build(
    pieces: &[Vec<usize>],
    labels: Option<&[usize]>,
    offset: usize,
    vocab: &Vocab,
    max_len: usize,
) -> (TokenizedExample, usize) {
    let budget = max_len - 2;
    let mut token_ids = vec![vocab.cls_id()];
    let mut label_ids = vec![IGNORE_INDEX];
    let mut first_subword = vec![false];
    let mut used = 0;
    let mut taken = 0;
    for (w, word_pieces) in pieces[offset..].iter().enumerate() {
        let fits = used + word_pieces.len() <= budget;
        if !fits && taken > 0 {
            break;
        }
        let keep = if fits { word_pieces.len() } else { budget };
        for (j, &id) in word_pieces[..keep].iter().enumerate() {
            token_ids.push(id);
            first_subword.push(j == 0);
            label_ids.push(match (j, labels) {
                (0, Some(l)) => l[offset + w],
                _ => IGNORE_INDEX,
            });
        }
        used += keep;
        taken += 1;
        if !fits {
            break;
        }
    }
    token_ids.push(vocab.sep_id());
    label_ids.push(IGNORE_INDEX);
    first_subword.push(false);
    let n = token_ids.len();
    (
        TokenizedExample {
            token_ids,
            segment_ids: vec![0; n],
            label_ids,
            first_subword,
            attention_mask: vec![true; n],
            word_count: taken,
            word_offset: offset,
        },
        taken,
    )
}

fn chunks(
    words: &[String],
    labels: Option<&[usize]>,
    vocab: &Vocab,
    max_len: usize,
) -> Vec<TokenizedExample> {
    let pieces: Vec<Vec<usize>> = words.iter().map(|w| vocab.wordpiece_ids(w)).collect();
    let mut out = Vec::new();
    let mut offset = 0;
    while offset < words.len() {
        let (ex, taken) = build(&pieces, labels, offset, vocab, max_len);
        out.push(ex);
        offset += taken;
    }
    out
}

/// Encodes one labelled sentence, truncating at a word boundary so that the
/// result has at most `max_len` tokens and still ends in `[SEP]`.
pub fn encode_example(
    raw: &RawSentence,
    vocab: &Vocab,
    label_map: &LabelMap,
    task: &str,
    max_len: usize,
) -> Result<TokenizedExample> {
    check_max_len(max_len)?;
    let labels = map_labels(raw, label_map, task)?;
    let pieces: Vec<Vec<usize>> = raw.words.iter().map(|w| vocab.wordpiece_ids(w)).collect();
    Ok(build(&pieces, Some(&labels), 0, vocab, max_len).0)
}

/// Encodes one labelled sentence as word-aligned chunks that together cover
/// every word.
pub fn encode_chunks(
    raw: &RawSentence,
    vocab: &Vocab,
    label_map: &LabelMap,
    task: &str,
    max_len: usize,
) -> Result<Vec<TokenizedExample>> {
    check_max_len(max_len)?;
    let labels = map_labels(raw, label_map, task)?;
    Ok(chunks(&raw.words, Some(&labels), vocab, max_len))
}

/// Unlabelled variant for inference; every word lands in some chunk.
pub fn encode_words(
    words: &[String],
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<TokenizedExample>> {
    check_max_len(max_len)?;
    Ok(chunks(words, None, vocab, max_len))
}

/// Applies `policy` to one sentence.
pub fn encode_with_policy(
    raw: &RawSentence,
    vocab: &Vocab,
    label_map: &LabelMap,
    task: &str,
    max_len: usize,
    policy: LongSentencePolicy,
) -> Result<Vec<TokenizedExample>> {
    match policy {
        LongSentencePolicy::Truncate => {
            Ok(vec![encode_example(raw, vocab, label_map, task, max_len)?])
        }
        LongSentencePolicy::Split => encode_chunks(raw, vocab, label_map, task, max_len),
    }
}
