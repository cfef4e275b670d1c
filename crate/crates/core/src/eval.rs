//! Entity spans from IOB labels and exact-match precision / recall / F1.

use std::collections::BTreeSet;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::data::{IobTag, RawSentence};
use crate::error::{Error, Result};
use crate::model::MultiTaskModel;

/// Inclusive word span of one entity.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub entity_type: String,
}

impl Span {
    pub fn new(start: usize, end: usize, entity_type: impl Into<String>) -> Self {
        Self {
            start,
            end,
            entity_type: entity_type.into(),
        }
    }
}

pub type SpanSet = BTreeSet<Span>;

/// Maximal `B-X (I-X)*` runs become spans. An `I-X` that does not continue
/// an open span of type `X` opens a new one (conlleval's repair rule).
pub fn iob_decode<S: AsRef<str>>(labels: &[S]) -> Result<SpanSet> {
    let mut spans = SpanSet::new();
    let mut open: Option<(usize, &str)> = None;
    for (i, label) in labels.iter().enumerate() {
        let label = label.as_ref();
        let tag = IobTag::parse(label).ok_or_else(|| Error::InvalidLabel {
            line: None,
            label: label.to_string(),
        })?;
        match tag {
            IobTag::Inside(ty) if matches!(open, Some((_, t)) if t == ty) => {}
            _ => {
                if let Some((start, ty)) = open.take() {
                    spans.insert(Span::new(start, i - 1, ty));
                }
                if let Some(ty) = tag.entity_type() {
                    open = Some((i, ty));
                }
            }
        }
    }
    if let Some((start, ty)) = open {
        spans.insert(Span::new(start, labels.len() - 1, ty));
    }
    Ok(spans)
}

/// Labels a sentence of `len` words with `spans`, which must be
/// non-overlapping and in range.
pub fn iob_encode(spans: &SpanSet, len: usize) -> Result<Vec<String>> {
    let mut labels = vec!["O".to_string(); len];
    let mut taken = vec![false; len];
    for span in spans {
        if span.start > span.end || span.end >= len {
            return Err(Error::contract(format!(
                "span {span:?} out of range for {len} words"
            )));
        }
        for i in span.start..=span.end {
            if std::mem::replace(&mut taken[i], true) {
                return Err(Error::contract(format!("overlapping span {span:?}")));
            }
            let prefix = if i == span.start { "B" } else { "I" };
            labels[i] = format!("{prefix}-{}", span.entity_type);
        }
    }
    Ok(labels)
}

/// Exact-match counts and the metrics derived from them. Metrics with a zero
/// denominator are 0 and flagged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskScore {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

impl TaskScore {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                0.0
            } else {
                num as f64 / den as f64
            }
        };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
            precision_undefined: tp + fp == 0,
            recall_undefined: tp + fn_ == 0,
        }
    }

    pub fn merge(&self, other: &TaskScore) -> TaskScore {
        TaskScore::from_counts(self.tp + other.tp, self.fp + other.fp, self.fn_ + other.fn_)
    }
}

/// Accumulates exact `(start, end, type)` matches over aligned sentences.
pub fn span_f1(pred: &[SpanSet], gold: &[SpanSet]) -> Result<TaskScore> {
    if pred.len() != gold.len() {
        return Err(Error::contract(format!(
            "{} predicted sentences but {} gold sentences",
            pred.len(),
            gold.len()
        )));
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (p, g) in pred.iter().zip(gold) {
        let hits = p.intersection(g).count();
        tp += hits;
        fp += p.len() - hits;
        fn_ += g.len() - hits;
    }
    Ok(TaskScore::from_counts(tp, fp, fn_))
}

/// Scores word-level label sequences.
pub fn score_labels<S: AsRef<str>, T: AsRef<str>>(
    pred: &[Vec<S>],
    gold: &[Vec<T>],
) -> Result<TaskScore> {
    let decode =
        |seqs: &[Vec<S>]| -> Result<Vec<SpanSet>> { seqs.iter().map(|s| iob_decode(s)).collect() };
    let p = decode(pred)?;
    let g: Vec<SpanSet> = gold.iter().map(|s| iob_decode(s)).collect::<Result<_>>()?;
    span_f1(&p, &g)
}

/// Per-task scores plus the micro aggregate over all tasks.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tasks: IndexMap<String, TaskScore>,
    pub micro: TaskScore,
}

impl EvalReport {
    pub fn insert(&mut self, task_id: &str, score: TaskScore) {
        self.tasks.insert(task_id.to_string(), score);
        self.micro = self
            .tasks
            .values()
            .fold(TaskScore::from_counts(0, 0, 0), |acc, s| acc.merge(s));
    }
}

/// Result of running a model over one split of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskEvaluation {
    pub score: TaskScore,
    /// Mean cross-entropy over every labelled word.
    pub loss: f64,
    pub predictions: Vec<Vec<String>>,
}

/// Predicts every sentence, decodes spans and scores them against gold.
pub fn evaluate_task(
    model: &MultiTaskModel,
    sentences: &[RawSentence],
    task_id: &str,
    batch_size: usize,
) -> Result<TaskEvaluation> {
    let (predictions, loss) = model.predict_labelled(sentences, task_id, batch_size)?;
    let gold: Vec<&Vec<String>> = sentences.iter().map(|s| &s.labels).collect();
    let gold_spans: Vec<SpanSet> = gold.iter().map(|g| iob_decode(g)).collect::<Result<_>>()?;
    let pred_spans: Vec<SpanSet> = predictions
        .iter()
        .map(|p| iob_decode(p))
        .collect::<Result<_>>()?;
    Ok(TaskEvaluation {
        score: span_f1(&pred_spans, &gold_spans)?,
        loss,
        predictions,
    })
}

/// `token gold pred` columns, blank line between sentences.
pub fn prediction_dump(sentences: &[RawSentence], predictions: &[Vec<String>]) -> String {
    let mut out = String::new();
    for (s, p) in sentences.iter().zip(predictions) {
        for ((w, g), l) in s.words.iter().zip(&s.labels).zip(p) {
            out.push_str(&format!("{w}\t{g}\t{l}\n"));
        }
        out.push('\n');
    }
    out
}
