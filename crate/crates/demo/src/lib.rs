//! Browser bindings: the warmup/decay schedule, IOB span scoring, and a
//! tiny live comparison of the two batch-scheduling algorithms.
//!
//! Every export takes plain values and returns a JSON string; the plain
//! Rust functions behind them are tested natively.

use multitag::data::LongSentencePolicy;
use multitag::encoder::EncoderConfig;
use multitag::eval::{iob_decode, score_labels};
use multitag::model::{MultiTaskModel, TaskRegistry, TaskSpec};
use multitag::synthetic::{generate, SyntheticSpec};
use multitag::training::{lr_at, prepare_tasks, train, Algorithm, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct SpanOut {
    start: usize,
    end: usize,
    entity_type: String,
}

#[derive(Serialize)]
struct ScoreOut {
    gold: Vec<SpanOut>,
    predicted: Vec<SpanOut>,
    tp: usize,
    fp: usize,
    #[serde(rename = "fn")]
    fn_: usize,
    precision: f64,
    recall: f64,
    f1: f64,
}

#[derive(Serialize)]
struct CurveOut {
    task_id: String,
    dev_f1: Vec<f64>,
    trained: Vec<bool>,
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("demo output serializes")
}

/// Learning rate at every step `0..=total_steps`.
pub fn lr_curve_values(
    total_steps: usize,
    warmup_proportion: f64,
    peak_lr: f64,
) -> Result<Vec<f64>, String> {
    let cfg = TrainConfig {
        warmup_proportion,
        peak_lr,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    (0..=total_steps)
        .map(|s| lr_at(s, total_steps, &cfg).map_err(|e| e.to_string()))
        .collect()
}

fn spans_out(labels: &[&str]) -> Result<Vec<SpanOut>, String> {
    Ok(iob_decode(labels)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|s| SpanOut {
            start: s.start,
            end: s.end,
            entity_type: s.entity_type,
        })
        .collect())
}

/// Scores one whitespace-separated predicted label sequence against gold.
pub fn score_iob_text(gold: &str, predicted: &str) -> Result<String, String> {
    let g: Vec<&str> = gold.split_whitespace().collect();
    let p: Vec<&str> = predicted.split_whitespace().collect();
    if g.len() != p.len() {
        return Err(format!("{} gold labels but {} predicted", g.len(), p.len()));
    }
    let score = score_labels(std::slice::from_ref(&p), std::slice::from_ref(&g))
        .map_err(|e| e.to_string())?;
    Ok(json(&ScoreOut {
        gold: spans_out(&g)?,
        predicted: spans_out(&p)?,
        tp: score.tp,
        fp: score.fp,
        fn_: score.fn_,
        precision: score.precision,
        recall: score.recall,
        f1: score.f1,
    }))
}

/// Trains a small model on a reduced synthetic corpus and returns each
/// task's dev F1 per epoch. `algorithm` is `"merged"` or `"ordered"`.
pub fn train_toy_curves(algorithm: &str, epochs: usize, seed: u64) -> Result<String, String> {
    let algorithm = match algorithm {
        "merged" => Algorithm::MergedShuffle,
        "ordered" => Algorithm::DatasetOrdered,
        other => return Err(format!("unknown algorithm {other:?}")),
    };
    if !(1..=40).contains(&epochs) {
        return Err("epochs must be in 1..=40".into());
    }
    let corpus = generate(&SyntheticSpec {
        train_sentences: 120,
        dev_sentences: 40,
        test_sentences: 0,
        seed,
        ..SyntheticSpec::default()
    });
    let err = |e: multitag::Error| e.to_string();
    let specs = corpus
        .datasets
        .iter()
        .map(|d| Ok(TaskSpec::new(d.task_id.clone(), d.label_map()?)))
        .collect::<multitag::Result<Vec<_>>>()
        .map_err(err)?;
    let registry = TaskRegistry::new(specs).map_err(err)?;
    let config = EncoderConfig::toy(corpus.vocab.len(), 16, 1, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = MultiTaskModel::init(corpus.vocab, config, registry, &mut rng).map_err(err)?;
    let tasks =
        prepare_tasks(&model, &corpus.datasets, 64, LongSentencePolicy::Truncate).map_err(err)?;
    let cfg = TrainConfig {
        epoch_max: epochs,
        batch_size: 16,
        peak_lr: 3e-3,
        algorithm,
        seed,
        ..TrainConfig::default()
    };
    let outcome = train(&mut model, &tasks, &cfg).map_err(err)?;
    let curves: Vec<CurveOut> = tasks
        .iter()
        .map(|t| {
            let recs: Vec<_> = outcome
                .records
                .iter()
                .filter(|r| r.task_id == t.task_id)
                .collect();
            CurveOut {
                task_id: t.task_id.clone(),
                dev_f1: recs.iter().map(|r| r.dev_f1.unwrap_or(0.0)).collect(),
                trained: recs.iter().map(|r| r.trained).collect(),
            }
        })
        .collect();
    Ok(json(&curves))
}

#[wasm_bindgen]
pub fn lr_curve(
    total_steps: usize,
    warmup_proportion: f64,
    peak_lr: f64,
) -> Result<String, JsValue> {
    lr_curve_values(total_steps, warmup_proportion, peak_lr)
        .map(|v| json(&v))
        .map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn score_iob(gold: &str, predicted: &str) -> Result<String, JsValue> {
    score_iob_text(gold, predicted).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn train_toy(algorithm: &str, epochs: usize, seed: u64) -> Result<String, JsValue> {
    train_toy_curves(algorithm, epochs, seed).map_err(|e| JsValue::from_str(&e))
}
