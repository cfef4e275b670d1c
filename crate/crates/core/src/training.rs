//! Learning-rate schedule, optimizers and the two epoch compositions:
//! merged-shuffle (all tasks' batches pooled and shuffled each epoch) and
//! dataset-ordered (one task per epoch, round-robin).

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    encode_with_policy, make_minibatches, LongSentencePolicy, MiniBatch, RawSentence, TaskDataset,
    TokenizedExample, DEFAULT_BATCH_SIZE,
};
use crate::encoder::is_bias_or_norm;
use crate::error::{Error, Result};
use crate::eval::evaluate_task;
use crate::model::{MultiTaskModel, NamedGradients};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    AdamCorrected,
    PlainSgd,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    #[default]
    MergedShuffle,
    DatasetOrdered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epoch_max: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub warmup_proportion: f64,
    pub weight_decay: f64,
    pub optimizer_kind: OptimizerKind,
    pub algorithm: Algorithm,
    pub freeze_encoder: bool,
    pub seed: u64,
    /// Global L2 clipping threshold; off when absent.
    pub max_grad_norm: Option<f64>,
    /// Batch size used for dev evaluation.
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epoch_max: 8,
            batch_size: DEFAULT_BATCH_SIZE,
            peak_lr: 5e-5,
            warmup_proportion: 0.4,
            weight_decay: 0.01,
            optimizer_kind: OptimizerKind::AdamCorrected,
            algorithm: Algorithm::MergedShuffle,
            freeze_encoder: false,
            seed: 0,
            max_grad_norm: None,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epoch_max == 0 {
            return Err(Error::Config("epoch_max must be at least 1".into()));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return Err(Error::Config("batch sizes must be at least 1".into()));
        }
        if !(self.peak_lr > 0.0 && self.peak_lr.is_finite()) {
            return Err(Error::Config(format!(
                "peak_lr must be positive, got {}",
                self.peak_lr
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_proportion) {
            return Err(Error::Config(format!(
                "warmup_proportion must be in [0, 1], got {}",
                self.warmup_proportion
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(Error::Config(format!(
                    "max_grad_norm must be positive, got {c}"
                )));
            }
        }
        Ok(())
    }
}

/// Linear ramp from 0 to `peak_lr` over the first
/// `warmup_proportion · total_steps` steps, then linear decay to 0 at
/// `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, config: &TrainConfig) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("total_steps must be positive".into()));
    }
    if step > total_steps {
        return Err(Error::contract(format!(
            "step {step} beyond total_steps {total_steps}"
        )));
    }
    let (s, total) = (step as f64, total_steps as f64);
    let warmup = config.warmup_proportion * total;
    let eta = config.peak_lr;
    Ok(if s < warmup {
        eta * s / warmup
    } else if total > warmup {
        eta * (total - s) / (total - warmup)
    } else {
        // warmup covers the whole run and `step == total_steps`
        eta
    })
}

/// First and second moments of one parameter and its own update count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamMoments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OptimizerState {
    pub moments: IndexMap<String, AdamMoments>,
}

/// Applies one update to every parameter that has a gradient in `grads`.
/// Weight decay is decoupled and skips biases and layer-norm parameters.
///
/// ```text
/// plain_sgd:       θ ← θ − lr·(g + wd·θ)
/// adam_corrected:  m ← β₁m + (1−β₁)g,  v ← β₂v + (1−β₂)g²
///                  θ ← θ − lr·( m/(1−β₁ᵗ) / (√(v/(1−β₂ᵗ)) + ε) + wd·θ )
/// ```
pub fn optimizer_step(
    model: &mut MultiTaskModel,
    grads: &NamedGradients,
    state: &mut OptimizerState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteGradient(name.clone()));
    }
    let clip = match config.max_grad_norm {
        Some(max) => {
            let norm = grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max {
                max / norm
            } else {
                1.0
            }
        }
        None => 1.0,
    };
    for (name, tensor, trainable) in model.parameters_mut() {
        let Some(g) = grads.get(&name) else { continue };
        if !trainable {
            continue;
        }
        if g.len() != tensor.numel() {
            return Err(Error::Shape {
                op: "optimizer_step",
                left: tensor.shape().to_vec(),
                right: vec![g.len()],
            });
        }
        let wd = if is_bias_or_norm(&name) {
            0.0
        } else {
            config.weight_decay
        };
        let theta = tensor.data_mut();
        match config.optimizer_kind {
            OptimizerKind::PlainSgd => {
                for (p, &gi) in theta.iter_mut().zip(g) {
                    *p -= lr * (clip * gi + wd * *p);
                }
            }
            OptimizerKind::AdamCorrected => {
                let mom = state.moments.entry(name).or_insert_with(|| AdamMoments {
                    m: vec![0.0; g.len()],
                    v: vec![0.0; g.len()],
                    t: 0,
                });
                mom.t += 1;
                let c1 = 1.0 - ADAM_BETA1.powi(mom.t as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(mom.t as i32);
                for i in 0..theta.len() {
                    let gi = clip * g[i];
                    mom.m[i] = ADAM_BETA1 * mom.m[i] + (1.0 - ADAM_BETA1) * gi;
                    mom.v[i] = ADAM_BETA2 * mom.v[i] + (1.0 - ADAM_BETA2) * gi * gi;
                    let update = (mom.m[i] / c1) / ((mom.v[i] / c2).sqrt() + ADAM_EPSILON);
                    theta[i] -= lr * (update + wd * theta[i]);
                }
            }
        }
    }
    Ok(())
}

/// SplitMix64 finalizer over `seed` combined with two stream labels.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const POOL_STREAM: u64 = u64::MAX;
const DROPOUT_STREAM: u64 = u64::MAX - 1;

/// Shuffle seed of task number `task_index`'s batches in `epoch`.
pub fn batch_seed(seed: u64, epoch: usize, task_index: usize) -> u64 {
    derive_seed(seed, epoch as u64, task_index as u64)
}

/// A task's encoded training examples and raw dev sentences.
#[derive(Debug, Clone)]
pub struct TrainingTask {
    pub task_id: String,
    pub train: Vec<TokenizedExample>,
    pub dev: Vec<RawSentence>,
}

impl TrainingTask {
    pub fn n_batches(&self, batch_size: usize) -> usize {
        self.train.len().div_ceil(batch_size)
    }
}

/// Encodes each dataset's training split against the model's vocabulary
/// and label maps. Returned in registry order.
pub fn prepare_tasks(
    model: &MultiTaskModel,
    datasets: &[TaskDataset],
    max_len: usize,
    policy: LongSentencePolicy,
) -> Result<Vec<TrainingTask>> {
    let mut out = Vec::new();
    for spec in model.registry.tasks() {
        let ds = datasets
            .iter()
            .find(|d| d.task_id == spec.task_id)
            .ok_or_else(|| Error::Config(format!("no dataset for task {:?}", spec.task_id)))?;
        let mut train = Vec::with_capacity(ds.train.len());
        for s in &ds.train {
            train.extend(encode_with_policy(
                s,
                &model.vocab,
                &spec.labels,
                &spec.task_id,
                max_len,
                policy,
            )?);
        }
        train.retain(|e| e.word_count > 0);
        if train.is_empty() {
            return Err(Error::Config(format!(
                "task {:?} has an empty training split",
                spec.task_id
            )));
        }
        out.push(TrainingTask {
            task_id: spec.task_id.clone(),
            train,
            dev: ds.dev.clone(),
        });
    }
    for ds in datasets {
        model.registry.get(&ds.task_id)?;
    }
    Ok(out)
}

/// One line of the metrics log: a task's state at the end of an epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub step: usize,
    pub task_id: String,
    pub lr: f64,
    /// Mean training loss of this task's batches in the epoch; absent when
    /// the task was idle.
    pub raw_loss: Option<f64>,
    pub dev_loss: Option<f64>,
    pub dev_precision: Option<f64>,
    pub dev_recall: Option<f64>,
    pub dev_f1: Option<f64>,
    pub trained: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub task_id: String,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestDev {
    pub epoch: usize,
    pub f1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainerState {
    /// Completed mini-batch updates.
    pub global_step: usize,
    pub total_steps: usize,
    pub epochs_completed: usize,
    pub optimizer: OptimizerState,
    pub dropout_rng: ChaCha8Rng,
    pub best_dev: IndexMap<String, BestDev>,
}

impl TrainerState {
    pub fn new(seed: u64, total_steps: usize) -> Self {
        Self {
            global_step: 0,
            total_steps,
            epochs_completed: 0,
            optimizer: OptimizerState::default(),
            dropout_rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, DROPOUT_STREAM, 0)),
            best_dev: IndexMap::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub state: TrainerState,
    pub records: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl TrainOutcome {
    /// One JSON object per line.
    pub fn metrics_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    /// `epoch,<task...>` rows of dev F1; empty cells where not evaluated.
    pub fn dev_f1_csv(&self) -> String {
        let tasks: Vec<&str> = {
            let mut seen: Vec<&str> = Vec::new();
            for r in &self.records {
                if !seen.contains(&r.task_id.as_str()) {
                    seen.push(&r.task_id);
                }
            }
            seen
        };
        let mut out = format!("epoch,{}\n", tasks.join(","));
        let epochs = self.records.iter().map(|r| r.epoch).max().unwrap_or(0);
        for e in 1..=epochs {
            let cells: Vec<String> = tasks
                .iter()
                .map(|t| {
                    self.records
                        .iter()
                        .find(|r| r.epoch == e && r.task_id == *t)
                        .and_then(|r| r.dev_f1)
                        .map(|f| f.to_string())
                        .unwrap_or_default()
                })
                .collect();
            out.push_str(&format!("{e},{}\n", cells.join(",")));
        }
        out
    }

    /// Dev F1 per epoch for one task.
    pub fn dev_f1_series(&self, task_id: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.task_id == task_id)
            .filter_map(|r| r.dev_f1)
            .collect()
    }
}

/// Tasks trained in each epoch under `algorithm`, as indices into `tasks`.
pub fn epoch_schedule(algorithm: Algorithm, n_tasks: usize, epoch_max: usize) -> Vec<Vec<usize>> {
    (0..epoch_max)
        .map(|e| match algorithm {
            Algorithm::MergedShuffle => (0..n_tasks).collect(),
            Algorithm::DatasetOrdered => vec![e % n_tasks],
        })
        .collect()
}

/// Mini-batches of `epoch` in the order they are applied.
pub fn epoch_batches(
    tasks: &[TrainingTask],
    config: &TrainConfig,
    epoch: usize,
) -> Result<Vec<MiniBatch>> {
    let schedule = &epoch_schedule(config.algorithm, tasks.len(), epoch + 1)[epoch];
    let mut pool = Vec::new();
    for &i in schedule {
        let t = &tasks[i];
        pool.extend(make_minibatches(
            &t.task_id,
            &t.train,
            config.batch_size,
            batch_seed(config.seed, epoch, i),
        )?);
    }
    if config.algorithm == Algorithm::MergedShuffle {
        pool.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            config.seed,
            epoch as u64,
            POOL_STREAM,
        )));
    }
    Ok(pool)
}

pub fn total_steps(tasks: &[TrainingTask], config: &TrainConfig) -> usize {
    epoch_schedule(config.algorithm, tasks.len(), config.epoch_max)
        .iter()
        .flatten()
        .map(|&i| tasks[i].n_batches(config.batch_size))
        .sum()
}

/// Runs `config.algorithm` for `config.epoch_max` epochs, evaluating every
/// task's dev split after each epoch.
pub fn train(
    model: &mut MultiTaskModel,
    tasks: &[TrainingTask],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_observed(model, tasks, config, &mut |_| {})
}

/// [`train`], calling `observe` with each epoch record as it is produced.
pub fn train_observed(
    model: &mut MultiTaskModel,
    tasks: &[TrainingTask],
    config: &TrainConfig,
    observe: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if tasks.is_empty() {
        return Err(Error::Config("no tasks to train".into()));
    }
    for t in tasks {
        model.registry.get(&t.task_id)?;
        if t.train.is_empty() {
            return Err(Error::Config(format!(
                "task {:?} has an empty training split",
                t.task_id
            )));
        }
    }
    model.encoder.frozen = config.freeze_encoder;
    let total = total_steps(tasks, config);
    let mut state = TrainerState::new(config.seed, total);
    let mut records = Vec::new();
    let mut steps = Vec::new();
    let mut lr = 0.0;

    for epoch in 0..config.epoch_max {
        let mut losses: IndexMap<&str, (f64, usize)> = IndexMap::new();
        for batch in epoch_batches(tasks, config, epoch)? {
            lr = lr_at(state.global_step, total, config)?;
            let (report, grads) =
                model.loss_and_gradients(&[&batch], Some(&mut state.dropout_rng))?;
            optimizer_step(model, &grads, &mut state.optimizer, lr, config)?;
            let raw = report.per_task[&batch.task_id].raw_loss;
            let task = tasks
                .iter()
                .find(|t| t.task_id == batch.task_id)
                .expect("batch of known task");
            let acc = losses.entry(task.task_id.as_str()).or_insert((0.0, 0));
            acc.0 += raw;
            acc.1 += 1;
            steps.push(StepRecord {
                step: state.global_step,
                task_id: batch.task_id.clone(),
                lr,
                loss: report.total,
            });
            state.global_step += 1;
        }
        state.epochs_completed = epoch + 1;

        for t in tasks {
            let trained = losses.get(t.task_id.as_str());
            let mut record = EpochRecord {
                epoch: epoch + 1,
                step: state.global_step,
                task_id: t.task_id.clone(),
                lr,
                raw_loss: trained.map(|(sum, n)| sum / *n as f64),
                dev_loss: None,
                dev_precision: None,
                dev_recall: None,
                dev_f1: None,
                trained: trained.is_some(),
            };
            if !t.dev.is_empty() {
                let ev = evaluate_task(model, &t.dev, &t.task_id, config.eval_batch_size)?;
                record.dev_loss = Some(ev.loss);
                record.dev_precision = Some(ev.score.precision);
                record.dev_recall = Some(ev.score.recall);
                record.dev_f1 = Some(ev.score.f1);
                let best = state.best_dev.entry(t.task_id.clone()).or_insert(BestDev {
                    epoch: epoch + 1,
                    f1: ev.score.f1,
                });
                if ev.score.f1 > best.f1 {
                    *best = BestDev {
                        epoch: epoch + 1,
                        f1: ev.score.f1,
                    };
                }
            }
            observe(&record);
            records.push(record);
        }
    }
    Ok(TrainOutcome {
        state,
        records,
        steps,
    })
}

/// Algorithm I: every epoch pools and shuffles all tasks' batches.
pub fn train_merged_shuffle(
    model: &mut MultiTaskModel,
    tasks: &[TrainingTask],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let config = TrainConfig {
        algorithm: Algorithm::MergedShuffle,
        ..config.clone()
    };
    train(model, tasks, &config)
}

/// Algorithm II: epoch `e` trains only on task `e mod m`.
pub fn train_dataset_ordered(
    model: &mut MultiTaskModel,
    tasks: &[TrainingTask],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    let config = TrainConfig {
        algorithm: Algorithm::DatasetOrdered,
        ..config.clone()
    };
    train(model, tasks, &config)
}
