//! Shared encoder plus one linear softmax head per task, and the
//! λ-weighted multi-task cross-entropy objective.

use indexmap::IndexMap;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var, IGNORE_INDEX};
use crate::data::{
    encode_chunks, encode_words, sequential_minibatches, LabelMap, MiniBatch, RawSentence,
    TokenizedExample, Vocab,
};
use crate::encoder::{encoder_forward, BoundEncoder, EncoderConfig, EncoderInput, EncoderParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    #[serde(default)]
    pub dataset_name: String,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub labels: LabelMap,
}

fn default_lambda() -> f64 {
    1.0
}

impl TaskSpec {
    pub fn new(task_id: impl Into<String>, labels: LabelMap) -> Self {
        let task_id = task_id.into();
        Self {
            dataset_name: task_id.clone(),
            task_id,
            lambda: 1.0,
            labels,
        }
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }
}

/// Ordered, non-empty set of tasks with unique ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<TaskSpec>", into = "Vec<TaskSpec>")]
pub struct TaskRegistry {
    tasks: Vec<TaskSpec>,
}

impl TaskRegistry {
    pub fn new(tasks: Vec<TaskSpec>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Config("at least one task is required".into()));
        }
        for (i, t) in tasks.iter().enumerate() {
            if tasks[..i].iter().any(|u| u.task_id == t.task_id) {
                return Err(Error::Config(format!("duplicate task id {:?}", t.task_id)));
            }
            if !(t.lambda >= 0.0 && t.lambda.is_finite()) {
                return Err(Error::Config(format!(
                    "task {:?}: lambda must be finite and >= 0",
                    t.task_id
                )));
            }
        }
        Ok(Self { tasks })
    }

    pub fn get(&self, task_id: &str) -> Result<&TaskSpec> {
        self.tasks
            .iter()
            .find(|t| t.task_id == task_id)
            .ok_or_else(|| self.unknown(task_id))
    }

    pub fn get_mut(&mut self, task_id: &str) -> Result<&mut TaskSpec> {
        let err = self.unknown(task_id);
        self.tasks
            .iter_mut()
            .find(|t| t.task_id == task_id)
            .ok_or(err)
    }

    fn unknown(&self, task_id: &str) -> Error {
        Error::UnknownTask {
            task: task_id.to_string(),
            available: self.ids().map(String::from).collect(),
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.tasks.iter().map(|t| t.task_id.as_str())
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

impl TryFrom<Vec<TaskSpec>> for TaskRegistry {
    type Error = Error;

    fn try_from(tasks: Vec<TaskSpec>) -> Result<Self> {
        Self::new(tasks)
    }
}

impl From<TaskRegistry> for Vec<TaskSpec> {
    fn from(r: TaskRegistry) -> Self {
        r.tasks
    }
}

/// `logits = h · weight + bias` with `weight: [H×K]`, `bias: [K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl TaskHead {
    /// Uniform in ±1/√H.
    pub fn init<R: Rng + ?Sized>(hidden: usize, classes: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut draw =
            |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-bound..bound)).collect() };
        let weight =
            Tensor::new(vec![hidden, classes], draw(hidden * classes)).expect("positive dims");
        let bias = Tensor::new(vec![classes], draw(classes)).expect("positive dims");
        Self { weight, bias }
    }

    pub fn classes(&self) -> usize {
        self.bias.numel()
    }
}

pub fn head_weight_name(task_id: &str) -> String {
    format!("head.{task_id}.weight")
}

pub fn head_bias_name(task_id: &str) -> String {
    format!("head.{task_id}.bias")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskLoss {
    pub lambda: f64,
    pub raw_loss: f64,
    pub weighted_loss: f64,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub per_task: IndexMap<String, TaskLoss>,
}

/// Gradients keyed by parameter name; frozen parameters are absent.
pub type NamedGradients = IndexMap<String, Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskModel {
    pub vocab: Vocab,
    pub encoder: EncoderParams,
    pub registry: TaskRegistry,
    heads: IndexMap<String, TaskHead>,
}

struct BoundHead {
    weight: Var,
    bias: Var,
}

impl MultiTaskModel {
    /// Fresh encoder and heads drawn from `rng`, encoder first.
    pub fn init<R: Rng + ?Sized>(
        vocab: Vocab,
        config: EncoderConfig,
        registry: TaskRegistry,
        rng: &mut R,
    ) -> Result<Self> {
        if config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "encoder vocab_size {} but vocabulary has {} tokens",
                config.vocab_size,
                vocab.len()
            )));
        }
        let encoder = EncoderParams::init(config, rng)?;
        Self::with_encoder(vocab, encoder, registry, rng)
    }

    /// Keeps `encoder` and draws fresh heads.
    pub fn with_encoder<R: Rng + ?Sized>(
        vocab: Vocab,
        encoder: EncoderParams,
        registry: TaskRegistry,
        rng: &mut R,
    ) -> Result<Self> {
        let h = encoder.config.hidden_size;
        let heads = registry
            .tasks()
            .iter()
            .map(|t| (t.task_id.clone(), TaskHead::init(h, t.labels.len(), rng)))
            .collect();
        Self::from_parts(vocab, encoder, registry, heads)
    }

    pub fn from_parts(
        vocab: Vocab,
        encoder: EncoderParams,
        registry: TaskRegistry,
        heads: IndexMap<String, TaskHead>,
    ) -> Result<Self> {
        if encoder.config.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "encoder vocab_size {} but vocabulary has {} tokens",
                encoder.config.vocab_size,
                vocab.len()
            )));
        }
        if heads.len() != registry.len() {
            return Err(Error::Config(format!(
                "{} heads for {} tasks",
                heads.len(),
                registry.len()
            )));
        }
        let h = encoder.config.hidden_size;
        for t in registry.tasks() {
            let head = heads
                .get(&t.task_id)
                .ok_or_else(|| Error::Config(format!("no head for task {:?}", t.task_id)))?;
            let k = t.labels.len();
            if head.weight.shape() != [h, k] || head.bias.shape() != [k] {
                return Err(Error::Shape {
                    op: "task head",
                    left: head.weight.shape().to_vec(),
                    right: vec![h, k],
                });
            }
        }
        Ok(Self {
            vocab,
            encoder,
            registry,
            heads,
        })
    }

    pub fn head(&self, task_id: &str) -> Result<&TaskHead> {
        self.registry.get(task_id)?;
        Ok(&self.heads[task_id])
    }

    pub fn head_mut(&mut self, task_id: &str) -> Result<&mut TaskHead> {
        self.registry.get(task_id)?;
        Ok(&mut self.heads[task_id])
    }

    pub fn heads(&self) -> &IndexMap<String, TaskHead> {
        &self.heads
    }

    /// Every parameter by name (encoder first, then heads in registry
    /// order), with whether it is currently trainable.
    pub fn parameters_mut(&mut self) -> Vec<(String, &mut Tensor, bool)> {
        let frozen = self.encoder.frozen;
        let mut out: Vec<(String, &mut Tensor, bool)> = self
            .encoder
            .tensors_mut()
            .map(|(n, t)| (n.clone(), t, !frozen))
            .collect();
        for (task, head) in self.heads.iter_mut() {
            out.push((head_weight_name(task), &mut head.weight, true));
            out.push((head_bias_name(task), &mut head.bias, true));
        }
        out
    }

    pub fn parameters(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self
            .encoder
            .tensors()
            .iter()
            .map(|(n, t)| (n.clone(), t))
            .collect();
        for (task, head) in &self.heads {
            out.push((head_weight_name(task), &head.weight));
            out.push((head_bias_name(task), &head.bias));
        }
        out
    }

    fn bind_head(&self, tape: &mut Tape, task_id: &str, trainable: bool) -> BoundHead {
        let head = &self.heads[task_id];
        BoundHead {
            weight: tape.param(&head.weight, trainable),
            bias: tape.param(&head.bias, trainable),
        }
    }

    fn batch_input<'a>(&self, batch: &'a MiniBatch) -> Result<EncoderInput<'a>> {
        EncoderInput::new(
            &batch.token_ids,
            &batch.segment_ids,
            &batch.mask,
            batch.batch_size,
            batch.seq_len,
        )
    }

    /// Shared contextual embeddings of a batch, `[B×n×H]`.
    pub fn encode(&self, batch: &MiniBatch) -> Result<Tensor> {
        self.encoder.forward(&self.batch_input(batch)?)
    }

    /// Raw `[B×n×K]` logits of `task_id`'s head.
    pub fn task_forward(&self, batch: &MiniBatch, task_id: &str) -> Result<Tensor> {
        let k = self.registry.get(task_id)?.labels.len();
        let mut tape = Tape::new();
        let enc = self.encoder.bind(&mut tape, false);
        let logits = self.logits_on_tape(&mut tape, &enc, batch, task_id, false, None)?;
        tape.value(logits)
            .clone()
            .reshape(vec![batch.batch_size, batch.seq_len, k])
    }

    fn logits_on_tape(
        &self,
        tape: &mut Tape,
        enc: &BoundEncoder,
        batch: &MiniBatch,
        task_id: &str,
        trainable: bool,
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let hidden = encoder_forward(
            tape,
            &self.encoder.config,
            enc,
            &self.batch_input(batch)?,
            dropout,
        )?;
        let head = self.bind_head(tape, task_id, trainable);
        let logits = tape.matmul(hidden, head.weight)?;
        tape.add_bias(logits, head.bias)
    }

    fn check_labels(&self, batch: &MiniBatch, task_id: &str) -> Result<()> {
        let k = self.registry.get(task_id)?.labels.len();
        match batch
            .label_ids
            .iter()
            .find(|&&l| l != IGNORE_INDEX && l >= k)
        {
            Some(&id) => Err(Error::LabelRange {
                task: task_id.to_string(),
                id,
                classes: k,
            }),
            None => Ok(()),
        }
    }

    /// Builds `Σ λ_t · CE_t` over `batches` on `tape`.
    fn loss_on_tape(
        &self,
        tape: &mut Tape,
        batches: &[&MiniBatch],
        trainable: bool,
        mut dropout: Option<&mut dyn RngCore>,
    ) -> Result<(Var, LossReport, BoundEncoder, IndexMap<String, BoundHead>)> {
        if batches.is_empty() {
            return Err(Error::contract("multi-task loss needs at least one batch"));
        }
        let enc = self.encoder.bind(tape, trainable);
        let mut heads: IndexMap<String, BoundHead> = IndexMap::new();
        let mut per_task: IndexMap<String, TaskLoss> = IndexMap::new();
        let mut total: Option<Var> = None;
        for batch in batches {
            let task = &batch.task_id;
            let spec = self.registry.get(task)?;
            self.check_labels(batch, task)?;
            let hidden = encoder_forward(
                tape,
                &self.encoder.config,
                &enc,
                &self.batch_input(batch)?,
                dropout.as_mut().map(|r| &mut **r as &mut dyn RngCore),
            )?;
            if !heads.contains_key(task) {
                let bound = self.bind_head(tape, task, trainable);
                heads.insert(task.clone(), bound);
            }
            let head = &heads[task];
            let logits = tape.matmul(hidden, head.weight)?;
            let logits = tape.add_bias(logits, head.bias)?;
            let ce = tape.cross_entropy(logits, &batch.label_ids, IGNORE_INDEX)?;
            let weighted = tape.scale(ce, spec.lambda)?;
            let raw = tape.value(ce).data()[0];
            let entry = per_task.entry(task.clone()).or_insert(TaskLoss {
                lambda: spec.lambda,
                raw_loss: 0.0,
                weighted_loss: 0.0,
                token_count: 0,
            });
            entry.raw_loss += raw;
            entry.weighted_loss += tape.value(weighted).data()[0];
            entry.token_count += batch.labelled_positions();
            total = Some(match total {
                None => weighted,
                Some(t) => tape.add(t, weighted)?,
            });
        }
        let total = total.expect("at least one batch");
        let report = LossReport {
            total: tape.value(total).data()[0],
            per_task,
        };
        Ok((total, report, enc, heads))
    }

    /// `Σ λ_t · CE_t` over the supplied batches, without gradients.
    pub fn multi_task_loss(&self, batches: &[&MiniBatch]) -> Result<LossReport> {
        let mut tape = Tape::new();
        Ok(self.loss_on_tape(&mut tape, batches, false, None)?.1)
    }

    /// Loss plus the gradient of every trainable parameter that the batches
    /// reach. Dropout is active only when `dropout` is given.
    pub fn loss_and_gradients(
        &self,
        batches: &[&MiniBatch],
        dropout: Option<&mut dyn RngCore>,
    ) -> Result<(LossReport, NamedGradients)> {
        let mut tape = Tape::new();
        let (total, report, enc, heads) = self.loss_on_tape(&mut tape, batches, true, dropout)?;
        let mut grads = tape.backward(total)?;
        let mut named = NamedGradients::new();
        if !self.encoder.frozen {
            for (name, &var) in enc.vars() {
                let g = grads
                    .take(var)
                    .unwrap_or_else(|| vec![0.0; tape.value(var).numel()]);
                named.insert(name.clone(), g);
            }
        }
        for (task, head) in heads {
            for (name, var) in [
                (head_weight_name(&task), head.weight),
                (head_bias_name(&task), head.bias),
            ] {
                let g = grads
                    .take(var)
                    .unwrap_or_else(|| vec![0.0; tape.value(var).numel()]);
                named.insert(name, g);
            }
        }
        for (name, g) in &named {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        Ok((report, named))
    }

    fn max_len(&self) -> usize {
        self.encoder.config.max_position
    }

    /// Word-level labels of one whitespace-tokenized sentence. Sentences
    /// longer than the position table are tagged chunk by chunk.
    pub fn predict_tags(&self, words: &[String], task_id: &str) -> Result<Vec<String>> {
        Ok(self
            .predict_batch(std::slice::from_ref(&words.to_vec()), task_id, 1)?
            .remove(0))
    }

    /// Labels for many sentences, grouped into batches of `batch_size`.
    pub fn predict_batch(
        &self,
        sentences: &[Vec<String>],
        task_id: &str,
        batch_size: usize,
    ) -> Result<Vec<Vec<String>>> {
        self.registry.get(task_id)?;
        let mut examples = Vec::new();
        let mut owners = Vec::new();
        for (i, words) in sentences.iter().enumerate() {
            for ex in encode_words(words, &self.vocab, self.max_len())? {
                examples.push(ex);
                owners.push(i);
            }
        }
        let mut out: Vec<Vec<String>> = sentences
            .iter()
            .map(|s| vec![String::new(); s.len()])
            .collect();
        self.run_examples(&examples, &owners, task_id, batch_size, &mut out, None)?;
        Ok(out)
    }

    /// Predictions for labelled sentences plus the mean cross-entropy over
    /// all their words.
    pub fn predict_labelled(
        &self,
        sentences: &[RawSentence],
        task_id: &str,
        batch_size: usize,
    ) -> Result<(Vec<Vec<String>>, f64)> {
        let labels = &self.registry.get(task_id)?.labels;
        let mut examples = Vec::new();
        let mut owners = Vec::new();
        for (i, s) in sentences.iter().enumerate() {
            for ex in encode_chunks(s, &self.vocab, labels, task_id, self.max_len())? {
                examples.push(ex);
                owners.push(i);
            }
        }
        let mut out: Vec<Vec<String>> = sentences
            .iter()
            .map(|s| vec![String::new(); s.len()])
            .collect();
        let mut loss = (0.0, 0usize);
        self.run_examples(
            &examples,
            &owners,
            task_id,
            batch_size,
            &mut out,
            Some(&mut loss),
        )?;
        let mean = if loss.1 == 0 {
            0.0
        } else {
            loss.0 / loss.1 as f64
        };
        Ok((out, mean))
    }

    fn run_examples(
        &self,
        examples: &[TokenizedExample],
        owners: &[usize],
        task_id: &str,
        batch_size: usize,
        out: &mut [Vec<String>],
        mut loss: Option<&mut (f64, usize)>,
    ) -> Result<()> {
        if examples.is_empty() {
            return Ok(());
        }
        let labels = &self.registry.get(task_id)?.labels;
        let k = labels.len();
        for batch in sequential_minibatches(task_id, examples, batch_size)? {
            let logits = self.task_forward(&batch, task_id)?;
            let n = batch.seq_len;
            for (b, &member) in batch.members.iter().enumerate() {
                let ex = &examples[member];
                let sentence = &mut out[owners[member]];
                let mut word = ex.word_offset;
                for p in 0..ex.len() {
                    if !ex.first_subword[p] {
                        continue;
                    }
                    let row = &logits.data()[(b * n + p) * k..(b * n + p + 1) * k];
                    sentence[word] = labels.label(argmax(row)).expect("id < K").to_string();
                    word += 1;
                    if let Some(acc) = loss.as_deref_mut() {
                        let target = ex.label_ids[p];
                        acc.0 += log_sum_exp(row) - row[target];
                        acc.1 += 1;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
