//! Single-file model archive.
//!
//! ```text
//! MAGIC (8 bytes) | header length (u64 LE) | JSON header | payload
//! ```
//!
//! The payload is the concatenation of every tensor as little-endian f64;
//! the header's tensor directory gives each tensor's byte offset and length
//! within it, and `checksum` is the SHA-256 of the whole payload.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::data::Vocab;
use crate::encoder::{EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::model::{head_bias_name, head_weight_name, MultiTaskModel, TaskHead, TaskRegistry};
use crate::training::{AdamMoments, BestDev, OptimizerState, TrainerState};

pub const MAGIC: &[u8; 8] = b"MTAGCKPT";
pub const FORMAT: &str = "multitag-checkpoint";
pub const VERSION: u32 = 1;

const MOMENT_M: &str = "optimizer.m.";
const MOMENT_V: &str = "optimizer.v.";
/// Refuse headers larger than this before allocating for them.
const MAX_HEADER_BYTES: u64 = 1 << 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
    /// Byte length; always `8 × numel`.
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngSnapshot {
    pub seed: [u8; 32],
    pub stream: u64,
    /// A u128 word position, as a decimal string.
    pub word_pos: String,
}

impl RngSnapshot {
    fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    fn restore(&self) -> Result<ChaCha8Rng> {
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng word position {:?}", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Trainer state without the moment vectors, which live in the payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSnapshot {
    pub global_step: usize,
    pub total_steps: usize,
    pub epochs_completed: usize,
    /// Per-parameter Adam update counts.
    pub moment_steps: IndexMap<String, u64>,
    pub dropout_rng: RngSnapshot,
    pub best_dev: IndexMap<String, BestDev>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub encoder_config: EncoderConfig,
    pub encoder_frozen: bool,
    pub tasks: TaskRegistry,
    pub vocab: Vec<String>,
    pub tensors: Vec<TensorEntry>,
    pub training_state: Option<TrainingSnapshot>,
    /// `sha256:` followed by the lowercase hex digest of the payload.
    pub checksum: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: MultiTaskModel,
    pub trainer: Option<TrainerState>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(7 + 64);
    out.push_str("sha256:");
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Serializes `model` and, if given, the trainer state needed to resume.
pub fn to_bytes(model: &MultiTaskModel, trainer: Option<&TrainerState>) -> Result<Vec<u8>> {
    let mut named: Vec<(String, &[usize], &[f64])> = model
        .parameters()
        .into_iter()
        .map(|(name, t)| (name, t.shape(), t.data()))
        .collect();
    let training_state = trainer.map(|state| {
        let mut steps = IndexMap::new();
        for (name, mom) in &state.optimizer.moments {
            steps.insert(name.clone(), mom.t);
        }
        TrainingSnapshot {
            global_step: state.global_step,
            total_steps: state.total_steps,
            epochs_completed: state.epochs_completed,
            moment_steps: steps,
            dropout_rng: RngSnapshot::capture(&state.dropout_rng),
            best_dev: state.best_dev.clone(),
        }
    });
    // Moment shapes follow their parameter.
    let shapes: IndexMap<String, Vec<usize>> = named
        .iter()
        .map(|(n, s, _)| (n.clone(), s.to_vec()))
        .collect();
    let mut moment_shapes = Vec::new();
    if let Some(state) = trainer {
        for (name, mom) in &state.optimizer.moments {
            let shape = shapes.get(name).ok_or_else(|| {
                Error::Checkpoint(format!("optimizer state for unknown parameter {name:?}"))
            })?;
            moment_shapes.push((name, shape.clone(), mom));
        }
    }
    for (name, shape, mom) in &moment_shapes {
        named.push((format!("{MOMENT_M}{name}"), shape, &mom.m));
        named.push((format!("{MOMENT_V}{name}"), shape, &mom.v));
    }

    let mut payload = Vec::with_capacity(named.iter().map(|(_, _, d)| d.len() * 8).sum());
    let mut entries = Vec::with_capacity(named.len());
    for (name, shape, data) in &named {
        let offset = payload.len() as u64;
        for v in *data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.to_vec(),
            offset,
            length: payload.len() as u64 - offset,
        });
    }
    let header = Header {
        format: FORMAT.into(),
        version: VERSION,
        encoder_config: model.encoder.config.clone(),
        encoder_frozen: model.encoder.frozen,
        tasks: model.registry.clone(),
        vocab: model.vocab.tokens().to_vec(),
        tensors: entries,
        training_state,
        checksum: sha256_hex(&payload),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Splits an archive into its parsed header and verified payload.
pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Checkpoint(
            "not a checkpoint file (bad magic)".into(),
        ));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    if len > MAX_HEADER_BYTES || 16 + len > bytes.len() as u64 {
        return Err(Error::Checkpoint(format!(
            "header length {len} exceeds file size"
        )));
    }
    let (json, payload) = bytes[16..].split_at(len as usize);
    let header: Header =
        serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format != FORMAT {
        return Err(Error::Checkpoint(format!(
            "unknown format {:?}",
            header.format
        )));
    }
    if header.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {} (expected {VERSION})",
            header.version
        )));
    }
    let actual = sha256_hex(payload);
    if actual != header.checksum {
        return Err(Error::Checkpoint(format!(
            "checksum mismatch: header says {}, payload is {actual}",
            header.checksum
        )));
    }
    Ok((header, payload))
}

fn read_tensors(header: &Header, payload: &[u8]) -> Result<IndexMap<String, Tensor>> {
    let mut out = IndexMap::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let numel = e
            .shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let expected = numel.and_then(|n| n.checked_mul(8)).map(|n| n as u64);
        if expected != Some(e.length) {
            return Err(Error::Checkpoint(format!(
                "tensor {:?}: shape {:?} does not match byte length {}",
                e.name, e.shape, e.length
            )));
        }
        let end = e
            .offset
            .checked_add(e.length)
            .filter(|&end| end <= payload.len() as u64);
        let Some(end) = end else {
            return Err(Error::Checkpoint(format!(
                "tensor {:?} extends past the payload",
                e.name
            )));
        };
        let data = payload[e.offset as usize..end as usize]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let tensor = Tensor::new(e.shape.clone(), data)
            .map_err(|err| Error::Checkpoint(format!("tensor {:?}: {err}", e.name)))?;
        if out.insert(e.name.clone(), tensor).is_some() {
            return Err(Error::Checkpoint(format!(
                "tensor {:?} appears more than once",
                e.name
            )));
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (header, payload) = read_header(bytes)?;
    let mut tensors = read_tensors(&header, payload)?;
    let vocab =
        Vocab::new(header.vocab.clone()).map_err(|e| Error::Checkpoint(format!("vocab: {e}")))?;
    header
        .encoder_config
        .validate()
        .map_err(|e| Error::Checkpoint(format!("encoder config: {e}")))?;

    let mut take = |name: &str| {
        tensors
            .shift_remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
    };
    let mut encoder_tensors = IndexMap::new();
    for (name, _) in header.encoder_config.parameter_shapes() {
        let t = take(&name)?;
        encoder_tensors.insert(name, t);
    }
    let mut encoder = EncoderParams::from_tensors(header.encoder_config.clone(), encoder_tensors)?;
    encoder.frozen = header.encoder_frozen;
    let mut heads = IndexMap::new();
    for task in header.tasks.tasks() {
        let weight = take(&head_weight_name(&task.task_id))?;
        let bias = take(&head_bias_name(&task.task_id))?;
        heads.insert(task.task_id.clone(), TaskHead { weight, bias });
    }
    let model = MultiTaskModel::from_parts(vocab, encoder, header.tasks.clone(), heads)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;

    let trainer = match &header.training_state {
        None => None,
        Some(snap) => {
            let mut optimizer = OptimizerState::default();
            for (name, &t) in &snap.moment_steps {
                let m = take(&format!("{MOMENT_M}{name}"))?.into_data();
                let v = take(&format!("{MOMENT_V}{name}"))?.into_data();
                optimizer
                    .moments
                    .insert(name.clone(), AdamMoments { m, v, t });
            }
            Some(TrainerState {
                global_step: snap.global_step,
                total_steps: snap.total_steps,
                epochs_completed: snap.epochs_completed,
                optimizer,
                dropout_rng: snap.dropout_rng.restore()?,
                best_dev: snap.best_dev.clone(),
            })
        }
    };
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra:?}")));
    }
    Ok(Checkpoint { model, trainer })
}

pub fn save(path: &Path, model: &MultiTaskModel, trainer: Option<&TrainerState>) -> Result<()> {
    let bytes = to_bytes(model, trainer)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
