//! Loading encoder weights produced elsewhere.
//!
//! The archive is a safetensors file (F32 or F64). A TOML mapping names the
//! archive tensor behind every encoder parameter and supplies what the
//! shapes cannot: head count, vocabulary and the task registry. Sizes are
//! read from the archive.
//!
//! ```toml
//! num_heads = 2
//! vocab = "vocab.txt"          # relative to the mapping file
//! seed = 0                     # head initialization
//!
//! [[tasks]]
//! task_id = "NCBI"
//! labels = ["O", "B-Disease", "I-Disease"]   # or labels_file = "ncbi.labels"
//!
//! [tensors]
//! "embeddings.token" = "bert.embeddings.word_embeddings.weight"
//! "layer.0.attention.query.weight" = { source = "bert...query.weight", transpose = true }
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{LabelMap, Vocab};
use crate::encoder::{
    EncoderConfig, EncoderParams, LayerNames, POSITION_EMBEDDINGS, SEGMENT_EMBEDDINGS,
    TOKEN_EMBEDDINGS,
};
use crate::error::{Error, Result};
use crate::model::{MultiTaskModel, TaskRegistry, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TensorSource {
    Name(String),
    Detailed {
        source: String,
        #[serde(default)]
        transpose: bool,
    },
}

impl TensorSource {
    pub fn source(&self) -> &str {
        match self {
            TensorSource::Name(s) | TensorSource::Detailed { source: s, .. } => s,
        }
    }

    pub fn transpose(&self) -> bool {
        matches!(
            self,
            TensorSource::Detailed {
                transpose: true,
                ..
            }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportTask {
    pub task_id: String,
    #[serde(default)]
    pub dataset_name: String,
    #[serde(default = "one")]
    pub lambda: f64,
    #[serde(default)]
    pub labels: Option<Vec<String>>,
    #[serde(default)]
    pub labels_file: Option<PathBuf>,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImportMap {
    pub num_heads: usize,
    #[serde(default)]
    pub dropout_rate: f64,
    pub vocab: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub tasks: Vec<ImportTask>,
    /// Internal parameter name → archive tensor.
    pub tensors: IndexMap<String, TensorSource>,
}

impl ImportMap {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("import mapping: {e}")))
    }

    /// Loads the mapping and resolves its relative paths against its own
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut map = Self::parse(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        map.vocab = base.join(&map.vocab);
        for t in &mut map.tasks {
            if let Some(f) = &t.labels_file {
                t.labels_file = Some(base.join(f));
            }
        }
        Ok(map)
    }

    /// Maps every name of `config` to itself, as written by [`export_encoder`].
    pub fn identity(config: &EncoderConfig, vocab: PathBuf, tasks: Vec<ImportTask>) -> Self {
        Self {
            num_heads: config.num_heads,
            dropout_rate: config.dropout_rate,
            vocab,
            seed: 0,
            tasks,
            tensors: config
                .parameter_shapes()
                .into_iter()
                .map(|(n, _)| (n.clone(), TensorSource::Name(n)))
                .collect(),
        }
    }

    pub fn registry(&self) -> Result<TaskRegistry> {
        let tasks = self
            .tasks
            .iter()
            .map(|t| {
                let labels = match (&t.labels, &t.labels_file) {
                    (Some(l), None) => LabelMap::new(l.clone())?,
                    (None, Some(path)) => LabelMap::load(path)?,
                    _ => {
                        return Err(Error::Config(format!(
                            "task {:?} needs exactly one of labels and labels_file",
                            t.task_id
                        )))
                    }
                };
                Ok(TaskSpec {
                    task_id: t.task_id.clone(),
                    dataset_name: t.dataset_name.clone(),
                    lambda: t.lambda,
                    labels,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        TaskRegistry::new(tasks)
    }
}

fn view_to_f64(name: &str, view: &TensorView<'_>) -> Result<Vec<f64>> {
    let bytes = view.data();
    match view.dtype() {
        Dtype::F64 => Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect()),
        Dtype::F32 => Ok(bytes
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect()),
        other => Err(Error::Checkpoint(format!(
            "archive tensor {name:?} has unsupported dtype {other:?}"
        ))),
    }
}

struct Archive<'a> {
    st: SafeTensors<'a>,
    map: &'a ImportMap,
}

impl Archive<'_> {
    /// The archive tensor behind internal parameter `name`, transposed if
    /// the mapping says so.
    fn fetch(&self, name: &str) -> Result<Tensor> {
        let src = self.map.tensors.get(name).ok_or_else(|| {
            Error::Checkpoint(format!("no mapping for encoder parameter {name:?}"))
        })?;
        let view = self.st.tensor(src.source()).map_err(|_| {
            Error::Checkpoint(format!(
                "archive has no tensor {:?} (mapped to {name:?})",
                src.source()
            ))
        })?;
        let data = view_to_f64(src.source(), &view)?;
        let shape = view.shape().to_vec();
        if !src.transpose() {
            return Tensor::new(shape, data);
        }
        let [r, c] = shape[..] else {
            return Err(Error::Checkpoint(format!(
                "cannot transpose {:?} of shape {shape:?}",
                src.source()
            )));
        };
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = data[i * c + j];
            }
        }
        Tensor::new(vec![c, r], out)
    }

    fn dim(&self, name: &str, axis: usize) -> Result<usize> {
        let t = self.fetch(name)?;
        t.shape().get(axis).copied().ok_or_else(|| {
            Error::Checkpoint(format!(
                "{name:?} has shape {:?}, expected a matrix",
                t.shape()
            ))
        })
    }

    fn config(&self) -> Result<EncoderConfig> {
        let mut layers = BTreeSet::new();
        for key in self.map.tensors.keys() {
            if let Some(rest) = key.strip_prefix("layer.") {
                let idx = rest.split('.').next().and_then(|s| s.parse::<usize>().ok());
                let Some(idx) = idx else {
                    return Err(Error::Checkpoint(format!(
                        "bad layer parameter name {key:?}"
                    )));
                };
                layers.insert(idx);
            }
        }
        let num_layers = layers.len();
        if layers.iter().copied().ne(0..num_layers) {
            return Err(Error::Checkpoint(format!(
                "layer indices {layers:?} are not 0..{num_layers}"
            )));
        }
        let config = EncoderConfig {
            vocab_size: self.dim(TOKEN_EMBEDDINGS, 0)?,
            hidden_size: self.dim(TOKEN_EMBEDDINGS, 1)?,
            num_layers,
            num_heads: self.map.num_heads,
            feedforward_size: if num_layers > 0 {
                self.dim(&LayerNames::new(0).ffn_in_w, 1)?
            } else {
                self.dim(TOKEN_EMBEDDINGS, 1)? * 2
            },
            max_position: self.dim(POSITION_EMBEDDINGS, 0)?,
            num_segments: self.dim(SEGMENT_EMBEDDINGS, 0)?,
            dropout_rate: self.map.dropout_rate,
        };
        config.validate()?;
        Ok(config)
    }
}

/// Encoder weights from `archive` (a safetensors buffer) under `map`.
pub fn import_encoder(archive: &[u8], map: &ImportMap) -> Result<EncoderParams> {
    let st = SafeTensors::deserialize(archive)
        .map_err(|e| Error::Checkpoint(format!("bad archive: {e}")))?;
    let archive = Archive { st, map };
    let config = archive.config()?;
    let shapes = config.parameter_shapes();
    let known: BTreeSet<&str> = shapes.iter().map(|(n, _)| n.as_str()).collect();
    if let Some(stray) = map.tensors.keys().find(|k| !known.contains(k.as_str())) {
        return Err(Error::Checkpoint(format!(
            "mapping names unknown encoder parameter {stray:?}"
        )));
    }
    let mut tensors = IndexMap::new();
    for (name, shape) in shapes {
        let t = archive.fetch(&name)?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "tensor {name:?} (archive {:?}) has shape {:?}, expected {shape:?}",
                map.tensors[&name].source(),
                t.shape()
            )));
        }
        tensors.insert(name, t);
    }
    EncoderParams::from_tensors(config, tensors)
}

/// Imported encoder plus freshly initialized heads for the mapped tasks.
pub fn import_weights(archive: &[u8], map: &ImportMap, vocab: Vocab) -> Result<MultiTaskModel> {
    let encoder = import_encoder(archive, map)?;
    let registry = map.registry()?;
    let mut rng = ChaCha8Rng::seed_from_u64(map.seed);
    MultiTaskModel::with_encoder(vocab, encoder, registry, &mut rng)
}

pub fn import_files(archive: &Path, map: &Path) -> Result<MultiTaskModel> {
    let map = ImportMap::load(map)?;
    let bytes = fs::read(archive).map_err(|e| Error::io(archive, e))?;
    let vocab = Vocab::load(&map.vocab)?;
    import_weights(&bytes, &map, vocab)
}

/// The encoder as an F64 safetensors archive under internal names.
pub fn export_encoder(encoder: &EncoderParams) -> Result<Vec<u8>> {
    let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = encoder
        .tensors()
        .iter()
        .map(|(n, t)| {
            let raw = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
            (n.clone(), t.shape().to_vec(), raw)
        })
        .collect();
    let views = bytes
        .iter()
        .map(|(n, shape, raw)| {
            TensorView::new(Dtype::F64, shape.clone(), raw)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Checkpoint(format!("export {n:?}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize(views, &None).map_err(|e| Error::Checkpoint(format!("export: {e}")))
}
