//! Shared layers: summed token/position/segment embeddings followed by a
//! stack of post-norm bidirectional transformer encoder layers.

use indexmap::IndexMap;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-12;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub feedforward_size: usize,
    #[serde(default = "default_max_position")]
    pub max_position: usize,
    #[serde(default = "default_num_segments")]
    pub num_segments: usize,
    #[serde(default)]
    pub dropout_rate: f64,
}

fn default_max_position() -> usize {
    128
}

fn default_num_segments() -> usize {
    2
}

impl EncoderConfig {
    /// Small configuration used throughout the tests.
    pub fn toy(vocab_size: usize, hidden_size: usize, num_layers: usize, num_heads: usize) -> Self {
        Self {
            vocab_size,
            hidden_size,
            num_layers,
            num_heads,
            feedforward_size: 2 * hidden_size,
            max_position: 128,
            num_segments: 2,
            dropout_rate: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("feedforward_size", self.feedforward_size),
            ("max_position", self.max_position),
            ("num_segments", self.num_segments),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be positive")));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} not in [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    /// Every encoder parameter name with its shape, in canonical order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (h, f) = (self.hidden_size, self.feedforward_size);
        let mut out = vec![
            (TOKEN_EMBEDDINGS.to_string(), vec![self.vocab_size, h]),
            (POSITION_EMBEDDINGS.to_string(), vec![self.max_position, h]),
            (SEGMENT_EMBEDDINGS.to_string(), vec![self.num_segments, h]),
        ];
        for l in 0..self.num_layers {
            let n = LayerNames::new(l);
            out.extend([
                (n.query_w, vec![h, h]),
                (n.query_b, vec![h]),
                (n.key_w, vec![h, h]),
                (n.key_b, vec![h]),
                (n.value_w, vec![h, h]),
                (n.value_b, vec![h]),
                (n.output_w, vec![h, h]),
                (n.output_b, vec![h]),
                (n.attn_gamma, vec![h]),
                (n.attn_beta, vec![h]),
                (n.ffn_in_w, vec![h, f]),
                (n.ffn_in_b, vec![f]),
                (n.ffn_out_w, vec![f, h]),
                (n.ffn_out_b, vec![h]),
                (n.ffn_gamma, vec![h]),
                (n.ffn_beta, vec![h]),
            ]);
        }
        out
    }
}

pub const TOKEN_EMBEDDINGS: &str = "embeddings.token";
pub const POSITION_EMBEDDINGS: &str = "embeddings.position";
pub const SEGMENT_EMBEDDINGS: &str = "embeddings.segment";

/// Parameter names of one encoder layer. Linear weights are `[in × out]`.
#[derive(Debug, Clone)]
pub struct LayerNames {
    pub query_w: String,
    pub query_b: String,
    pub key_w: String,
    pub key_b: String,
    pub value_w: String,
    pub value_b: String,
    pub output_w: String,
    pub output_b: String,
    pub attn_gamma: String,
    pub attn_beta: String,
    pub ffn_in_w: String,
    pub ffn_in_b: String,
    pub ffn_out_w: String,
    pub ffn_out_b: String,
    pub ffn_gamma: String,
    pub ffn_beta: String,
}

impl LayerNames {
    pub fn new(layer: usize) -> Self {
        let p = |s: &str| format!("layer.{layer}.{s}");
        Self {
            query_w: p("attention.query.weight"),
            query_b: p("attention.query.bias"),
            key_w: p("attention.key.weight"),
            key_b: p("attention.key.bias"),
            value_w: p("attention.value.weight"),
            value_b: p("attention.value.bias"),
            output_w: p("attention.output.weight"),
            output_b: p("attention.output.bias"),
            attn_gamma: p("attention.norm.gamma"),
            attn_beta: p("attention.norm.beta"),
            ffn_in_w: p("ffn.input.weight"),
            ffn_in_b: p("ffn.input.bias"),
            ffn_out_w: p("ffn.output.weight"),
            ffn_out_b: p("ffn.output.bias"),
            ffn_gamma: p("ffn.norm.gamma"),
            ffn_beta: p("ffn.norm.beta"),
        }
    }
}

/// Kind of an encoder parameter, which decides its initialization and
/// whether weight decay applies.
pub fn is_bias_or_norm(name: &str) -> bool {
    name.ends_with(".bias") || name.ends_with(".gamma") || name.ends_with(".beta")
}

/// Normal(0, std) truncated to two standard deviations by resampling.
pub fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
        .collect()
}

/// The shared encoder parameters. When `frozen`, no training step touches
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    tensors: IndexMap<String, Tensor>,
    pub frozen: bool,
}

impl EncoderParams {
    /// Embeddings and weight matrices ~ truncated N(0, 0.02²); biases and
    /// norm shifts 0; norm scales 1.
    pub fn init<R: Rng + ?Sized>(config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut tensors = IndexMap::new();
        for (name, shape) in config.parameter_shapes() {
            let n = shape.iter().product();
            let data = if name.ends_with(".gamma") {
                vec![1.0; n]
            } else if is_bias_or_norm(&name) {
                vec![0.0; n]
            } else {
                truncated_normal(rng, n, INIT_STD)
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(Self {
            config,
            tensors,
            frozen: false,
        })
    }

    /// Builds from named tensors; every canonical parameter must be present
    /// exactly once with its canonical shape.
    pub fn from_tensors(
        config: EncoderConfig,
        mut named: IndexMap<String, Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let mut tensors = IndexMap::new();
        for (name, shape) in config.parameter_shapes() {
            let t = named
                .shift_remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing encoder parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "encoder parameter {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            tensors.insert(name, t);
        }
        if let Some(extra) = named.keys().next() {
            return Err(Error::Checkpoint(format!(
                "unexpected encoder parameter {extra}"
            )));
        }
        Ok(Self {
            config,
            tensors,
            frozen: false,
        })
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn tensors(&self) -> &IndexMap<String, Tensor> {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    /// Records every parameter on `tape`; gradients are tracked only when
    /// `trainable` and the encoder is not frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundEncoder {
        let track = trainable && !self.frozen;
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.param(t, track)))
            .collect();
        BoundEncoder { vars }
    }

    /// `[n×H]` sum of token, position and segment embeddings of one sequence.
    pub fn lexicon_encode(&self, token_ids: &[usize], segment_ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let input = EncoderInput::single(token_ids, segment_ids, None)?;
        let out = lexicon_encode(&mut tape, &self.config, &bound, &input)?;
        Ok(tape.value(out).clone())
    }

    /// Attention sublayer of `layer` on one sequence `x: [n×H]`, returning
    /// the projected output and the `[n×n]` weights of every head.
    pub fn multi_head_attention(
        &self,
        layer: usize,
        x: &Tensor,
        mask: &[bool],
    ) -> Result<(Tensor, Vec<Tensor>)> {
        if layer >= self.config.num_layers {
            return Err(Error::Index {
                what: "encoder layer".into(),
                index: layer,
                size: self.config.num_layers,
            });
        }
        let n = x.shape()[0];
        if mask.len() != n || x.shape() != [n, self.config.hidden_size] {
            return Err(Error::Shape {
                op: "multi_head_attention",
                left: x.shape().to_vec(),
                right: vec![mask.len()],
            });
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let mut probe = Vec::new();
        let names = LayerNames::new(layer);
        let out = attention(
            &mut tape,
            &self.config,
            &bound,
            &names,
            xv,
            mask,
            1,
            n,
            Some(&mut probe),
        )?;
        let weights = probe.into_iter().map(|v| tape.value(v).clone()).collect();
        Ok((tape.value(out).clone(), weights))
    }

    /// `[B×n×H]` contextual embeddings, inference mode.
    pub fn forward(&self, input: &EncoderInput<'_>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = encoder_forward(&mut tape, &self.config, &bound, input, None)?;
        let (b, n, h) = (input.batch, input.seq_len, self.config.hidden_size);
        tape.value(out).clone().reshape(vec![b, n, h])
    }
}

/// Encoder parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundEncoder {
    vars: IndexMap<String, Var>,
}

impl BoundEncoder {
    /// Pairs `vars` with `config`'s parameters in canonical order.
    pub fn from_vars(config: &EncoderConfig, vars: &[Var]) -> Result<Self> {
        let shapes = config.parameter_shapes();
        if shapes.len() != vars.len() {
            return Err(Error::contract(format!(
                "{} vars for {} encoder parameters",
                vars.len(),
                shapes.len()
            )));
        }
        Ok(Self {
            vars: shapes
                .into_iter()
                .map(|(n, _)| n)
                .zip(vars.iter().copied())
                .collect(),
        })
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[name]
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// A rectangular right-padded batch of `batch` sequences of `seq_len`.
#[derive(Debug, Clone)]
pub struct EncoderInput<'a> {
    pub token_ids: &'a [usize],
    pub segment_ids: &'a [usize],
    pub mask: std::borrow::Cow<'a, [bool]>,
    pub batch: usize,
    pub seq_len: usize,
}

impl<'a> EncoderInput<'a> {
    pub fn new(
        token_ids: &'a [usize],
        segment_ids: &'a [usize],
        mask: &'a [bool],
        batch: usize,
        seq_len: usize,
    ) -> Result<Self> {
        let n = batch * seq_len;
        if batch == 0
            || seq_len == 0
            || token_ids.len() != n
            || segment_ids.len() != n
            || mask.len() != n
        {
            return Err(Error::Shape {
                op: "encoder input",
                left: vec![batch, seq_len],
                right: vec![token_ids.len(), segment_ids.len(), mask.len()],
            });
        }
        Ok(Self {
            token_ids,
            segment_ids,
            mask: std::borrow::Cow::Borrowed(mask),
            batch,
            seq_len,
        })
    }

    /// One sequence, all positions unmasked unless `mask` is given.
    pub fn single(
        token_ids: &'a [usize],
        segment_ids: &'a [usize],
        mask: Option<&'a [bool]>,
    ) -> Result<Self> {
        let n = token_ids.len();
        if n == 0 || segment_ids.len() != n {
            return Err(Error::Shape {
                op: "encoder input",
                left: vec![n],
                right: vec![segment_ids.len()],
            });
        }
        let mask = match mask {
            Some(m) if m.len() == n => std::borrow::Cow::Borrowed(m),
            Some(m) => {
                return Err(Error::Shape {
                    op: "encoder input",
                    left: vec![n],
                    right: vec![m.len()],
                })
            }
            None => std::borrow::Cow::Owned(vec![true; n]),
        };
        Ok(Self {
            token_ids,
            segment_ids,
            mask,
            batch: 1,
            seq_len: n,
        })
    }
}

/// `[B·n×H]` input embeddings: `token[id] + position[i] + segment[seg]`.
pub fn lexicon_encode(
    tape: &mut Tape,
    config: &EncoderConfig,
    bound: &BoundEncoder,
    input: &EncoderInput<'_>,
) -> Result<Var> {
    if input.seq_len > config.max_position {
        return Err(Error::Length {
            len: input.seq_len,
            max: config.max_position,
        });
    }
    let positions: Vec<usize> = (0..input.batch).flat_map(|_| 0..input.seq_len).collect();
    let tokens = tape.gather(bound.var(TOKEN_EMBEDDINGS), input.token_ids)?;
    let pos = tape.gather(bound.var(POSITION_EMBEDDINGS), &positions)?;
    let seg = tape.gather(bound.var(SEGMENT_EMBEDDINGS), input.segment_ids)?;
    let sum = tape.add(tokens, pos)?;
    tape.add(sum, seg)
}

fn linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Scaled dot-product attention per head and per sequence over `x: [B·n×H]`;
/// masked keys get zero weight. Returns the output projection `[B·n×H]`.
#[allow(clippy::too_many_arguments)]
fn attention(
    tape: &mut Tape,
    config: &EncoderConfig,
    bound: &BoundEncoder,
    names: &LayerNames,
    x: Var,
    mask: &[bool],
    batch: usize,
    seq_len: usize,
    mut probe: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let d = config.head_dim();
    let scale = 1.0 / (d as f64).sqrt();
    let q = linear(
        tape,
        x,
        bound.var(&names.query_w),
        bound.var(&names.query_b),
    )?;
    let k = linear(tape, x, bound.var(&names.key_w), bound.var(&names.key_b))?;
    let v = linear(
        tape,
        x,
        bound.var(&names.value_w),
        bound.var(&names.value_b),
    )?;

    let mut sequences = Vec::with_capacity(batch);
    for b in 0..batch {
        let key_mask = &mask[b * seq_len..(b + 1) * seq_len];
        if !key_mask.iter().any(|&m| m) {
            return Err(Error::EmptyAttention);
        }
        let (qb, kb, vb) = if batch == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_rows(q, b * seq_len, seq_len)?,
                tape.slice_rows(k, b * seq_len, seq_len)?,
                tape.slice_rows(v, b * seq_len, seq_len)?,
            )
        };
        let mut heads = Vec::with_capacity(config.num_heads);
        for h in 0..config.num_heads {
            let (qh, kh, vh) = if config.num_heads == 1 {
                (qb, kb, vb)
            } else {
                (
                    tape.slice_cols(qb, h * d, d)?,
                    tape.slice_cols(kb, h * d, d)?,
                    tape.slice_cols(vb, h * d, d)?,
                )
            };
            let scores = tape.matmul_transposed(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let weights = tape.masked_softmax(scores, key_mask)?;
            if let Some(p) = probe.as_deref_mut() {
                p.push(weights);
            }
            heads.push(tape.matmul(weights, vh)?);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        sequences.push(joined);
    }
    let context = if sequences.len() == 1 {
        sequences[0]
    } else {
        tape.concat_rows(&sequences)?
    };
    linear(
        tape,
        context,
        bound.var(&names.output_w),
        bound.var(&names.output_b),
    )
}

/// Full encoder over a batch; `[B·n×H]`. Dropout applies only when an RNG
/// is supplied and the configured rate is nonzero.
pub fn encoder_forward(
    tape: &mut Tape,
    config: &EncoderConfig,
    bound: &BoundEncoder,
    input: &EncoderInput<'_>,
    mut dropout: Option<&mut dyn RngCore>,
) -> Result<Var> {
    let rate = config.dropout_rate;
    let mut drop = |tape: &mut Tape, x: Var| -> Result<Var> {
        match dropout.as_deref_mut() {
            Some(rng) if rate > 0.0 => tape.dropout(x, rate, rng),
            _ => Ok(x),
        }
    };
    let mut x = lexicon_encode(tape, config, bound, input)?;
    x = drop(tape, x)?;
    for l in 0..config.num_layers {
        let n = LayerNames::new(l);
        let a = attention(
            tape,
            config,
            bound,
            &n,
            x,
            &input.mask,
            input.batch,
            input.seq_len,
            None,
        )?;
        let a = drop(tape, a)?;
        let res = tape.add(x, a)?;
        x = tape.layer_norm(
            res,
            bound.var(&n.attn_gamma),
            bound.var(&n.attn_beta),
            LAYER_NORM_EPS,
        )?;

        let f = linear(tape, x, bound.var(&n.ffn_in_w), bound.var(&n.ffn_in_b))?;
        let f = tape.gelu(f)?;
        let f = linear(tape, f, bound.var(&n.ffn_out_w), bound.var(&n.ffn_out_b))?;
        let f = drop(tape, f)?;
        let res = tape.add(x, f)?;
        x = tape.layer_norm(
            res,
            bound.var(&n.ffn_gamma),
            bound.var(&n.ffn_beta),
            LAYER_NORM_EPS,
        )?;
    }
    Ok(x)
}
