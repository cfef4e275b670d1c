//! Eager reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation executes immediately and appends a node to the [`Tape`].
//! [`Tape::backward`] walks the nodes in reverse recording order exactly once,
//! hands back the gradients of every leaf that requires them, and clears the
//! recorded operations so the tape cannot be replayed.
//!
//! All reductions run sequentially in a fixed order, so forward values and
//! gradients are bitwise reproducible for identical inputs.

use std::collections::HashMap;

use rand::Rng;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// `sqrt(2 / pi)`, the scale inside the tanh GELU approximation.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient of the tanh GELU approximation.
pub const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    MatMulTransB {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Transpose {
        x: Var,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    ConcatCols {
        parts: Vec<Var>,
    },
    Softmax {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    /// Elementwise unary op with its derivative evaluated at the forward input.
    Map {
        x: Var,
        deriv: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore_index: usize,
        probs: Vec<f64>,
        count: usize,
    },
    Sum {
        x: Var,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of executed operations. Confined to one thread of execution.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Vec<f64>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(&var).map(Vec::as_slice)
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::Shape {
            op,
            left: other.to_vec(),
            right: vec![],
        }),
    }
}

fn check_finite(op: &str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(op.to_string()))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a leaf. Gradients are tracked when `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        let mut value = tensor;
        value.zero_grad();
        self.push(value, Op::Leaf, rg)
    }

    /// Records a copy of `tensor` as a leaf with the given gradient tracking.
    pub fn param(&mut self, tensor: &Tensor, trainable: bool) -> Var {
        let value = Tensor::new(tensor.shape().to_vec(), tensor.data().to_vec())
            .expect("tensor invariants hold");
        self.push(value, Op::Leaf, trainable)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_matrix("matmul", ta)?;
        let (k2, n) = require_matrix("matmul", tb)?;
        if k != k2 {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(ta.data(), tb.data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b }, rg))
    }

    /// `a · bᵀ` for `a: [M×K]`, `b: [N×K]`.
    pub fn matmul_transposed(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = require_matrix("matmul_transposed", ta)?;
        let (n, k2) = require_matrix("matmul_transposed", tb)?;
        if k != k2 {
            return Err(shape_err("matmul_transposed", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        kernels::gemm_nt(ta.data(), tb.data(), m, k, n, &mut out);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMulTransB { a, b }, rg))
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op_name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds a length-N vector to every row of `x: [..×N]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.shape() != [tx.cols()] {
            return Err(shape_err("add_bias", tx, tb));
        }
        let n = tx.cols();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddBias { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Scale { x, factor }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = require_matrix("transpose", tx)?;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = tx.data()[i * c + j];
            }
        }
        let value = Tensor::new(vec![c, r], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Transpose { x }, rg))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, cols) = require_matrix("gather", tt)?;
        if ids.is_empty() {
            return Err(Error::contract("gather with no ids"));
        }
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Index {
                    what: "embedding table".into(),
                    index: id,
                    size: rows,
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let value = Tensor::new(vec![ids.len(), cols], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = require_matrix("slice_rows", tx)?;
        if len == 0 || start + len > r {
            return Err(Error::Index {
                what: "row slice".into(),
                index: start + len,
                size: r,
            });
        }
        let data = tx.data()[start * c..(start + len) * c].to_vec();
        let value = Tensor::new(vec![len, c], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (r, c) = require_matrix("slice_cols", tx)?;
        if len == 0 || start + len > c {
            return Err(Error::Index {
                what: "column slice".into(),
                index: start + len,
                size: c,
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&tx.data()[i * c + start..i * c + start + len]);
        }
        let value = Tensor::new(vec![r, len], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let (_, c) = require_matrix("concat_rows", self.value(*first))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            let (r, pc) = require_matrix("concat_rows", tp)?;
            if pc != c {
                return Err(shape_err("concat_rows", self.value(*first), tp));
            }
            data.extend_from_slice(tp.data());
            rows += r;
        }
        let value = Tensor::new(vec![rows, c], data)?;
        let rg = self.rg(parts);
        Ok(self.push(
            value,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let (r, _) = require_matrix("concat_cols", self.value(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let tp = self.value(p);
            let (pr, pc) = require_matrix("concat_cols", tp)?;
            if pr != r {
                return Err(shape_err("concat_cols", self.value(*first), tp));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(vec![r, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(
            value,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_inner(x, None)
    }

    /// Softmax over the last axis where keys with `key_mask[j] == false` are
    /// treated as scoring negative infinity: they receive exactly zero weight.
    pub fn masked_softmax(&mut self, x: Var, key_mask: &[bool]) -> Result<Var> {
        self.softmax_inner(x, Some(key_mask))
    }

    fn softmax_inner(&mut self, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let tx = self.value(x);
        let k = tx.cols();
        if let Some(mask) = key_mask {
            if mask.len() != k {
                return Err(Error::Shape {
                    op: "masked_softmax",
                    left: tx.shape().to_vec(),
                    right: vec![mask.len()],
                });
            }
            if !mask.iter().any(|&m| m) {
                return Err(Error::EmptyAttention);
            }
        }
        let keep = |j: usize| key_mask.is_none_or(|m| m[j]);
        let mut data = vec![0.0; tx.numel()];
        for (row_in, row_out) in tx.data().chunks(k).zip(data.chunks_mut(k)) {
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row_in.iter().enumerate() {
                if keep(j) {
                    if !v.is_finite() {
                        return Err(Error::Numeric("softmax".into()));
                    }
                    max = max.max(v);
                }
            }
            let mut total = 0.0;
            for (j, (&v, o)) in row_in.iter().zip(row_out.iter_mut()).enumerate() {
                if keep(j) {
                    *o = (v - max).exp();
                    total += *o;
                }
            }
            for o in row_out.iter_mut() {
                *o /= total;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax { x }, rg))
    }

    /// Normalizes each last-axis slice to zero mean and unit variance, then
    /// applies `gamma * x̂ + beta`. Variance is the biased (population) one.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps.is_nan() || eps <= 0.0 {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let h = tx.cols();
        if tg.shape() != [h] {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.shape() != [h] {
            return Err(shape_err("layer_norm", tx, tb));
        }
        check_finite("layer_norm", tx.data())?;
        let rows = tx.rows();
        let mut normalized = vec![0.0; tx.numel()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / h as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / h as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..h {
                let n = (row[j] - mean) * is;
                normalized[r * h + j] = n;
                out[r * h + j] = tg.data()[j] * n + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            rg,
        ))
    }

    /// Elementwise `f` with caller-supplied derivative `df`.
    pub fn map(&mut self, x: Var, f: impl Fn(f64) -> f64, df: impl Fn(f64) -> f64) -> Result<Var> {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| f(v)).collect();
        let deriv = tx.data().iter().map(|&v| df(v)).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Map { x, deriv }, rg))
    }

    /// Tanh-approximated GELU:
    /// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map(x, gelu, gelu_derivative)
    }

    /// Inverted dropout. A zero rate records nothing and returns `x`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::contract(format!(
                "dropout rate {rate} not in [0, 1)"
            )));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Map { x, deriv: mask }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(total), Op::Sum { x }, rg))
    }

    /// Mean negative log-softmax probability of each row's target over the
    /// rows whose target is not `ignore_index`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_index: usize,
    ) -> Result<Var> {
        let tl = self.value(logits);
        let (t, k) = require_matrix("cross_entropy", tl)?;
        if targets.len() != t {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![targets.len()],
            });
        }
        let mut probs = vec![0.0; t * k];
        let mut total = 0.0;
        let mut count = 0;
        for (r, &target) in targets.iter().enumerate() {
            if target == ignore_index {
                continue;
            }
            if target >= k {
                return Err(Error::Index {
                    what: "cross_entropy target".into(),
                    index: target,
                    size: k,
                });
            }
            let row = tl.row(r);
            check_finite("cross_entropy", row)?;
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                probs[r * k + j] = e;
                z += e;
            }
            for p in &mut probs[r * k..(r + 1) * k] {
                *p /= z;
            }
            total += max + z.ln() - row[target];
            count += 1;
        }
        if count == 0 {
            return Err(Error::contract("all positions ignored"));
        }
        let value = Tensor::scalar(total / count as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_index,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Propagates d(loss)/d(node) to every recorded node in reverse order and
    /// returns the gradients of the leaves that require them. The recorded
    /// operations are discarded afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::contract(
                "backward called on a cleared tape; run a new forward pass first",
            ));
        }
        if self.nodes.is_empty() || loss.0 >= self.nodes.len() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }

        let mut out = Gradients::default();
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                if let Some(g) = grads[i].take() {
                    check_finite("backward", &g)?;
                    out.grads.insert(Var(i), g);
                }
            }
            node.op = Op::Leaf;
        }
        self.consumed = true;
        Ok(out)
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        // Add into an input's buffer, allocating on first touch and skipping
        // inputs that do not need gradients.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(buf);
        };
        let val = |v: Var| &nodes[v.0].value;

        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[1];
                acc(*a, &mut |da| {
                    kernels::gemm_nt(g, val(*b).data(), m, n, k, da)
                });
                acc(*b, &mut |db| {
                    kernels::gemm_tn(val(*a).data(), g, m, k, n, db)
                });
            }
            Op::MatMulTransB { a, b } => {
                let (m, k) = (val(*a).shape()[0], val(*a).shape()[1]);
                let n = val(*b).shape()[0];
                acc(*a, &mut |da| {
                    kernels::gemm_nn(g, val(*b).data(), m, n, k, da)
                });
                acc(*b, &mut |db| {
                    kernels::gemm_tn(g, val(*a).data(), m, n, k, db)
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub { a, b } => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| {
                    for (x, y) in d.iter_mut().zip(g) {
                        *x -= y;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * tb[j];
                    }
                });
                acc(*b, &mut |d| {
                    for j in 0..d.len() {
                        d[j] += g[j] * ta[j];
                    }
                });
            }
            Op::AddBias { x, bias } => {
                acc(*x, &mut |d| add_into(d, g));
                acc(*bias, &mut |d| {
                    let n = d.len();
                    for row in g.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::Scale { x, factor } => acc(*x, &mut |d| {
                for (x, y) in d.iter_mut().zip(g) {
                    *x += factor * y;
                }
            }),
            Op::Transpose { x } => {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                acc(*x, &mut |d| {
                    for i in 0..r {
                        for j in 0..c {
                            d[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Gather { table, ids } => {
                let c = val(*table).cols();
                acc(*table, &mut |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut d[id * c..(id + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::SliceRows { x, start } => {
                let c = val(*x).cols();
                acc(*x, &mut |d| {
                    add_into(&mut d[start * c..start * c + g.len()], g)
                });
            }
            Op::SliceCols { x, start } => {
                let c = val(*x).cols();
                let w = node.value.cols();
                acc(*x, &mut |d| {
                    for (r, row) in g.chunks(w).enumerate() {
                        add_into(&mut d[r * c + start..r * c + start + w], row);
                    }
                });
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).numel();
                    acc(p, &mut |d| add_into(d, &g[offset..offset + n]));
                    offset += n;
                }
            }
            Op::ConcatCols { parts } => {
                let total = node.value.cols();
                let mut col = 0;
                for &p in parts {
                    let w = val(p).cols();
                    acc(p, &mut |d| {
                        for (r, row) in d.chunks_mut(w).enumerate() {
                            add_into(row, &g[r * total + col..r * total + col + w]);
                        }
                    });
                    col += w;
                }
            }
            Op::Softmax { x } => {
                let y = node.value.data();
                let k = node.value.cols();
                acc(*x, &mut |d| {
                    for ((drow, yrow), grow) in d.chunks_mut(k).zip(y.chunks(k)).zip(g.chunks(k)) {
                        let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                        for j in 0..k {
                            drow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let tg = val(*gamma).data();
                let h = tg.len();
                acc(*x, &mut |d| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &g[r * h..(r + 1) * h];
                        let nr = &normalized[r * h..(r + 1) * h];
                        let mut mean_dn = 0.0;
                        let mut mean_dn_n = 0.0;
                        for j in 0..h {
                            let dn = gr[j] * tg[j];
                            mean_dn += dn;
                            mean_dn_n += dn * nr[j];
                        }
                        mean_dn /= h as f64;
                        mean_dn_n /= h as f64;
                        for j in 0..h {
                            let dn = gr[j] * tg[j];
                            d[r * h + j] += is * (dn - mean_dn - nr[j] * mean_dn_n);
                        }
                    }
                });
                acc(*gamma, &mut |d| {
                    for (grow, nrow) in g.chunks(h).zip(normalized.chunks(h)) {
                        for j in 0..h {
                            d[j] += grow[j] * nrow[j];
                        }
                    }
                });
                acc(*beta, &mut |d| {
                    for grow in g.chunks(h) {
                        add_into(d, grow);
                    }
                });
            }
            Op::Map { x, deriv } => acc(*x, &mut |d| {
                for j in 0..d.len() {
                    d[j] += g[j] * deriv[j];
                }
            }),
            Op::CrossEntropy {
                logits,
                targets,
                ignore_index,
                probs,
                count,
            } => {
                let k = val(*logits).cols();
                let scale = g[0] / *count as f64;
                acc(*logits, &mut |d| {
                    for (r, &t) in targets.iter().enumerate() {
                        if t == *ignore_index {
                            continue;
                        }
                        for j in 0..k {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            d[r * k + j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                });
            }
            Op::Sum { x } => acc(*x, &mut |d| {
                for v in d.iter_mut() {
                    *v += g[0];
                }
            }),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn gelu(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub fn gelu_derivative(x: f64) -> f64 {
    let inner = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}
