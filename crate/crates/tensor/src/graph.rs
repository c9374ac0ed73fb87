//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] is an append-only tape. Every op pushes a node holding its
//! forward value and whatever it needs for the backward rule, so node order is
//! already a topological order and [`Graph::backward`] is a single reverse sweep.

use crate::error::{shape_err, Result, TensorError};
use crate::ops::{axis_split, broadcast_shape, mm_acc, mm_at_acc, mm_bt_acc, Activation, IndexMap};
use crate::tensor::{Mask, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Abs(Var),
    Act(Var, Activation),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    RmsNorm {
        x: Var,
        gain: Var,
        xhat: Vec<f32>,
        rinv: Vec<f32>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
        weights: Vec<f32>,
    },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Transpose(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Adds an input tensor. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    // ---------------------------------------------------------------- ops

    /// Batched matrix product `[.., m, k] · [.., k, n]` with broadcast batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", "operands must be at least 2-D"));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("inner dims differ: {sa:?} · {sb:?}"),
            ));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb, "matmul")?;
        let nb: usize = batch.iter().product();
        let (mapa, mapb) = (IndexMap::new(&batch, ba), IndexMap::new(&batch, bb));
        let mut out = vec![0.0; nb * m * n];
        for bi in 0..nb {
            let ao = mapa.get(bi) * m * k;
            let bo = mapb.get(bi) * k * n;
            mm_acc(
                &ta.data()[ao..ao + m * k],
                &tb.data()[bo..bo + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = batch;
        shape.extend([m, n]);
        self.push(Tensor::from_parts(shape, out), Op::MatMul(a, b), &[a, b], "matmul")
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        let shape = broadcast_shape(ta.shape(), tb.shape(), name)?;
        let (ma, mb) = (IndexMap::new(&shape, ta.shape()), IndexMap::new(&shape, tb.shape()));
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let data = (0..n).map(|i| f(da[ma.get(i)], db[mb.get(i)])).collect();
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(t, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(t, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(t, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        let t = self.value(x).map(|v| v * c);
        self.push(t, Op::Scale(x, c), &[x], "scale")
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(f32::abs);
        self.push(t, Op::Abs(x), &[x], "abs")
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let t = self.value(x).map(|v| kind.apply(v));
        self.push(t, Op::Act(x, kind), &[x], "activation")
    }

    /// Softmax over the last axis. Masked entries are excluded from the
    /// normalization and come out exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Option<&Mask>) -> Result<Var> {
        let tx = self.value(x);
        if tx.ndim() == 0 {
            return Err(shape_err("softmax", "scalar input"));
        }
        if let Some(m) = mask {
            m.check_broadcast(tx.shape(), "softmax")?;
        }
        let c = tx.last_dim();
        let rows = tx.numel() / c.max(1);
        let mut out = vec![0.0f32; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * c..(r + 1) * c];
            let allowed = |j: usize| match mask {
                None => true,
                Some(m) => m.allowed()[(r * c + j) % m.allowed().len()],
            };
            let mut max = f32::NEG_INFINITY;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) && v > max {
                    max = v;
                }
            }
            if max == f32::NEG_INFINITY {
                return Err(TensorError::DegenerateRow { op: "softmax", row: r });
            }
            let orow = &mut out[r * c..(r + 1) * c];
            let mut sum = 0.0f32;
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (v - max).exp();
                    orow[j] = e;
                    sum += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(t, Op::Softmax(x), &[x], "softmax")
    }

    /// LayerNorm over the last axis followed by `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Contract("layer_norm eps must be positive".into()));
        }
        let tx = self.value(x);
        let c = tx.last_dim();
        if self.value(gain).shape() != [c] || self.value(bias).shape() != [c] {
            return Err(shape_err("layer_norm", "gain/bias must match the last dim"));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = tx.numel() / c;
        let mut xhat = vec![0.0f32; tx.numel()];
        let mut rstd = vec![0.0f32; rows];
        let mut out = vec![0.0f32; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f32>() / c as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / c as f32;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
            "layer_norm",
        )
    }

    /// RMSNorm over the last axis: `gain ⊙ x / sqrt(mean(x²) + eps)`.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f32) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Contract("rms_norm eps must be positive".into()));
        }
        let tx = self.value(x);
        let c = tx.last_dim();
        if self.value(gain).shape() != [c] {
            return Err(shape_err("rms_norm", "gain must match the last dim"));
        }
        let g = self.value(gain).data();
        let rows = tx.numel() / c;
        let mut xhat = vec![0.0f32; tx.numel()];
        let mut rinv = vec![0.0f32; rows];
        let mut out = vec![0.0f32; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * c..(r + 1) * c];
            let ms = row.iter().map(|v| v * v).sum::<f32>() / c as f32;
            let ri = 1.0 / (ms + eps).sqrt();
            rinv[r] = ri;
            for j in 0..c {
                let h = row[j] * ri;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j];
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(t, Op::RmsNorm { x, gain, xhat, rinv }, &[x, gain], "rms_norm")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| shape_err("concat", "no parts"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", format!("axis {axis} out of range")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().enumerate().any(|(d, &n)| d != axis && n != base[d]) {
                return Err(shape_err(
                    "concat",
                    format!("{s:?} incompatible with {base:?} on axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let blk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * blk..(o + 1) * blk]);
            }
        }
        let t = Tensor::from_parts(shape, out);
        self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
            "concat",
        )
    }

    /// Contiguous sub-range `start..start+len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(shape_err(
                "slice",
                format!("range {start}..{} out of bounds for {s:?} axis {axis}", start + len),
            ));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let t = Tensor::from_parts(shape, out);
        self.push(t, Op::Slice { x, axis, start }, &[x], "slice")
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, sizes: &[usize], axis: usize) -> Result<Vec<Var>> {
        let s = self.shape(x);
        if axis >= s.len() || sizes.iter().sum::<usize>() != s[axis] {
            return Err(shape_err(
                "split",
                format!("sizes {sizes:?} do not sum to axis {axis} of {s:?}"),
            ));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &n in sizes {
            out.push(self.slice(x, axis, start, n)?);
            start += n;
        }
        Ok(out)
    }

    /// Mean over `axis`, restricted to positions where `valid` is true.
    /// The axis is removed from the output shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize, valid: Option<&[bool]>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(shape_err("mean_axis", format!("axis {axis} out of range")));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        if let Some(v) = valid {
            if v.len() != n {
                return Err(shape_err("mean_axis", "mask length differs from axis length"));
            }
        }
        let is_valid = |j: usize| valid.is_none_or(|v| v[j]);
        let count = (0..n).filter(|&j| is_valid(j)).count();
        if count == 0 {
            return Err(TensorError::Degenerate {
                op: "mean_axis",
                msg: "no valid positions".into(),
            });
        }
        let weights: Vec<f32> = (0..n)
            .map(|j| if is_valid(j) { 1.0 / count as f32 } else { 0.0 })
            .collect();
        let src = self.value(x).data();
        let mut out = vec![0.0f32; outer * inner];
        for o in 0..outer {
            let orow = &mut out[o * inner..(o + 1) * inner];
            for j in (0..n).filter(|&j| is_valid(j)) {
                let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (acc, v) in orow.iter_mut().zip(row) {
                    *acc += v;
                }
            }
            for acc in orow.iter_mut() {
                *acc /= count as f32;
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let t = Tensor::from_parts(shape, out);
        self.push(t, Op::MeanAxis { x, axis, weights }, &[x], "mean_axis")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        self.push(t, Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        if tx.numel() == 0 {
            return Err(TensorError::Degenerate {
                op: "mean",
                msg: "empty tensor".into(),
            });
        }
        let t = Tensor::scalar(tx.sum() / tx.numel() as f32);
        self.push(t, Op::Mean(x), &[x], "mean")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        self.push(t, Op::Reshape(x), &[x], "reshape")
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let s = tx.shape();
        if s.len() < 2 {
            return Err(shape_err("transpose", "needs at least 2 dims"));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let nb = tx.numel() / (r * c).max(1);
        let mut out = vec![0.0f32; tx.numel()];
        for b in 0..nb {
            let src = &tx.data()[b * r * c..(b + 1) * r * c];
            let dst = &mut out[b * r * c..(b + 1) * r * c];
            for i in 0..r {
                for j in 0..c {
                    dst[j * r + i] = src[i * c + j];
                }
            }
        }
        let mut shape = s.to_vec();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        let t = Tensor::from_parts(shape, out);
        self.push(t, Op::Transpose(x), &[x], "transpose")
    }

    /// Rows `ids` of a `[V, d]` table, giving `[ids.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = tt.dims2()?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(shape_err(
                    "gather_rows",
                    format!("row {id} out of range for {v} rows"),
                ));
            }
            out.extend_from_slice(tt.row(id));
        }
        let t = Tensor::from_parts(vec![ids.len(), d], out);
        self.push(
            t,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
            "gather_rows",
        )
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)` for a
    /// `[L, V]` logit matrix. Rows with a `None` target are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let tl = self.value(logits);
        let (l, v) = tl.dims2()?;
        if targets.len() != l {
            return Err(shape_err("cross_entropy", "one target slot per row required"));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(TensorError::Degenerate {
                op: "cross_entropy",
                msg: "no target positions".into(),
            });
        }
        let mut probs = vec![0.0f32; l * v];
        let mut total = 0.0f64;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= v {
                return Err(shape_err("cross_entropy", format!("target {t} >= {v}")));
            }
            let row = tl.row(r);
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f32;
            for j in 0..v {
                let e = (row[j] - max).exp();
                probs[r * v + j] = e;
                sum += e;
            }
            for j in 0..v {
                probs[r * v + j] /= sum;
            }
            total += f64::from(max + sum.ln() - row[t]);
        }
        let t = Tensor::scalar((total / count as f64) as f32);
        self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
            "cross_entropy",
        )
    }

    // ----------------------------------------------------------- backward

    /// Back-propagates from a scalar `loss`. Leaf gradients accumulate across
    /// calls until [`Graph::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                leaf_grads.push((i, g));
            }
        }
        for (i, g) in leaf_grads {
            let node = &mut self.nodes[i];
            match &mut node.grad {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(&g) {
                        *a += b;
                    }
                }
                None => node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
            }
        }
        Ok(())
    }

    fn backprop_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (sa, sb) = (ta.shape(), tb.shape());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch = &out.shape()[..out.ndim() - 2];
                let nb: usize = batch.iter().product();
                let mapa = IndexMap::new(batch, &sa[..sa.len() - 2]);
                let mapb = IndexMap::new(batch, &sb[..sb.len() - 2]);
                if let Some(ga) = slot(grads, nodes, *a) {
                    for bi in 0..nb {
                        let ao = mapa.get(bi) * m * k;
                        let bo = mapb.get(bi) * k * n;
                        mm_bt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &tb.data()[bo..bo + k * n],
                            &mut ga[ao..ao + m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    for bi in 0..nb {
                        let ao = mapa.get(bi) * m * k;
                        let bo = mapb.get(bi) * k * n;
                        mm_at_acc(
                            &ta.data()[ao..ao + m * k],
                            &g[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bo..bo + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = slot(grads, nodes, *a) {
                    let map = IndexMap::new(out.shape(), nodes[a.0].value.shape());
                    for (i, gi) in g.iter().enumerate() {
                        ga[map.get(i)] += gi;
                    }
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    let map = IndexMap::new(out.shape(), nodes[b.0].value.shape());
                    for (i, gi) in g.iter().enumerate() {
                        gb[map.get(i)] += sign * gi;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let ma = IndexMap::new(out.shape(), ta.shape());
                let mb = IndexMap::new(out.shape(), tb.shape());
                if let Some(ga) = slot(grads, nodes, *a) {
                    for (i, gi) in g.iter().enumerate() {
                        ga[ma.get(i)] += gi * tb.data()[mb.get(i)];
                    }
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    for (i, gi) in g.iter().enumerate() {
                        gb[mb.get(i)] += gi * ta.data()[ma.get(i)];
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (acc, gi) in gx.iter_mut().zip(g) {
                        *acc += c * gi;
                    }
                }
            }
            Op::Abs(x) => {
                let tx = &nodes[x.0].value;
                if let Some(gx) = slot(grads, nodes, *x) {
                    for ((acc, gi), xi) in gx.iter_mut().zip(g).zip(tx.data()) {
                        let s = if *xi > 0.0 {
                            1.0
                        } else if *xi < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        *acc += s * gi;
                    }
                }
            }
            Op::Act(x, kind) => {
                let tx = &nodes[x.0].value;
                if let Some(gx) = slot(grads, nodes, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * kind.derivative(tx.data()[i], out.data()[i]);
                    }
                }
            }
            Op::Softmax(x) => {
                let c = out.last_dim();
                if let Some(gx) = slot(grads, nodes, *x) {
                    for r in 0..out.numel() / c {
                        let y = &out.data()[r * c..(r + 1) * c];
                        let gy = &g[r * c..(r + 1) * c];
                        let dot: f32 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[r * c + j] += y[j] * (gy[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let c = out.last_dim();
                let rows = out.numel() / c;
                let gw = nodes[gain.0].value.data();
                if let Some(gg) = slot(grads, nodes, *gain) {
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if let Some(gb) = slot(grads, nodes, *bias) {
                    for r in 0..rows {
                        for j in 0..c {
                            gb[j] += g[r * c + j];
                        }
                    }
                }
                if let Some(gx) = slot(grads, nodes, *x) {
                    for r in 0..rows {
                        let xh = &xhat[r * c..(r + 1) * c];
                        let gh: Vec<f32> = (0..c).map(|j| g[r * c + j] * gw[j]).collect();
                        let mean_gh = gh.iter().sum::<f32>() / c as f32;
                        let mean_ghx = gh.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>() / c as f32;
                        for j in 0..c {
                            gx[r * c + j] += rstd[r] * (gh[j] - mean_gh - xh[j] * mean_ghx);
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, xhat, rinv } => {
                let c = out.last_dim();
                let rows = out.numel() / c;
                let gw = nodes[gain.0].value.data();
                if let Some(gg) = slot(grads, nodes, *gain) {
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += g[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if let Some(gx) = slot(grads, nodes, *x) {
                    for r in 0..rows {
                        let xh = &xhat[r * c..(r + 1) * c];
                        let gh: Vec<f32> = (0..c).map(|j| g[r * c + j] * gw[j]).collect();
                        let mean_ghx = gh.iter().zip(xh).map(|(a, b)| a * b).sum::<f32>() / c as f32;
                        for j in 0..c {
                            gx[r * c + j] += rinv[r] * (gh[j] - xh[j] * mean_ghx);
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.shape()[*axis];
                    if let Some(gp) = slot(grads, nodes, *p) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            for (acc, v) in gp[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                *acc += v;
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = axis_split(out.shape(), *axis);
                let n = nodes[x.0].value.shape()[*axis];
                if let Some(gx) = slot(grads, nodes, *x) {
                    for o in 0..outer {
                        let base = o * n * inner + start * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (acc, v) in gx[base..base + len * inner].iter_mut().zip(src) {
                            *acc += v;
                        }
                    }
                }
            }
            Op::MeanAxis { x, axis, weights } => {
                let (outer, n, inner) = axis_split(nodes[x.0].value.shape(), *axis);
                if let Some(gx) = slot(grads, nodes, *x) {
                    for o in 0..outer {
                        for (j, w) in weights.iter().enumerate() {
                            if *w == 0.0 {
                                continue;
                            }
                            for i in 0..inner {
                                gx[(o * n + j) * inner + i] += w * g[o * inner + i];
                            }
                        }
                    }
                }
            }
            Op::Sum(x) | Op::Mean(x) => {
                let n = nodes[x.0].value.numel();
                let scale = if matches!(node.op, Op::Mean(_)) { 1.0 / n as f32 } else { 1.0 };
                if let Some(gx) = slot(grads, nodes, *x) {
                    for acc in gx.iter_mut() {
                        *acc += g[0] * scale;
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (acc, v) in gx.iter_mut().zip(g) {
                        *acc += v;
                    }
                }
            }
            Op::Transpose(x) => {
                let s = out.shape();
                // `out` is [.., c, r]; the input is [.., r, c].
                let (c, r) = (s[s.len() - 2], s[s.len() - 1]);
                let nb = out.numel() / (r * c).max(1);
                if let Some(gx) = slot(grads, nodes, *x) {
                    for b in 0..nb {
                        let off = b * r * c;
                        for i in 0..r {
                            for j in 0..c {
                                gx[off + i * c + j] += g[off + j * r + i];
                            }
                        }
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = out.last_dim();
                if let Some(gt) = slot(grads, nodes, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = nodes[logits.0].value.last_dim();
                let count = targets.iter().flatten().count() as f32;
                if let Some(gl) = slot(grads, nodes, *logits) {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        for j in 0..v {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * v + j] += g[0] * (probs[r * v + j] - onehot) / count;
                        }
                    }
                }
            }
        }
    }
}

/// Gradient buffer for `v`, created on first use; `None` when `v` needs no gradient.
fn slot<'a>(grads: &'a mut [Option<Vec<f32>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f32>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
}
