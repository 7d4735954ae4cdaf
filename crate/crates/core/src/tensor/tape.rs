use std::ops::Range;

use super::{gelu, gelu_grad, kernels, log_sum_exp, softmax_in_place, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Replaces one query's attention over a contiguous range of key positions
/// with the uniform distribution carrying the same total mass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchOverride {
    pub sample: usize,
    pub query: usize,
    pub head: usize,
    pub keys: Range<usize>,
}

/// Shape of a batched multi-head attention call over row-stacked sequences.
///
/// Each sample contributes `seq` consecutive rows. The first `prompts` rows
/// of every sample are prompt tokens; with `isolate_prompts` set, a prompt
/// query may not attend to any prompt key (itself included).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub prompts: usize,
    pub isolate_prompts: bool,
    /// Masks the final key of each sample (the `[CLS]` token) from prompt queries.
    pub hide_cls_from_prompts: bool,
    pub overrides: Vec<PatchOverride>,
}

impl AttentionSpec {
    pub fn new(batch: usize, seq: usize, heads: usize) -> Self {
        Self {
            batch,
            seq,
            heads,
            prompts: 0,
            isolate_prompts: false,
            hide_cls_from_prompts: false,
            overrides: Vec::new(),
        }
    }

    fn masked(&self, query: usize, key: usize) -> bool {
        query < self.prompts
            && ((self.isolate_prompts && key < self.prompts)
                || (self.hide_cls_from_prompts && key + 1 == self.seq))
    }

    /// Offset of the `(sample, head, query)` row in the saved probability buffer.
    pub fn prob_offset(&self, sample: usize, head: usize, query: usize) -> usize {
        ((sample * self.heads + head) * self.seq + query) * self.seq
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Sum(Var),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: AttentionSpec,
        probs: Vec<f64>,
        /// Pre-override probability rows, one per entry of `spec.overrides`.
        raw_rows: Vec<Vec<f64>>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of primitive applications. Node ids are assigned in
/// creation order, so every input precedes its output.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`]. Nodes that do not require
/// gradients never receive a buffer.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        self.get(v)
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.to_vec()).expect("grad shape"))
    }

    pub fn has(&self, v: Var) -> bool {
        self.get(v).is_some()
    }

    /// Number of nodes holding a gradient buffer.
    pub fn count(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Attention probabilities saved by an [`Tape::attention`] node, laid out
    /// as `[batch][head][query][key]`.
    pub fn attention_probs(&self, v: Var) -> Option<(&AttentionSpec, &[f64])> {
        match &self.nodes[v.0].op {
            Op::Attention { spec, probs, .. } => Some((spec, probs)),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("add", x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(shape_err("mul", x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Mul(a, b)))
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        if b.len() != x.cols() {
            return Err(shape_err("add_bias", x, b));
        }
        let mut value = x.clone();
        let n = b.len();
        for row in value.data_mut().chunks_mut(n) {
            for (r, bv) in row.iter_mut().zip(b.data()) {
                *r += bv;
            }
        }
        let rg = self.rg(&[a, bias]);
        Ok(self.push(value, rg, Op::AddBias(a, bias)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|v| *v *= factor);
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::Scale(a, factor))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        value.data_mut().iter_mut().for_each(|v| *v = gelu(*v));
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::Gelu(a))
    }

    /// Row-wise layer normalization followed by the affine `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::contract("layer_norm eps must be positive"));
        }
        let xv = self.value(x);
        let d = xv.cols();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != d || b.len() != d {
            return Err(shape_err("layer_norm", xv, g));
        }
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            rstd[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = g.data()[j] * h + b.data()[j];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let value = super::softmax(self.value(a));
        let rg = self.rg(&[a]);
        self.push(value, rg, Op::Softmax(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(total), rg, Op::Sum(a))
    }

    /// Output row `i` is row `index[i]` of `x`. Rows may repeat.
    pub fn gather_rows(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let rows = xv.len() / d;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "gather_rows index {bad} out of range for {rows} rows"
            )));
        }
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in &index {
            data.extend_from_slice(&xv.data()[i * d..(i + 1) * d]);
        }
        let value = Tensor::matrix(index.len(), d, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, rg, Op::GatherRows { x, index }))
    }

    /// Stacks the rows of every part; all parts share the last extent.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.value(parts[0]).cols();
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.cols() != d {
                return Err(shape_err("concat_rows", self.value(parts[0]), pv));
            }
            data.extend_from_slice(pv.data());
        }
        let rows = data.len() / d;
        let value = Tensor::matrix(rows, d, data)?;
        let rg = self.rg(parts);
        Ok(self.push(value, rg, Op::ConcatRows(parts.to_vec())))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, rg, Op::Reshape(a)))
    }

    /// Scaled dot-product multi-head attention over row-stacked sequences.
    ///
    /// `q`, `k`, `v` are `(batch * seq) x D` with head `r` owning columns
    /// `r * D/R .. (r + 1) * D/R`. Scores use the `1 / sqrt(D/R)` scale.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(shape_err("attention", qv, kv));
        }
        if spec.heads == 0 || d % spec.heads != 0 || qv.rows() != spec.batch * spec.seq {
            return Err(Error::Shape {
                op: "attention",
                lhs: qv.shape().to_vec(),
                rhs: vec![spec.batch, spec.seq, spec.heads],
            });
        }
        let (t, dh) = (spec.seq, d / spec.heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; spec.batch * spec.heads * t * t];
        let mut out = vec![0.0; qv.len()];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for b in 0..spec.batch {
            for r in 0..spec.heads {
                let col = r * dh;
                for i in 0..t {
                    let qi = &qd[(b * t + i) * d + col..][..dh];
                    let base = spec.prob_offset(b, r, i);
                    let row = &mut probs[base..base + t];
                    let mut max = f64::NEG_INFINITY;
                    for (j, p) in row.iter_mut().enumerate() {
                        if spec.masked(i, j) {
                            continue;
                        }
                        let kj = &kd[(b * t + j) * d + col..][..dh];
                        *p = kernels::dot(qi, kj) * scale;
                        max = max.max(*p);
                    }
                    let mut sum = 0.0;
                    for (j, p) in row.iter_mut().enumerate() {
                        if spec.masked(i, j) {
                            *p = 0.0;
                        } else {
                            *p = (*p - max).exp();
                            sum += *p;
                        }
                    }
                    row.iter_mut().for_each(|p| *p /= sum);
                }
            }
        }
        let mut raw_rows = Vec::with_capacity(spec.overrides.len());
        for o in &spec.overrides {
            if o.sample >= spec.batch || o.head >= spec.heads || o.query >= t || o.keys.end > t {
                return Err(Error::contract(format!(
                    "attention override out of range: {o:?}"
                )));
            }
            let base = spec.prob_offset(o.sample, o.head, o.query);
            raw_rows.push(probs[base..base + t].to_vec());
            let span = &mut probs[base + o.keys.start..base + o.keys.end];
            let mass: f64 = span.iter().sum();
            let share = mass / span.len() as f64;
            span.iter_mut().for_each(|p| *p = share);
        }
        for b in 0..spec.batch {
            for r in 0..spec.heads {
                let col = r * dh;
                for i in 0..t {
                    let base = spec.prob_offset(b, r, i);
                    let out_i = &mut out[(b * t + i) * d + col..][..dh];
                    for j in 0..t {
                        let p = probs[base + j];
                        if p == 0.0 {
                            continue;
                        }
                        let vj = &vd[(b * t + j) * d + col..][..dh];
                        for (o, x) in out_i.iter_mut().zip(vj) {
                            *o += p * x;
                        }
                    }
                }
            }
        }
        let value = Tensor::new(qv.shape().to_vec(), out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            value,
            rg,
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
                raw_rows,
            },
        ))
    }

    /// Mean softmax cross-entropy of `logits` (`batch x classes`) against labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let c = lv.cols();
        let rows = lv.len() / c;
        if labels.len() != rows {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::contract(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = &lv.data()[r * c..(r + 1) * c];
            loss += log_sum_exp(row) - row[y];
            softmax_in_place(&mut probs[r * c..(r + 1) * c]);
        }
        loss /= rows as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse-mode accumulation from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes[..=loss.0]
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]))
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if let Some(ga) = self.slot(grads, *a) {
                    kernels::matmul_nt_acc(g, bv.data(), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    kernels::matmul_tn_acc(av.data(), g, gb, m, k, n);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if let Some(gv) = self.slot(grads, *v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Scale(a, f) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += f * y);
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * gelu_grad(av[i]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*x).cols();
                let gam = self.value(*gamma).data();
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for gr in g.chunks(d) {
                        gb.iter_mut().zip(gr).for_each(|(x, y)| *x += y);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut dh = vec![0.0; d];
                    for (r, s) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dh[j] = gr[j] * gam[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = kernels::dot(&dh, hr) / d as f64;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += s * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let p = node.value.data();
                let c = node.value.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((pr, gr), out) in p.chunks(c).zip(g.chunks(c)).zip(ga.chunks_mut(c)) {
                        let inner = kernels::dot(pr, gr);
                        for j in 0..c {
                            out[j] += pr[j] * (gr[j] - inner);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::GatherRows { x, index } => {
                let d = node.value.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, &src) in index.iter().enumerate() {
                        let row = &g[i * d..(i + 1) * d];
                        gx[src * d..(src + 1) * d]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if let Some(gp) = self.slot(grads, *p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(a, b)| *a += b);
                    }
                    offset += n;
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
                raw_rows,
            } => self.attention_backward(*q, *k, *v, spec, probs, raw_rows, g, grads),
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.value(*logits).cols();
                let scale = g[0] / labels.len() as f64;
                if let Some(gl) = self.slot(grads, *logits) {
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { 1.0 } else { 0.0 };
                            gl[r * c + j] += scale * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[f64],
        raw_rows: &[Vec<f64>],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let (t, dh) = (spec.seq, d / spec.heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let need_v = self.requires_grad(v);
        let need_qk = self.requires_grad(q) || self.requires_grad(k);
        let mut gq = vec![0.0; if self.requires_grad(q) { qv.len() } else { 0 }];
        let mut gk = vec![0.0; if self.requires_grad(k) { kv.len() } else { 0 }];
        let mut gv = vec![0.0; if need_v { vv.len() } else { 0 }];
        let mut dp = vec![0.0; t];
        for b in 0..spec.batch {
            for r in 0..spec.heads {
                let col = r * dh;
                for i in 0..t {
                    let base = spec.prob_offset(b, r, i);
                    let mut p = &probs[base..base + t];
                    let go = &g[(b * t + i) * d + col..][..dh];
                    if need_v {
                        for j in 0..t {
                            if p[j] == 0.0 {
                                continue;
                            }
                            let dst = &mut gv[(b * t + j) * d + col..][..dh];
                            for (x, y) in dst.iter_mut().zip(go) {
                                *x += p[j] * y;
                            }
                        }
                    }
                    if !need_qk {
                        continue;
                    }
                    for j in 0..t {
                        dp[j] = if p[j] == 0.0 {
                            0.0
                        } else {
                            kernels::dot(go, &vv.data()[(b * t + j) * d + col..][..dh])
                        };
                    }
                    // An override averages the raw probabilities over its key
                    // range, so the raw gradient there is the range mean.
                    for (o, raw) in spec.overrides.iter().zip(raw_rows) {
                        if (o.sample, o.head, o.query) != (b, r, i) {
                            continue;
                        }
                        let span = &mut dp[o.keys.clone()];
                        let mean = span.iter().sum::<f64>() / span.len() as f64;
                        span.iter_mut().for_each(|x| *x = mean);
                        p = raw;
                    }
                    let inner = kernels::dot(p, &dp);
                    for j in 0..t {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - inner) * scale;
                        if !gq.is_empty() {
                            let kj = &kv.data()[(b * t + j) * d + col..][..dh];
                            let dst = &mut gq[(b * t + i) * d + col..][..dh];
                            for (x, y) in dst.iter_mut().zip(kj) {
                                *x += ds * y;
                            }
                        }
                        if !gk.is_empty() {
                            let qi = &qv.data()[(b * t + i) * d + col..][..dh];
                            let dst = &mut gk[(b * t + j) * d + col..][..dh];
                            for (x, y) in dst.iter_mut().zip(qi) {
                                *x += ds * y;
                            }
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(slot) = self.slot(grads, var) {
                slot.iter_mut().zip(&local).for_each(|(a, b)| *a += b);
            }
        }
    }
}
