//! A small pre-norm Vision Transformer.
//!
//! Token sequences are row-stacked: one token per row, `D` columns. A sample's
//! sequence is laid out as `[prompts, patches, cls]`; a batch stacks whole
//! sequences. Patch order is row-major over the patch grid.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{AttentionSpec, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViTConfig {
    /// Transformer layer count `N`.
    pub layers: usize,
    /// Embedding width `D`.
    pub embed_dim: usize,
    /// Attention heads `R`.
    pub heads: usize,
    pub mlp_dim: usize,
    pub patch_size: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Classes of the pretraining head.
    pub classes: usize,
    pub ln_eps: f64,
}

impl ViTConfig {
    /// N=4, D=64, R=4 on 32x32 images with 8-pixel patches.
    pub fn synth8() -> Self {
        Self {
            layers: 4,
            embed_dim: 64,
            heads: 4,
            mlp_dim: 128,
            patch_size: 8,
            image_size: 32,
            channels: 3,
            classes: 8,
            ln_eps: 1e-5,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Patch count `M`.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("layers", self.layers),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("mlp_dim", self.mlp_dim),
            ("patch_size", self.patch_size),
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("classes", self.classes),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.heads > 0 && self.embed_dim % self.heads != 0 {
            problems.push(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.patch_size > 0 && self.image_size % self.patch_size != 0 {
            problems.push(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !(self.ln_eps > 0.0) {
            problems.push("ln_eps must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

const LAYER_FIELDS: [&str; 16] = [
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w1", "b1",
    "w2", "b2",
];

impl LayerWeights {
    fn init(d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut proj = |rows: usize, cols: usize| {
            Tensor::from_fn(&[rows, cols], |_| rng::truncated_normal(rng, 0.02))
        };
        let (wq, wk, wv, wo) = (proj(d, d), proj(d, d), proj(d, d), proj(d, d));
        let (w1, w2) = (proj(d, hidden), proj(hidden, d));
        Self {
            ln1_g: Tensor::filled(&[d], 1.0),
            ln1_b: Tensor::zeros(&[d]),
            wq,
            bq: Tensor::zeros(&[d]),
            wk,
            bk: Tensor::zeros(&[d]),
            wv,
            bv: Tensor::zeros(&[d]),
            wo,
            bo: Tensor::zeros(&[d]),
            ln2_g: Tensor::filled(&[d], 1.0),
            ln2_b: Tensor::zeros(&[d]),
            w1,
            b1: Tensor::zeros(&[hidden]),
            w2,
            b2: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor; 16] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_g,
            &self.ln2_b,
            &self.w1,
            &self.b1,
            &self.w2,
            &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 16] {
        [
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_g,
            &mut self.ln2_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViTModel {
    pub config: ViTConfig,
    /// `patch_dim x D` projection.
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    /// `M x D` learnable positional encodings.
    pub pos: Tensor,
    /// `[CLS]` token.
    pub cls: Tensor,
    pub layers: Vec<LayerWeights>,
    /// Final LayerNorm applied to every output token before any scoring.
    pub norm_g: Tensor,
    pub norm_b: Tensor,
    /// `D x classes` pretraining head on the final `[CLS]` feature.
    pub head_w: Tensor,
    pub head_b: Tensor,
    pub frozen: bool,
}

impl ViTModel {
    pub fn init(config: &ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, Stream::Init);
        let d = config.embed_dim;
        let patch_w = Tensor::from_fn(&[config.patch_dim(), d], |_| {
            rng::truncated_normal(&mut rng, 0.02)
        });
        let pos = Tensor::from_fn(&[config.num_patches(), d], |_| rng::normal(&mut rng, 0.02));
        let cls = Tensor::from_fn(&[d], |_| rng::normal(&mut rng, 0.02));
        let layers = (0..config.layers)
            .map(|_| LayerWeights::init(d, config.mlp_dim, &mut rng))
            .collect();
        let head_w = Tensor::from_fn(&[d, config.classes], |_| {
            rng::truncated_normal(&mut rng, 0.02)
        });
        Ok(Self {
            config: config.clone(),
            patch_w,
            patch_b: Tensor::zeros(&[d]),
            pos,
            cls,
            layers,
            norm_g: Tensor::filled(&[d], 1.0),
            norm_b: Tensor::zeros(&[d]),
            head_w,
            head_b: Tensor::zeros(&[config.classes]),
            frozen: false,
        })
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Every weight tensor with a stable name, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("patch_w".to_string(), &self.patch_w),
            ("patch_b".to_string(), &self.patch_b),
            ("pos".to_string(), &self.pos),
            ("cls".to_string(), &self.cls),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(l.tensors()) {
                out.push((format!("layers.{i}.{name}"), t));
            }
        }
        out.push(("norm_g".to_string(), &self.norm_g));
        out.push(("norm_b".to_string(), &self.norm_b));
        out.push(("head_w".to_string(), &self.head_w));
        out.push(("head_b".to_string(), &self.head_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.pos,
            &mut self.cls,
        ];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.push(&mut self.norm_g);
        out.push(&mut self.norm_b);
        out.push(&mut self.head_w);
        out.push(&mut self.head_b);
        out
    }

    /// SHA-256 over the little-endian bytes of every weight, in checkpoint order.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for (_, t) in self.named_tensors() {
            h.update(t.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Registers the weights on a tape. A frozen model, or `trainable == false`,
    /// records constants so no gradient buffer can ever exist for them.
    pub fn attach(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let train = trainable && !self.frozen;
        let mut put = |t: &Tensor| tape.leaf(t.clone(), train);
        let patch_w = put(&self.patch_w);
        let patch_b = put(&self.patch_b);
        let pos = put(&self.pos);
        let cls = put(&self.cls);
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let [ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w1, b1, w2, b2] =
                    l.tensors().map(&mut put);
                LayerVars {
                    ln1_g,
                    ln1_b,
                    wq,
                    bq,
                    wk,
                    bk,
                    wv,
                    bv,
                    wo,
                    bo,
                    ln2_g,
                    ln2_b,
                    w1,
                    b1,
                    w2,
                    b2,
                }
            })
            .collect();
        let norm_g = put(&self.norm_g);
        let norm_b = put(&self.norm_b);
        let head_w = put(&self.head_w);
        let head_b = put(&self.head_b);
        ModelVars {
            patch_w,
            patch_b,
            pos,
            cls,
            layers,
            norm_g,
            norm_b,
            head_w,
            head_b,
            eps: self.config.ln_eps,
            heads: self.config.heads,
            patches: self.config.num_patches(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl LayerVars {
    fn all(&self) -> [Var; 16] {
        [
            self.ln1_g, self.ln1_b, self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo,
            self.bo, self.ln2_g, self.ln2_b, self.w1, self.b1, self.w2, self.b2,
        ]
    }
}

#[derive(Clone, Debug)]
pub struct ModelVars {
    pub patch_w: Var,
    pub patch_b: Var,
    pub pos: Var,
    pub cls: Var,
    pub layers: Vec<LayerVars>,
    pub norm_g: Var,
    pub norm_b: Var,
    pub head_w: Var,
    pub head_b: Var,
    eps: f64,
    heads: usize,
    patches: usize,
}

impl ModelVars {
    /// Vars in the same order as [`ViTModel::tensors_mut`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.patch_w, self.patch_b, self.pos, self.cls];
        for l in &self.layers {
            out.extend(l.all());
        }
        out.push(self.norm_g);
        out.push(self.norm_b);
        out.push(self.head_w);
        out.push(self.head_b);
        out
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn num_patches(&self) -> usize {
        self.patches
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    /// Final LayerNorm over row-stacked output tokens.
    pub fn final_norm(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        tape.layer_norm(x, self.norm_g, self.norm_b, self.eps)
    }
}

/// Flattened patches of a batch, `(batch * M) x patch_dim`, pixels scaled to `[0, 1]`.
pub fn patch_matrix(images: &[&Image], config: &ViTConfig) -> Result<Tensor> {
    let (m, pd) = (config.num_patches(), config.patch_dim());
    let mut data = Vec::with_capacity(images.len() * m * pd);
    for img in images {
        if img.width != config.image_size || img.height != config.image_size {
            return Err(Error::Shape {
                op: "patch_embed",
                lhs: vec![config.image_size, config.image_size],
                rhs: vec![img.height, img.width],
            });
        }
        for patch in crate::data::patchify(img, config.patch_size)? {
            data.extend(patch.iter().map(|&v| v as f64 / 255.0));
        }
    }
    Tensor::matrix(images.len() * m, pd, data)
}

/// `E_0`: projected patches plus positional encodings, `(batch * M) x D`.
pub fn embed_patches(tape: &mut Tape, mv: &ModelVars, patches: Var, batch: usize) -> Result<Var> {
    let proj = tape.matmul(patches, mv.patch_w)?;
    let proj = tape.add_bias(proj, mv.patch_b)?;
    let m = mv.patches;
    let pos = tape.gather_rows(mv.pos, (0..batch).flat_map(|_| 0..m).collect())?;
    tape.add(proj, pos)
}

/// A block of rows entering a sequence: either shared by every sample
/// (`rows` rows total) or per-sample (`batch * rows` rows).
#[derive(Clone, Copy, Debug)]
pub struct Block {
    pub var: Var,
    pub rows: usize,
    pub shared: bool,
}

/// Interleaves blocks into row-stacked per-sample sequences.
pub fn assemble(tape: &mut Tape, blocks: &[Block], batch: usize) -> Result<Var> {
    let vars: Vec<Var> = blocks.iter().map(|b| b.var).collect();
    let stacked = tape.concat_rows(&vars)?;
    let mut offsets = Vec::with_capacity(blocks.len());
    let mut acc = 0;
    for b in blocks {
        offsets.push(acc);
        acc += if b.shared { b.rows } else { b.rows * batch };
    }
    let mut index = Vec::new();
    for s in 0..batch {
        for (b, &off) in blocks.iter().zip(&offsets) {
            let start = if b.shared { off } else { off + s * b.rows };
            index.extend(start..start + b.rows);
        }
    }
    tape.gather_rows(stacked, index)
}

/// Splits row-stacked sequences back into per-block matrices.
pub fn split(tape: &mut Tape, x: Var, batch: usize, sizes: &[usize]) -> Result<Vec<Var>> {
    let seq: usize = sizes.iter().sum();
    let mut out = Vec::with_capacity(sizes.len());
    let mut start = 0;
    for &size in sizes {
        let index = (0..batch)
            .flat_map(|s| (s * seq + start)..(s * seq + start + size))
            .collect();
        out.push(tape.gather_rows(x, index)?);
        start += size;
    }
    Ok(out)
}

/// Outputs of one transformer layer, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct LayerTrace {
    pub input: Var,
    pub output: Var,
    pub q: Var,
    pub k: Var,
    pub attention: Var,
}

/// Pre-norm layer: `x + MSA(LN(x))`, then `+ MLP(LN(.))`.
pub fn layer_forward(
    tape: &mut Tape,
    lv: &LayerVars,
    x: Var,
    spec: AttentionSpec,
    eps: f64,
) -> Result<LayerTrace> {
    let h = tape.layer_norm(x, lv.ln1_g, lv.ln1_b, eps)?;
    let q = tape.matmul(h, lv.wq)?;
    let q = tape.add_bias(q, lv.bq)?;
    let k = tape.matmul(h, lv.wk)?;
    let k = tape.add_bias(k, lv.bk)?;
    let v = tape.matmul(h, lv.wv)?;
    let v = tape.add_bias(v, lv.bv)?;
    let attention = tape.attention(q, k, v, spec)?;
    let o = tape.matmul(attention, lv.wo)?;
    let o = tape.add_bias(o, lv.bo)?;
    let x1 = tape.add(x, o)?;
    let h2 = tape.layer_norm(x1, lv.ln2_g, lv.ln2_b, eps)?;
    let u = tape.matmul(h2, lv.w1)?;
    let u = tape.add_bias(u, lv.b1)?;
    let u = tape.gelu(u);
    let u = tape.matmul(u, lv.w2)?;
    let u = tape.add_bias(u, lv.b2)?;
    let output = tape.add(x1, u)?;
    Ok(LayerTrace {
        input: x,
        output,
        q,
        k,
        attention,
    })
}

/// Output of a plain (unprompted) forward pass.
#[derive(Clone, Debug)]
pub struct VitTrace {
    /// `batch x classes` pretraining-head logits.
    pub logits: Var,
    /// `batch x D` final `[CLS]` features `x_N`, after the final LayerNorm.
    pub cls: Var,
    /// `(batch * M) x D` final patch features `E_N`.
    pub patches: Var,
    pub layers: Vec<LayerTrace>,
}

/// Plain ViT over `[E, x]`.
pub fn vit_forward(
    tape: &mut Tape,
    mv: &ModelVars,
    patches: Var,
    batch: usize,
) -> Result<VitTrace> {
    let m = mv.patches;
    let mut e = embed_patches(tape, mv, patches, batch)?;
    let d = tape.value(mv.cls).len();
    let mut x = tape.reshape(mv.cls, &[1, d])?;
    let mut x_shared = true;
    let mut layers = Vec::with_capacity(mv.layers.len());
    for lv in &mv.layers {
        let seq = assemble(
            tape,
            &[
                Block {
                    var: e,
                    rows: m,
                    shared: false,
                },
                Block {
                    var: x,
                    rows: 1,
                    shared: x_shared,
                },
            ],
            batch,
        )?;
        let trace = layer_forward(
            tape,
            lv,
            seq,
            AttentionSpec::new(batch, m + 1, mv.heads),
            mv.eps,
        )?;
        let parts = split(tape, trace.output, batch, &[m, 1])?;
        e = parts[0];
        x = parts[1];
        x_shared = false;
        layers.push(trace);
    }
    if x_shared {
        x = tape.gather_rows(x, vec![0; batch])?;
    }
    let x = mv.final_norm(tape, x)?;
    let logits = tape.matmul(x, mv.head_w)?;
    let logits = tape.add_bias(logits, mv.head_b)?;
    Ok(VitTrace {
        logits,
        cls: x,
        patches: e,
        layers,
    })
}

/// Inference helper: pretraining-head logits and `[CLS]` features per image.
pub fn predict(model: &ViTModel, images: &[&Image]) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let mv = model.attach(&mut tape, false);
    let pm = tape.constant(patch_matrix(images, &model.config)?);
    let trace = vit_forward(&mut tape, &mv, pm, images.len())?;
    Ok((
        tape.value(trace.logits).clone(),
        tape.value(trace.cls).clone(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation_lists_every_problem() {
        let bad = ViTConfig {
            embed_dim: 10,
            heads: 4,
            image_size: 30,
            ..ViTConfig::synth8()
        };
        match bad.validate().unwrap_err() {
            Error::Config(p) => assert_eq!(p.len(), 2, "{p:?}"),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn synth8_geometry() {
        let c = ViTConfig::synth8();
        assert_eq!(c.num_patches(), 16);
        assert_eq!(c.head_dim(), 16);
        assert_eq!(c.patch_dim(), 192);
    }

    #[test]
    fn checksum_tracks_weights() {
        let mut m = ViTModel::init(&ViTConfig::synth8(), 1).unwrap();
        let before = m.checksum();
        assert_eq!(before, m.clone().checksum());
        m.layers[2].wq.data_mut()[7] += 1e-9;
        assert_ne!(before, m.checksum());
    }
}
