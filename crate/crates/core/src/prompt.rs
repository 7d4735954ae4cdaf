//! Class-specific prompts injected into a frozen ViT and scored by a shared vector.
//!
//! With class-specific prompts entering layer `i`:
//! - layers `1..i` receive class-agnostic prompts whose outputs are discarded;
//! - layer `i` receives the class-specific prompts `P`;
//! - layers after `i` receive the previous layer's prompt outputs `Z`.
//!
//! The score of class `c` is `s[c] = w . LN(z_N^c)`, with the backbone's
//! final LayerNorm.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::tensor::{argmax, AttentionSpec, PatchOverride, Tape, Tensor, Var};
use crate::vit::{
    assemble, embed_patches, layer_forward, patch_matrix, split, Block, LayerTrace, ModelVars,
    ViTConfig, ViTModel,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptVariant {
    Shallow,
    Deep,
    /// Class-specific prompts enter this 1-based layer.
    AtLayer(usize),
}

impl PromptVariant {
    /// 1-based layer receiving the class-specific prompts.
    pub fn injection_layer(self, layers: usize) -> Result<usize> {
        let i = match self {
            PromptVariant::Shallow => 1,
            PromptVariant::Deep => layers,
            PromptVariant::AtLayer(i) => i,
        };
        if i == 0 || i > layers {
            return Err(Error::contract(format!(
                "injection layer {i} outside 1..={layers}"
            )));
        }
        Ok(i)
    }

    /// Number of layers that receive class-agnostic prompts.
    pub fn agnostic_layers(self, layers: usize) -> Result<usize> {
        Ok(self.injection_layer(layers)? - 1)
    }
}

impl fmt::Display for PromptVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PromptVariant::Shallow => write!(f, "shallow"),
            PromptVariant::Deep => write!(f, "deep"),
            PromptVariant::AtLayer(i) => write!(f, "at-layer={i}"),
        }
    }
}

impl FromStr for PromptVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shallow" => Ok(Self::Shallow),
            "deep" => Ok(Self::Deep),
            _ => s
                .strip_prefix("at-layer=")
                .and_then(|i| i.parse().ok())
                .map(Self::AtLayer)
                .ok_or_else(|| {
                    Error::Config(vec![format!(
                        "unknown variant {s:?}; expected shallow, deep or at-layer=<i>"
                    )])
                }),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardOptions {
    /// Masks prompt-to-prompt attention in every prompted layer.
    pub prompt_isolation: bool,
    /// Hides the `[CLS]` key from prompt queries in every prompted layer.
    #[serde(default)]
    pub hide_cls: bool,
}

/// Learnable prompts and the shared scoring vector. Prompt matrices are
/// `C x D`, one row per class.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub class_specific: Tensor,
    pub class_agnostic: Vec<Tensor>,
    pub w: Tensor,
}

impl PromptSet {
    /// Prompts drawn from N(0, 0.02^2); `w` starts at zero so every initial
    /// score is zero and the initial loss is exactly `ln C`.
    pub fn init(
        config: &ViTConfig,
        classes: usize,
        variant: PromptVariant,
        seed: u64,
    ) -> Result<Self> {
        if classes == 0 {
            return Err(Error::contract("prompt set needs at least one class"));
        }
        let d = config.embed_dim;
        let agnostic = variant.agnostic_layers(config.layers)?;
        let mut rng = rng::stream(seed, Stream::PromptInit);
        let mut draw = || Tensor::from_fn(&[classes, d], |_| rng::normal(&mut rng, 0.02));
        let class_specific = draw();
        let class_agnostic = (0..agnostic).map(|_| draw()).collect();
        Ok(Self {
            class_specific,
            class_agnostic,
            w: Tensor::zeros(&[d]),
        })
    }

    pub fn classes(&self) -> usize {
        self.class_specific.shape()[0]
    }

    pub fn check(&self, config: &ViTConfig, variant: PromptVariant) -> Result<()> {
        let d = config.embed_dim;
        let c = self.classes();
        let want = variant.agnostic_layers(config.layers)?;
        let mut problems = Vec::new();
        if self.class_specific.shape() != [c, d] {
            problems.push(format!(
                "class_specific shape {:?}",
                self.class_specific.shape()
            ));
        }
        if self.class_agnostic.len() != want {
            problems.push(format!(
                "variant {variant} needs {want} class-agnostic layers, prompt set has {}",
                self.class_agnostic.len()
            ));
        }
        for (i, p) in self.class_agnostic.iter().enumerate() {
            if p.shape() != [c, d] {
                problems.push(format!("class_agnostic[{i}] shape {:?}", p.shape()));
            }
        }
        if self.w.shape() != [d] {
            problems.push(format!("w shape {:?}", self.w.shape()));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("class_specific".to_string(), &self.class_specific)];
        for (i, p) in self.class_agnostic.iter().enumerate() {
            out.push((format!("class_agnostic.{i}"), p));
        }
        out.push(("w".to_string(), &self.w));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.class_specific];
        out.extend(self.class_agnostic.iter_mut());
        out.push(&mut self.w);
        out
    }

    pub fn attach(&self, tape: &mut Tape, trainable: bool) -> PromptVars {
        PromptVars {
            class_specific: tape.leaf(self.class_specific.clone(), trainable),
            class_agnostic: self
                .class_agnostic
                .iter()
                .map(|p| tape.leaf(p.clone(), trainable))
                .collect(),
            w: tape.leaf(self.w.clone(), trainable),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PromptVars {
    pub class_specific: Var,
    pub class_agnostic: Vec<Var>,
    pub w: Var,
}

impl PromptVars {
    /// Vars in the same order as [`PromptSet::tensors_mut`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = vec![self.class_specific];
        out.extend(&self.class_agnostic);
        out.push(self.w);
        out
    }
}

/// Output of a prompted forward pass over a batch.
#[derive(Clone, Debug)]
pub struct PromptedTrace {
    /// `batch x C` class scores.
    pub scores: Var,
    /// `(batch * C) x D` final class-specific features `Z_N`, after the final LayerNorm.
    pub z: Var,
    pub layers: Vec<LayerTrace>,
    /// Attention layout of the final layer.
    pub final_spec: AttentionSpec,
    pub batch: usize,
    pub classes: usize,
    pub patches: usize,
}

impl PromptedTrace {
    pub fn final_layer(&self) -> &LayerTrace {
        self.layers.last().expect("at least one layer")
    }
}

/// Row offset of the first patch token within each sequence.
pub fn patch_offset(classes: usize) -> usize {
    classes
}

/// Uniform-attention overrides blurring `heads` of prompt `class`'s query in
/// sample `sample` of the final layer.
pub fn blur_overrides(
    sample: usize,
    class: usize,
    classes: usize,
    patches: usize,
    heads: &[usize],
) -> Vec<PatchOverride> {
    let start = patch_offset(classes);
    heads
        .iter()
        .map(|&head| PatchOverride {
            sample,
            query: class,
            head,
            keys: start..start + patches,
        })
        .collect()
}

/// Runs the prompted ViT on a batch of flattened patches.
#[allow(clippy::too_many_arguments)]
pub fn prompted_forward_vars(
    tape: &mut Tape,
    mv: &ModelVars,
    pv: &PromptVars,
    variant: PromptVariant,
    options: ForwardOptions,
    patches: Var,
    batch: usize,
    final_overrides: Vec<PatchOverride>,
) -> Result<PromptedTrace> {
    let n = mv.layers.len();
    let inject = variant.injection_layer(n)?;
    if pv.class_agnostic.len() != inject - 1 {
        return Err(Error::contract(format!(
            "variant {variant} needs {} class-agnostic layers, got {}",
            inject - 1,
            pv.class_agnostic.len()
        )));
    }
    let c = tape.value(pv.class_specific).shape()[0];
    let m = mv.num_patches();
    let d = tape.value(mv.cls).len();
    let mut e = embed_patches(tape, mv, patches, batch)?;
    let mut x = tape.reshape(mv.cls, &[1, d])?;
    let mut x_shared = true;
    let mut z: Option<Var> = None;
    let mut layers = Vec::with_capacity(n);
    let mut final_spec = AttentionSpec::new(batch, c + m + 1, mv.heads());
    let mut final_overrides = Some(final_overrides);
    for (idx, lv) in mv.layers.iter().enumerate() {
        let l = idx + 1;
        let prompt_block = if l < inject {
            Block {
                var: pv.class_agnostic[idx],
                rows: c,
                shared: true,
            }
        } else if l == inject {
            Block {
                var: pv.class_specific,
                rows: c,
                shared: true,
            }
        } else {
            Block {
                var: z.expect("prompt outputs from the injection layer"),
                rows: c,
                shared: false,
            }
        };
        let seq = assemble(
            tape,
            &[
                prompt_block,
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
        let mut spec = AttentionSpec::new(batch, c + m + 1, mv.heads());
        spec.prompts = c;
        spec.isolate_prompts = options.prompt_isolation;
        spec.hide_cls_from_prompts = options.hide_cls;
        if l == n {
            spec.overrides = final_overrides.take().unwrap_or_default();
            final_spec = spec.clone();
        }
        let trace = layer_forward(tape, lv, seq, spec, mv.eps())?;
        let parts = split(tape, trace.output, batch, &[c, m, 1])?;
        if l >= inject {
            z = Some(parts[0]);
        }
        e = parts[1];
        x = parts[2];
        x_shared = false;
        layers.push(trace);
    }
    let z = z.expect("class-specific prompts were injected");
    let z = mv.final_norm(tape, z)?;
    let scores = class_scores_vars(tape, z, pv.w, batch, c)?;
    Ok(PromptedTrace {
        scores,
        z,
        layers,
        final_spec,
        batch,
        classes: c,
        patches: m,
    })
}

/// `s[b, c] = w . z^{b,c}` for row-stacked `z` of shape `(batch * C) x D`.
pub fn class_scores_vars(
    tape: &mut Tape,
    z: Var,
    w: Var,
    batch: usize,
    classes: usize,
) -> Result<Var> {
    let d = tape.value(w).len();
    let wcol = tape.reshape(w, &[d, 1])?;
    let s = tape.matmul(z, wcol)?;
    tape.reshape(s, &[batch, classes])
}

/// Scores for one image's `Z_N` given as a `C x D` matrix (one row per class).
pub fn class_scores(z: &Tensor, w: &Tensor) -> Result<Tensor> {
    if z.shape().len() != 2 || z.cols() != w.len() {
        return Err(Error::Shape {
            op: "class_scores",
            lhs: z.shape().to_vec(),
            rhs: w.shape().to_vec(),
        });
    }
    let wcol = w.clone().reshape(&[w.len(), 1])?;
    z.matmul(&wcol)?.reshape(&[z.rows()])
}

/// Predicted label: argmax of the scores, ties to the lowest class index.
pub fn predict_label(scores: &[f64]) -> usize {
    argmax(scores)
}

/// Cross-entropy of class scores against labels, averaged over the batch.
pub fn prompt_cam_loss(tape: &mut Tape, scores: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy(scores, labels)
}

/// Scores and cached final-layer input for one batch.
#[derive(Clone, Debug)]
pub struct Inference {
    pub scores: Tensor,
    /// Row-stacked tokens entering the final layer.
    pub final_input: Tensor,
    pub final_q: Tensor,
    pub final_k: Tensor,
    /// Final-layer attention probabilities, `[batch][head][query][key]`.
    pub final_probs: Vec<f64>,
    pub final_spec: AttentionSpec,
    pub classes: usize,
    pub patches: usize,
    pub heads: usize,
}

impl Inference {
    pub fn sample_scores(&self, b: usize) -> &[f64] {
        self.scores.row(b)
    }

    pub fn predicted(&self, b: usize) -> usize {
        predict_label(self.sample_scores(b))
    }

    pub fn batch(&self) -> usize {
        self.final_spec.batch
    }

    /// The slice of this batch belonging to sample `b`, as a batch of one.
    pub fn sample(&self, b: usize) -> Result<Inference> {
        if b >= self.batch() {
            return Err(Error::contract(format!(
                "sample {b} outside batch of {}",
                self.batch()
            )));
        }
        let t = self.final_spec.seq;
        let rows = |x: &Tensor| -> Result<Tensor> {
            let d = x.cols();
            Tensor::matrix(t, d, x.data()[b * t * d..(b + 1) * t * d].to_vec())
        };
        let block = self.heads * t * t;
        let mut spec = self.final_spec.clone();
        spec.batch = 1;
        spec.overrides.clear();
        Ok(Inference {
            scores: Tensor::matrix(1, self.classes, self.scores.row(b).to_vec())?,
            final_input: rows(&self.final_input)?,
            final_q: rows(&self.final_q)?,
            final_k: rows(&self.final_k)?,
            final_probs: self.final_probs[b * block..(b + 1) * block].to_vec(),
            final_spec: spec,
            classes: self.classes,
            patches: self.patches,
            heads: self.heads,
        })
    }
}

/// Frozen-model inference over a batch of images.
pub fn prompted_inference(
    model: &ViTModel,
    prompts: &PromptSet,
    variant: PromptVariant,
    options: ForwardOptions,
    images: &[&Image],
) -> Result<Inference> {
    prompts.check(&model.config, variant)?;
    let mut tape = Tape::new();
    let mv = model.attach(&mut tape, false);
    let pv = prompts.attach(&mut tape, false);
    let pm = tape.constant(patch_matrix(images, &model.config)?);
    let trace = prompted_forward_vars(
        &mut tape,
        &mv,
        &pv,
        variant,
        options,
        pm,
        images.len(),
        vec![],
    )?;
    let last = *trace.final_layer();
    let (spec, probs) = tape
        .attention_probs(last.attention)
        .expect("final layer records attention");
    Ok(Inference {
        scores: tape.value(trace.scores).clone(),
        final_input: tape.value(last.input).clone(),
        final_q: tape.value(last.q).clone(),
        final_k: tape.value(last.k).clone(),
        final_probs: probs.to_vec(),
        final_spec: spec.clone(),
        classes: trace.classes,
        patches: trace.patches,
        heads: model.config.heads,
    })
}

/// Scores for many images, evaluated in fixed-size chunks.
pub fn score_images(
    model: &ViTModel,
    prompts: &PromptSet,
    variant: PromptVariant,
    options: ForwardOptions,
    images: &[&Image],
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let inf = prompted_inference(model, prompts, variant, options, chunk)?;
        out.extend((0..chunk.len()).map(|b| inf.sample_scores(b).to_vec()));
    }
    Ok(out)
}

/// Recomputes only the final layer from cached input tokens, with optional
/// uniform-attention overrides, and returns the `batch x C` scores.
pub fn rescore_final_layer(
    model: &ViTModel,
    prompts: &PromptSet,
    inference: &Inference,
    overrides: Vec<PatchOverride>,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let mv = model.attach(&mut tape, false);
    let w = tape.constant(prompts.w.clone());
    let input = tape.constant(inference.final_input.clone());
    let mut spec = inference.final_spec.clone();
    spec.overrides = overrides;
    let lv = mv.layers.last().expect("at least one layer");
    let trace = layer_forward(&mut tape, lv, input, spec, mv.eps())?;
    let (batch, c, m) = (
        inference.final_spec.batch,
        inference.classes,
        inference.patches,
    );
    let parts = split(&mut tape, trace.output, batch, &[c, m, 1])?;
    let z = mv.final_norm(&mut tape, parts[0])?;
    let scores = class_scores_vars(&mut tape, z, w, batch, c)?;
    Ok(tape.value(scores).clone())
}
