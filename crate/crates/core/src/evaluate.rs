//! Faithfulness and localization metrics plus the linear-probe reference.

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Image, Mask};
use crate::error::{Error, Result};
use crate::interpret::{upsample_nearest, AttentionStack, Scaling, TraitRanking};
use crate::prompt::{score_images, ForwardOptions, PromptSet, PromptVariant};
use crate::tensor::{softmax_in_place, Tape};
use crate::train::{train_linear_probe, LinearHead, TrainLog, TrainRecipe};
use crate::vit::{patch_matrix, vit_forward, ViTModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    PromptCamTopHeads,
    ClsAttention,
    Uniform,
}

/// Per-pixel importance scores, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub width: usize,
    pub height: usize,
    pub scores: Vec<f64>,
    pub provenance: Provenance,
}

impl SaliencyMap {
    pub fn uniform(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            scores: vec![1.0; width * height],
            provenance: Provenance::Uniform,
        }
    }

    /// Pixel indices by descending score, ties by row-major index.
    pub fn order(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]).then(a.cmp(&b)));
        idx
    }

    /// Patch indices by descending mean score, ties by patch index.
    pub fn patch_order(&self, patch_size: usize) -> Vec<usize> {
        let grid = self.width / patch_size;
        let mut sums = vec![0.0; grid * (self.height / patch_size)];
        for y in 0..self.height {
            for x in 0..self.width {
                sums[(y / patch_size) * grid + x / patch_size] += self.scores[y * self.width + x];
            }
        }
        let mut idx: Vec<usize> = (0..sums.len()).collect();
        idx.sort_by(|&a, &b| sums[b].total_cmp(&sums[a]).then(a.cmp(&b)));
        idx
    }
}

/// Mean of the `top_k` most important heads' maps, upsampled to pixels.
pub fn build_saliency(
    stack: &AttentionStack,
    ranking: &TraitRanking,
    top_k: usize,
    image_size: usize,
) -> Result<SaliencyMap> {
    if top_k == 0 {
        return Err(Error::contract("top_k must be positive"));
    }
    if top_k > stack.heads() {
        return Err(Error::contract(format!(
            "top_k {top_k} exceeds head count {}",
            stack.heads()
        )));
    }
    let heads: Vec<usize> = ranking.importance().into_iter().take(top_k).collect();
    Ok(mean_map_saliency(
        stack,
        &heads,
        image_size,
        Provenance::PromptCamTopHeads,
    ))
}

pub fn mean_map_saliency(
    stack: &AttentionStack,
    heads: &[usize],
    image_size: usize,
    provenance: Provenance,
) -> SaliencyMap {
    let m = stack.maps[0].len();
    let mut mean = vec![0.0; m];
    for &h in heads {
        for (acc, v) in mean.iter_mut().zip(&stack.maps[h]) {
            *acc += v / heads.len() as f64;
        }
    }
    let grid = (m as f64).sqrt().round() as usize;
    SaliencyMap {
        width: image_size,
        height: image_size,
        scores: upsample_nearest(&mean, grid, image_size),
        provenance,
    }
}

/// Class probabilities for a batch of images.
pub trait Classifier {
    fn probabilities(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>>;
}

pub struct PromptClassifier<'a> {
    pub model: &'a ViTModel,
    pub prompts: &'a PromptSet,
    pub variant: PromptVariant,
    pub options: ForwardOptions,
}

impl Classifier for PromptClassifier<'_> {
    fn probabilities(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let mut scores =
            score_images(self.model, self.prompts, self.variant, self.options, images)?;
        scores.iter_mut().for_each(|s| softmax_in_place(s));
        Ok(scores)
    }
}

/// Box blur with a `kernel x kernel` window clamped at the borders.
pub fn box_blur(image: &Image, kernel: usize) -> Image {
    let (w, h) = (image.width as isize, image.height as isize);
    let lo = (kernel as isize - 1) / 2;
    let hi = kernel as isize / 2;
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let mut acc = [0.0f64; 3];
            let mut n = 0.0;
            for yy in (y - lo).max(0)..=(y + hi).min(h - 1) {
                for xx in (x - lo).max(0)..=(x + hi).min(w - 1) {
                    let p = image.pixel(xx as usize, yy as usize);
                    for c in 0..3 {
                        acc[c] += p[c] as f64;
                    }
                    n += 1.0;
                }
            }
            out.set_pixel(x as usize, y as usize, acc.map(|v| (v / n).round() as u8));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessResult {
    pub insertion_auc: f64,
    pub deletion_auc: f64,
    /// `(fraction, probability)` samples, `steps + 1` each.
    pub insertion_curve: Vec<(f64, f64)>,
    pub deletion_curve: Vec<(f64, f64)>,
}

/// Trapezoid rule over `(x, y)` samples.
pub fn trapezoid(curve: &[(f64, f64)]) -> f64 {
    curve
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum()
}

fn copy_patch(dst: &mut Image, src: &Image, patch: usize, patch_size: usize) {
    let grid = dst.width / patch_size;
    let (ox, oy) = ((patch % grid) * patch_size, (patch / grid) * patch_size);
    for y in oy..oy + patch_size {
        for x in ox..ox + patch_size {
            dst.set_pixel(x, y, src.pixel(x, y));
        }
    }
}

/// Baseline images for the two curves.
#[derive(Clone, Debug)]
pub struct Baselines {
    /// Deletion fills removed patches from this image (dataset mean color).
    pub deletion: Image,
    /// Insertion starts from this image (blurred input).
    pub insertion: Image,
}

impl Baselines {
    pub fn for_image(image: &Image, mean_color: [u8; 3], patch_size: usize) -> Self {
        Self {
            deletion: Image::filled(image.width, image.height, mean_color),
            insertion: box_blur(image, patch_size),
        }
    }
}

/// Patch-aligned insertion and deletion curves for class `class`.
///
/// Step `k` of `steps` has manipulated the first `round(k * M / steps)`
/// patches of the saliency order.
pub fn insertion_deletion(
    image: &Image,
    saliency: &SaliencyMap,
    classifier: &dyn Classifier,
    class: usize,
    steps: usize,
    baselines: &Baselines,
    patch_size: usize,
) -> Result<FaithfulnessResult> {
    if steps == 0 {
        return Err(Error::contract("steps must be at least 1"));
    }
    let order = saliency.patch_order(patch_size);
    let m = order.len();
    let counts: Vec<usize> = (0..=steps)
        .map(|k| ((k * m) as f64 / steps as f64).round() as usize)
        .collect();
    let mut deleted = Vec::with_capacity(steps + 1);
    let mut inserted = Vec::with_capacity(steps + 1);
    let (mut del, mut ins) = (image.clone(), baselines.insertion.clone());
    let mut done = 0;
    for &count in &counts {
        for &p in &order[done..count] {
            copy_patch(&mut del, &baselines.deletion, p, patch_size);
            copy_patch(&mut ins, image, p, patch_size);
        }
        done = count;
        deleted.push(del.clone());
        inserted.push(ins.clone());
    }
    let all: Vec<&Image> = deleted.iter().chain(&inserted).collect();
    let probs = classifier.probabilities(&all)?;
    let curve = |offset: usize| -> Vec<(f64, f64)> {
        (0..=steps)
            .map(|k| (k as f64 / steps as f64, probs[offset + k][class]))
            .collect()
    };
    let (deletion_curve, insertion_curve) = (curve(0), curve(steps + 1));
    Ok(FaithfulnessResult {
        insertion_auc: trapezoid(&insertion_curve),
        deletion_auc: trapezoid(&deletion_curve),
        insertion_curve,
        deletion_curve,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointingResult {
    pub hit: bool,
    pub mass_in_mask: f64,
}

pub fn pointing_game(saliency: &SaliencyMap, mask: &Mask) -> Result<PointingResult> {
    if mask.width != saliency.width || mask.height != saliency.height {
        return Err(Error::Shape {
            op: "pointing_game",
            lhs: vec![saliency.height, saliency.width],
            rhs: vec![mask.height, mask.width],
        });
    }
    if mask.is_empty() {
        return Err(Error::contract("pointing game needs a non-empty mask"));
    }
    let total: f64 = saliency.scores.iter().sum();
    if !(total > 0.0) {
        return Err(Error::contract("saliency has no positive mass"));
    }
    let inside: f64 = saliency
        .scores
        .iter()
        .zip(&mask.data)
        .filter(|(_, &m)| m)
        .map(|(s, _)| s)
        .sum();
    let best = saliency.order()[0];
    Ok(PointingResult {
        hit: mask.data[best],
        mass_in_mask: inside / total,
    })
}

/// Final-layer `[CLS]` attention over patches per head, one stack per image.
/// `class` records the linear head's prediction.
pub fn cls_attention(
    model: &ViTModel,
    head: &LinearHead,
    images: &[&Image],
) -> Result<Vec<AttentionStack>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(64) {
        let mut tape = Tape::new();
        let mv = model.attach(&mut tape, false);
        let pm = tape.constant(patch_matrix(chunk, &model.config)?);
        let trace = vit_forward(&mut tape, &mv, pm, chunk.len())?;
        let logits = head.logits(tape.value(trace.cls))?;
        let last = trace.layers.last().expect("at least one layer");
        let (spec, probs) = tape
            .attention_probs(last.attention)
            .expect("attention node");
        let m = model.config.num_patches();
        for b in 0..chunk.len() {
            let mut raw = Vec::with_capacity(spec.heads);
            let mut maps = Vec::with_capacity(spec.heads);
            for r in 0..spec.heads {
                let base = spec.prob_offset(b, r, m);
                let row = probs[base..base + m].to_vec();
                let sum: f64 = row.iter().sum();
                maps.push(row.iter().map(|p| p / sum).collect());
                raw.push(row);
            }
            out.push(AttentionStack {
                class: crate::tensor::argmax(logits.row(b)),
                maps,
                raw,
                scaling: Scaling::ForwardConsistent,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub head: LinearHead,
    pub accuracy: f64,
    pub log: TrainLog,
    pub attention: Vec<AttentionStack>,
}

/// Linear head on frozen `[CLS]` features, with the matching attention maps
/// for the test split.
pub fn linear_probe_baseline(
    model: &ViTModel,
    dataset: &Dataset,
    recipe: &TrainRecipe,
) -> Result<LinearProbe> {
    let (head, log) = train_linear_probe(model, dataset, recipe)?;
    let images: Vec<&Image> = dataset.test.iter().map(|s| &s.image).collect();
    let attention = cls_attention(model, &head, &images)?;
    let correct = attention
        .iter()
        .zip(&dataset.test)
        .filter(|(a, s)| a.class == s.label)
        .count();
    Ok(LinearProbe {
        head,
        accuracy: correct as f64 / dataset.test.len().max(1) as f64,
        log,
        attention,
    })
}
