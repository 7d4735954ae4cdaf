//! Reading trained prompts: per-head attention maps, greedy head blurring,
//! misclassification reports, counterfactual edits and heatmaps.

use serde::{Deserialize, Serialize};

use crate::data::{erase_to_background, GrayImage, Image, Mask, SynthManifest};
use crate::error::{Error, Result};
use crate::prompt::{
    blur_overrides, patch_offset, predict_label, rescore_final_layer, Inference, PromptSet,
};
use crate::tensor::{kernels, softmax_in_place};
use crate::vit::ViTModel;

/// Divisor applied to `q . k` before the patch softmax.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scaling {
    /// `sqrt(D')`, exactly what the forward pass uses.
    #[default]
    ForwardConsistent,
    /// `D'`, for display comparison only.
    PaperLiteral,
}

impl Scaling {
    pub fn divisor(self, head_dim: usize) -> f64 {
        match self {
            Scaling::ForwardConsistent => (head_dim as f64).sqrt(),
            Scaling::PaperLiteral => head_dim as f64,
        }
    }
}

/// Final-layer attention of one prompt query over the patch keys, per head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionStack {
    pub class: usize,
    /// `maps[r]`: softmax over patch keys only; sums to one.
    pub maps: Vec<Vec<f64>>,
    /// `raw[r]`: the forward pass's probabilities sliced to the patch keys.
    pub raw: Vec<Vec<f64>>,
    pub scaling: Scaling,
}

impl AttentionStack {
    pub fn heads(&self) -> usize {
        self.maps.len()
    }
}

/// Patch-restricted softmax of one query row against `keys` (`M x D`),
/// split into `heads` column groups.
pub fn patch_attention(query: &[f64], keys: &[f64], heads: usize, divisor: f64) -> Vec<Vec<f64>> {
    let d = query.len();
    let dh = d / heads;
    let m = keys.len() / d;
    (0..heads)
        .map(|r| {
            let q = &query[r * dh..(r + 1) * dh];
            let mut logits: Vec<f64> = (0..m)
                .map(|j| kernels::dot(q, &keys[j * d + r * dh..j * d + (r + 1) * dh]) / divisor)
                .collect();
            softmax_in_place(&mut logits);
            logits
        })
        .collect()
}

/// Attention maps of prompt `class` for the first sample of `inference`.
pub fn extract_class_attention(
    inference: &Inference,
    class: usize,
    scaling: Scaling,
) -> Result<AttentionStack> {
    extract_for_sample(inference, 0, class, scaling)
}

pub fn extract_for_sample(
    inference: &Inference,
    sample: usize,
    class: usize,
    scaling: Scaling,
) -> Result<AttentionStack> {
    let (c, m, heads) = (inference.classes, inference.patches, inference.heads);
    if class >= c {
        return Err(Error::contract(format!("class {class} outside 0..{c}")));
    }
    if sample >= inference.batch() {
        return Err(Error::contract(format!("sample {sample} outside batch")));
    }
    let t = inference.final_spec.seq;
    let d = inference.final_q.cols();
    let start = patch_offset(c);
    let row = sample * t;
    let query = inference.final_q.row(row + class);
    let keys = &inference.final_k.data()[(row + start) * d..(row + start + m) * d];
    let maps = patch_attention(query, keys, heads, scaling.divisor(d / heads));
    let raw = (0..heads)
        .map(|r| {
            let base = inference.final_spec.prob_offset(sample, r, class);
            inference.final_probs[base + start..base + start + m].to_vec()
        })
        .collect();
    Ok(AttentionStack {
        class,
        maps,
        raw,
        scaling,
    })
}

/// Maps queried by another class's prompt; identical machinery.
pub fn cross_class_attention(
    inference: &Inference,
    other: usize,
    scaling: Scaling,
) -> Result<AttentionStack> {
    extract_class_attention(inference, other, scaling)
}

/// One greedy round: the blurred set before it and every candidate's score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GreedyStep {
    pub blurred: Vec<usize>,
    /// `(head, s[c] with blurred + head)` for every unblurred head.
    pub candidates: Vec<(usize, f64)>,
    pub chosen: usize,
    /// Heads tied with `chosen` on the blurred score.
    pub ties: Vec<usize>,
    /// Whether blurring `chosen` flipped the prediction, ending the search.
    pub flipped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraitRanking {
    pub class: usize,
    /// Heads in removal order, least important first.
    pub blur_order: Vec<usize>,
    /// Heads whose individual blurring flips the prediction, ascending.
    pub surviving: Vec<usize>,
    /// Unblurred scores of every class.
    pub base_scores: Vec<f64>,
    pub steps: Vec<GreedyStep>,
}

impl TraitRanking {
    /// Every head from most to least important: survivors by ascending
    /// blurred score in the final round, then the blur order reversed.
    pub fn importance(&self) -> Vec<usize> {
        let mut out = Vec::new();
        if let Some(last) = self.steps.last().filter(|s| s.flipped) {
            let mut c = last.candidates.clone();
            c.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            out.extend(c.iter().map(|x| x.0));
        }
        out.extend(self.blur_order.iter().rev());
        out
    }

    /// The most important surviving head, if any head survived.
    pub fn top_surviving(&self) -> Option<usize> {
        if self.surviving.is_empty() {
            None
        } else {
            self.importance().first().copied()
        }
    }
}

/// Scores of a single-sample inference with the given heads of `class` blurred.
pub fn blurred_scores(
    model: &ViTModel,
    prompts: &PromptSet,
    single: &Inference,
    class: usize,
    heads: &[usize],
) -> Result<Vec<f64>> {
    let overrides = blur_overrides(0, class, single.classes, single.patches, heads);
    Ok(rescore_final_layer(model, prompts, single, overrides)?
        .data()
        .to_vec())
}

/// Greedy removal of the least important heads of prompt `class` until the
/// next removal would change the prediction.
pub fn greedy_trait_ranking(
    model: &ViTModel,
    prompts: &PromptSet,
    single: &Inference,
    class: usize,
) -> Result<TraitRanking> {
    if single.batch() != 1 {
        return Err(Error::contract(
            "greedy ranking expects a single-sample inference",
        ));
    }
    if class >= single.classes {
        return Err(Error::contract(format!(
            "class {class} outside 0..{}",
            single.classes
        )));
    }
    let predicted = single.predicted(0);
    if predicted != class {
        return Err(Error::contract(format!(
            "image is classified as {predicted}, not {class}; use explain_misclassification"
        )));
    }
    let mut blurred: Vec<usize> = Vec::new();
    let mut steps = Vec::new();
    let mut flipped = false;
    while blurred.len() < single.heads && !flipped {
        let mut candidates = Vec::new();
        let mut best: Option<(usize, f64, Vec<f64>)> = None;
        for head in (0..single.heads).filter(|h| !blurred.contains(h)) {
            let mut set = blurred.clone();
            set.push(head);
            let s = blurred_scores(model, prompts, single, class, &set)?;
            candidates.push((head, s[class]));
            if best.as_ref().is_none_or(|b| s[class] > b.1) {
                best = Some((head, s[class], s));
            }
        }
        let (chosen, score, scores) = best.expect("at least one candidate");
        let ties = candidates
            .iter()
            .filter(|&&(h, s)| h != chosen && s == score)
            .map(|x| x.0)
            .collect();
        flipped = predict_label(&scores) != class;
        steps.push(GreedyStep {
            blurred: blurred.clone(),
            candidates,
            chosen,
            ties,
            flipped,
        });
        if !flipped {
            blurred.push(chosen);
        }
    }
    let mut surviving: Vec<usize> = (0..single.heads).filter(|h| !blurred.contains(h)).collect();
    surviving.sort_unstable();
    Ok(TraitRanking {
        class,
        blur_order: blurred,
        surviving,
        base_scores: single.sample_scores(0).to_vec(),
        steps,
    })
}

/// Fraction of a patch map's mass inside the patches touched by `mask`,
/// weighting each patch by the share of its pixels in the mask.
pub fn mass_on_mask(map: &[f64], mask: &Mask, patch_size: usize) -> f64 {
    let grid = mask.width / patch_size;
    let area = (patch_size * patch_size) as f64;
    let mut cover = vec![0.0; map.len()];
    for y in 0..mask.height {
        for x in 0..mask.width {
            if mask.get(x, y) {
                cover[(y / patch_size) * grid + x / patch_size] += 1.0 / area;
            }
        }
    }
    map.iter().zip(&cover).map(|(a, b)| a * b).sum::<f64>() / map.iter().sum::<f64>()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMass {
    pub head: usize,
    pub mass_on_trait: Option<f64>,
    /// Position in the importance order, 1 = most important.
    pub rank: usize,
}

/// Per-image interpretation record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadReport {
    pub image_id: String,
    pub class: usize,
    pub per_head: Vec<HeadMass>,
    pub blur_order: Vec<usize>,
    pub surviving: Vec<usize>,
    pub scores: Vec<f64>,
}

pub fn head_report(
    image_id: &str,
    stack: &AttentionStack,
    ranking: &TraitRanking,
    trait_mask: Option<&Mask>,
    patch_size: usize,
) -> HeadReport {
    let importance = ranking.importance();
    let per_head = (0..stack.heads())
        .map(|head| HeadMass {
            head,
            mass_on_trait: trait_mask.map(|m| mass_on_mask(&stack.maps[head], m, patch_size)),
            rank: importance
                .iter()
                .position(|&h| h == head)
                .map_or(0, |p| p + 1),
        })
        .collect();
    HeadReport {
        image_id: image_id.to_string(),
        class: ranking.class,
        per_head,
        blur_order: ranking.blur_order.clone(),
        surviving: ranking.surviving.clone(),
        scores: ranking.base_scores.clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MisclassificationReport {
    pub image_id: String,
    pub true_class: usize,
    pub predicted: usize,
    /// `s[predicted] - s[true]`, positive by construction.
    pub score_gap: f64,
    pub true_stack: AttentionStack,
    pub predicted_stack: AttentionStack,
    pub true_mass_on_trait: Option<Vec<f64>>,
    pub predicted_mass_on_trait: Option<Vec<f64>>,
}

/// Attention of both the true and the predicted class prompts for a
/// misclassified image.
pub fn explain_misclassification(
    single: &Inference,
    image_id: &str,
    true_class: usize,
    trait_mask: Option<&Mask>,
    patch_size: usize,
    scaling: Scaling,
) -> Result<MisclassificationReport> {
    let predicted = single.predicted(0);
    if predicted == true_class {
        return Err(Error::contract(format!(
            "image {image_id} is classified correctly as {true_class}"
        )));
    }
    let true_stack = extract_class_attention(single, true_class, scaling)?;
    let predicted_stack = extract_class_attention(single, predicted, scaling)?;
    let masses = |s: &AttentionStack| {
        trait_mask.map(|m| {
            s.maps
                .iter()
                .map(|a| mass_on_mask(a, m, patch_size))
                .collect()
        })
    };
    let scores = single.sample_scores(0);
    Ok(MisclassificationReport {
        image_id: image_id.to_string(),
        true_class,
        predicted,
        score_gap: scores[predicted] - scores[true_class],
        true_mass_on_trait: masses(&true_stack),
        predicted_mass_on_trait: masses(&predicted_stack),
        true_stack,
        predicted_stack,
    })
}

pub enum Manipulation<'a> {
    /// Redraws masked pixels as generator background.
    EraseToBackground {
        manifest: &'a SynthManifest,
        seed: u64,
    },
    /// Copies masked pixels from a donor image of the same size.
    CopyFrom(&'a Image),
}

/// Edits the pixels under `mask`; the caller re-classifies the result.
pub fn manipulate_trait_region(
    image: &Image,
    mask: &Mask,
    mode: Manipulation<'_>,
) -> Result<Image> {
    if mask.width != image.width || mask.height != image.height {
        return Err(Error::Shape {
            op: "manipulate_trait_region",
            lhs: vec![image.height, image.width],
            rhs: vec![mask.height, mask.width],
        });
    }
    if mask.is_empty() {
        return Err(Error::contract("manipulation mask is empty"));
    }
    match mode {
        Manipulation::EraseToBackground { manifest, seed } => {
            Ok(erase_to_background(manifest, image, mask, seed))
        }
        Manipulation::CopyFrom(donor) => {
            if donor.width != image.width || donor.height != image.height {
                return Err(Error::contract("donor image size differs"));
            }
            let mut out = image.clone();
            for y in 0..image.height {
                for x in 0..image.width {
                    if mask.get(x, y) {
                        out.set_pixel(x, y, donor.pixel(x, y));
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Single-head, LayerNorm-free layer used to compare two scoring rules.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplifiedLayer {
    /// `M x D`, one value vector per patch.
    pub values: Vec<Vec<f64>>,
    /// `[CLS]` attention over patches.
    pub alpha_star: Vec<f64>,
    /// `C x M`, one prompt attention per class.
    pub alpha: Vec<Vec<f64>>,
    /// `C x D`, one classifier vector per class.
    pub w_fc: Vec<Vec<f64>>,
    pub w_shared: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreRule {
    Conventional,
    PromptCam,
}

fn is_probability(v: &[f64]) -> bool {
    v.iter().all(|&x| x >= 0.0) && (v.iter().sum::<f64>() - 1.0).abs() <= 1e-10
}

fn mix(values: &[Vec<f64>], alpha: &[f64]) -> Vec<f64> {
    let d = values.first().map_or(0, |v| v.len());
    let mut out = vec![0.0; d];
    for (a, v) in alpha.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(v) {
            *o += a * x;
        }
    }
    out
}

pub fn simplified_layer_scores(layer: &SimplifiedLayer, rule: ScoreRule) -> Result<Vec<f64>> {
    let m = layer.values.len();
    let bad = |a: &[f64]| a.len() != m || !is_probability(a);
    match rule {
        ScoreRule::Conventional => {
            if bad(&layer.alpha_star) {
                return Err(Error::contract(
                    "alpha_star is not a probability vector over M",
                ));
            }
            let x = mix(&layer.values, &layer.alpha_star);
            Ok(layer.w_fc.iter().map(|w| kernels::dot(w, &x)).collect())
        }
        ScoreRule::PromptCam => {
            if layer.alpha.iter().any(|a| bad(a)) {
                return Err(Error::contract(
                    "a class attention is not a probability vector over M",
                ));
            }
            Ok(layer
                .alpha
                .iter()
                .map(|a| kernels::dot(&layer.w_shared, &mix(&layer.values, a)))
                .collect())
        }
    }
}

/// Nearest-neighbour upsampling of a `grid x grid` patch map to `size x size`.
pub fn upsample_nearest(map: &[f64], grid: usize, size: usize) -> Vec<f64> {
    let cell = size / grid;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            out.push(map[(y / cell) * grid + x / cell]);
        }
    }
    out
}

/// Affine rescale to `[0, 1]`; a constant map becomes all zeros.
pub fn normalize_unit(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    values
        .iter()
        .map(|v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect()
}

fn to_byte(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Per-map normalized heatmap as a gray PPM-ready image.
pub fn render_heatmap(map: &[f64], grid: usize, size: usize) -> Image {
    let unit = normalize_unit(&upsample_nearest(map, grid, size));
    let data = unit.iter().flat_map(|&v| [to_byte(v); 3]).collect();
    Image::new(size, size, data).expect("size matches")
}

pub fn render_heatmap_gray(map: &[f64], grid: usize, size: usize) -> GrayImage {
    let unit = normalize_unit(&upsample_nearest(map, grid, size));
    GrayImage::new(size, size, unit.iter().map(|&v| to_byte(v)).collect()).expect("size matches")
}

/// Blends a red-tinted heatmap over the image for viewing.
pub fn overlay(image: &Image, map: &[f64], grid: usize) -> Image {
    let unit = normalize_unit(&upsample_nearest(map, grid, image.width));
    let mut out = image.clone();
    for (i, &h) in unit.iter().enumerate() {
        let (x, y) = (i % image.width, i / image.width);
        let [r, g, b] = image.pixel(x, y);
        let blend =
            |c: u8, target: f64| to_byte((c as f64 / 255.0) * (1.0 - 0.6 * h) + 0.6 * h * target);
        out.set_pixel(x, y, [blend(r, 1.0), blend(g, 0.0), blend(b, 0.0)]);
    }
    out
}
