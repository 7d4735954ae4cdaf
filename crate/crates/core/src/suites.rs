//! Evaluation suites over a trained prompt set: faithfulness, localization,
//! greedy-blur soundness, counterfactual glyph swaps, variant comparison and
//! taxonomy-level attention.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{relabel_taxonomy, Dataset, Image, Sample, SynthTraits, TaxonomyTree};
use crate::error::{Error, Result};
use crate::evaluate::{
    build_saliency, insertion_deletion, mean_map_saliency, pointing_game, Baselines,
    PromptClassifier, Provenance, SaliencyMap,
};
use crate::interpret::{
    blurred_scores, extract_class_attention, greedy_trait_ranking, manipulate_trait_region,
    mass_on_mask, AttentionStack, Manipulation, Scaling,
};
use crate::prompt::{
    predict_label, prompted_inference, ForwardOptions, Inference, PromptSet, PromptVariant,
};
use crate::rng::{self, Stream};
use crate::tensor::log_sum_exp;
use crate::train::{prompt_accuracy, train_prompts, TrainRecipe};
use crate::vit::ViTModel;

/// A frozen backbone with one trained prompt set.
#[derive(Clone, Copy)]
pub struct Trained<'a> {
    pub model: &'a ViTModel,
    pub prompts: &'a PromptSet,
    pub variant: PromptVariant,
    pub options: ForwardOptions,
}

impl<'a> Trained<'a> {
    pub fn infer(&self, image: &Image) -> Result<Inference> {
        prompted_inference(
            self.model,
            self.prompts,
            self.variant,
            self.options,
            &[image],
        )
    }

    pub fn classifier(&self) -> PromptClassifier<'a> {
        PromptClassifier {
            model: self.model,
            prompts: self.prompts,
            variant: self.variant,
            options: self.options,
        }
    }

    fn patch_size(&self) -> usize {
        self.model.config.patch_size
    }

    fn image_size(&self) -> usize {
        self.model.config.image_size
    }
}

/// Per-image record of the faithfulness and pointing measurements. The
/// explained class is the predicted one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub id: String,
    pub label: usize,
    pub predicted: usize,
    pub correct: bool,
    pub occluded: bool,
    pub top_head: usize,
    pub surviving: Vec<usize>,
    pub pointing_hit: bool,
    pub mass_in_mask: f64,
    pub mask_fraction: f64,
    pub insertion_auc: f64,
    pub deletion_auc: f64,
    pub uniform_insertion_auc: f64,
    pub uniform_deletion_auc: f64,
}

pub fn evaluate_image(
    trained: &Trained<'_>,
    sample: &Sample,
    mean_rgb: [u8; 3],
    top_k: usize,
) -> Result<ImageRow> {
    let inf = trained.infer(&sample.image)?;
    let predicted = inf.predicted(0);
    let ranking = greedy_trait_ranking(trained.model, trained.prompts, &inf, predicted)?;
    let stack = extract_class_attention(&inf, predicted, Scaling::ForwardConsistent)?;
    let top_head = ranking.importance()[0];
    let size = trained.image_size();
    let top_map = mean_map_saliency(&stack, &[top_head], size, Provenance::PromptCamTopHeads);
    let pointing = if sample.trait_mask.is_empty() {
        None
    } else {
        Some(pointing_game(&top_map, &sample.trait_mask)?)
    };
    let saliency = build_saliency(&stack, &ranking, top_k, size)?;
    let ps = trained.patch_size();
    let base = Baselines::for_image(&sample.image, mean_rgb, ps);
    let steps = inf.patches;
    let clf = trained.classifier();
    let f = insertion_deletion(&sample.image, &saliency, &clf, predicted, steps, &base, ps)?;
    let u = insertion_deletion(
        &sample.image,
        &SaliencyMap::uniform(size, size),
        &clf,
        predicted,
        steps,
        &base,
        ps,
    )?;
    Ok(ImageRow {
        id: sample.id.clone(),
        label: sample.label,
        predicted,
        correct: predicted == sample.label,
        occluded: sample.occluded,
        top_head,
        surviving: ranking.surviving,
        pointing_hit: pointing.is_some_and(|p| p.hit),
        mass_in_mask: pointing.map_or(0.0, |p| p.mass_in_mask),
        mask_fraction: sample.trait_mask.fraction(),
        insertion_auc: f.insertion_auc,
        deletion_auc: f.deletion_auc,
        uniform_insertion_auc: u.insertion_auc,
        uniform_deletion_auc: u.deletion_auc,
    })
}

/// One row per sample, in input order.
pub fn image_rows(
    trained: &Trained<'_>,
    samples: &[Sample],
    mean_rgb: [u8; 3],
    top_k: usize,
) -> Result<Vec<ImageRow>> {
    samples
        .iter()
        .map(|s| evaluate_image(trained, s, mean_rgb, top_k))
        .collect()
}

fn scored(rows: &[ImageRow]) -> Vec<&ImageRow> {
    rows.iter().filter(|r| r.correct && !r.occluded).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessSummary {
    pub images: usize,
    pub insertion: f64,
    pub deletion: f64,
    pub gap: f64,
    pub uniform_insertion: f64,
    pub uniform_deletion: f64,
    pub uniform_gap: f64,
}

/// Means over correctly classified, unoccluded images.
pub fn summarize_faithfulness(rows: &[ImageRow]) -> FaithfulnessSummary {
    let kept = scored(rows);
    let n = kept.len().max(1) as f64;
    let mean = |f: fn(&ImageRow) -> f64| kept.iter().map(|r| f(r)).sum::<f64>() / n;
    let insertion = mean(|r| r.insertion_auc);
    let deletion = mean(|r| r.deletion_auc);
    let uniform_insertion = mean(|r| r.uniform_insertion_auc);
    let uniform_deletion = mean(|r| r.uniform_deletion_auc);
    FaithfulnessSummary {
        images: kept.len(),
        insertion,
        deletion,
        gap: insertion - deletion,
        uniform_insertion,
        uniform_deletion,
        uniform_gap: uniform_insertion - uniform_deletion,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointingSummary {
    pub images: usize,
    pub hit_rate: f64,
    pub mean_mass: f64,
    /// Mean trait-mask area fraction: the mass a uniform map would place.
    pub uniform_mass: f64,
    pub mass_ratio: f64,
    /// Images on which at least one head survived greedy blurring.
    pub with_survivors: usize,
}

pub fn summarize_pointing(rows: &[ImageRow]) -> PointingSummary {
    let kept = scored(rows);
    let n = kept.len().max(1) as f64;
    let hits = kept.iter().filter(|r| r.pointing_hit).count();
    let mean_mass = kept.iter().map(|r| r.mass_in_mask).sum::<f64>() / n;
    let uniform_mass = kept.iter().map(|r| r.mask_fraction).sum::<f64>() / n;
    PointingSummary {
        images: kept.len(),
        hit_rate: hits as f64 / n,
        mean_mass,
        uniform_mass,
        mass_ratio: if uniform_mass > 0.0 {
            mean_mass / uniform_mass
        } else {
            0.0
        },
        with_survivors: kept.iter().filter(|r| !r.surviving.is_empty()).count(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurSoundness {
    pub images: usize,
    /// Images with a non-empty surviving set.
    pub with_survivors: usize,
    /// Surviving heads checked across all images.
    pub heads_checked: usize,
    /// Surviving heads whose extra blurring did not flip the prediction.
    pub violations: usize,
    /// Images whose unblurred rescore differs from the original scores.
    pub restore_mismatches: usize,
}

impl BlurSoundness {
    pub fn holds(&self) -> bool {
        self.violations == 0 && self.restore_mismatches == 0
    }
}

/// Checks on `count` randomly chosen correct test images that blurring any
/// surviving head on top of the blurred set flips the prediction, and that
/// rescoring with nothing blurred reproduces the original scores bitwise.
pub fn blur_soundness(
    trained: &Trained<'_>,
    samples: &[Sample],
    count: usize,
    seed: u64,
) -> Result<BlurSoundness> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng::stream(seed, Stream::Sample));
    let mut report = BlurSoundness {
        images: 0,
        with_survivors: 0,
        heads_checked: 0,
        violations: 0,
        restore_mismatches: 0,
    };
    for i in order {
        if report.images == count {
            break;
        }
        let s = &samples[i];
        let inf = trained.infer(&s.image)?;
        if inf.predicted(0) != s.label {
            continue;
        }
        report.images += 1;
        let ranking = greedy_trait_ranking(trained.model, trained.prompts, &inf, s.label)?;
        if !ranking.surviving.is_empty() {
            report.with_survivors += 1;
        }
        for &head in &ranking.surviving {
            let mut set = ranking.blur_order.clone();
            set.push(head);
            let scores = blurred_scores(trained.model, trained.prompts, &inf, s.label, &set)?;
            report.heads_checked += 1;
            if predict_label(&scores) == s.label {
                report.violations += 1;
            }
        }
        let restored = blurred_scores(trained.model, trained.prompts, &inf, s.label, &[])?;
        let same = restored
            .iter()
            .zip(inf.sample_scores(0))
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            report.restore_mismatches += 1;
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapRow {
    pub id: String,
    pub from: usize,
    pub to: usize,
    pub flipped: bool,
    pub mass_before: f64,
    pub mass_after: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SwapSummary {
    pub images: usize,
    pub flip_rate: f64,
    pub mean_mass_before: f64,
    pub mean_mass_after: f64,
    /// `1 - after / before` on the mean masses.
    pub relative_drop: f64,
}

/// Erases each correctly classified image's species glyph, pastes in the
/// sibling species' glyph from a donor test image, and records whether the
/// prediction moves to the sibling. Mass is the original class prompt's mean
/// top-`top_k` head attention on the erased region, before and after.
pub fn glyph_swap(
    data: &SynthTraits,
    trained: &Trained<'_>,
    top_k: usize,
    seed: u64,
) -> Result<Vec<SwapRow>> {
    let test = &data.dataset.test;
    let ps = trained.patch_size();
    let mut rows = Vec::new();
    for s in test.iter().filter(|s| !s.occluded) {
        let sibling = sibling_of(data, s.label)?;
        let Some(donor) = test.iter().find(|d| d.label == sibling && !d.occluded) else {
            continue;
        };
        let before = trained.infer(&s.image)?;
        if before.predicted(0) != s.label {
            continue;
        }
        let erase = Manipulation::EraseToBackground {
            manifest: &data.manifest,
            seed,
        };
        let erased = manipulate_trait_region(&s.image, &s.trait_mask, erase)?;
        let edited = manipulate_trait_region(
            &erased,
            &donor.trait_mask,
            Manipulation::CopyFrom(&donor.image),
        )?;
        let after = trained.infer(&edited)?;
        let ranking = greedy_trait_ranking(trained.model, trained.prompts, &before, s.label)?;
        let heads: Vec<usize> = ranking.importance().into_iter().take(top_k).collect();
        let mass = |stack: &AttentionStack| {
            heads
                .iter()
                .map(|&h| mass_on_mask(&stack.maps[h], &s.trait_mask, ps))
                .sum::<f64>()
                / heads.len() as f64
        };
        rows.push(SwapRow {
            id: s.id.clone(),
            from: s.label,
            to: sibling,
            flipped: after.predicted(0) == sibling,
            mass_before: mass(&extract_class_attention(
                &before,
                s.label,
                Scaling::ForwardConsistent,
            )?),
            mass_after: mass(&extract_class_attention(
                &after,
                s.label,
                Scaling::ForwardConsistent,
            )?),
        });
    }
    Ok(rows)
}

pub fn summarize_swaps(rows: &[SwapRow]) -> SwapSummary {
    let n = rows.len().max(1) as f64;
    let before = rows.iter().map(|r| r.mass_before).sum::<f64>() / n;
    let after = rows.iter().map(|r| r.mass_after).sum::<f64>() / n;
    SwapSummary {
        images: rows.len(),
        flip_rate: rows.iter().filter(|r| r.flipped).count() as f64 / n,
        mean_mass_before: before,
        mean_mass_after: after,
        relative_drop: if before > 0.0 {
            1.0 - after / before
        } else {
            0.0
        },
    }
}

/// The other species of the same genus.
fn sibling_of(data: &SynthTraits, class: usize) -> Result<usize> {
    let genus = data.manifest.class(class).genus_id;
    data.manifest
        .classes
        .iter()
        .find(|c| c.genus_id == genus && c.class_id != class)
        .map(|c| c.class_id)
        .ok_or_else(|| Error::contract(format!("class {class} has no sibling species")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantRun {
    pub seed: u64,
    pub deep: f64,
    pub shallow: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariantOrdering {
    pub runs: Vec<VariantRun>,
    /// Seeds on which Deep matched or beat Shallow.
    pub deep_wins: usize,
}

impl VariantOrdering {
    pub fn majority(&self) -> bool {
        2 * self.deep_wins > self.runs.len()
    }
}

/// Test accuracy of Deep and Shallow prompts trained with each prompt seed.
pub fn variant_ordering(
    model: &ViTModel,
    dataset: &Dataset,
    options: ForwardOptions,
    recipe: &TrainRecipe,
    seeds: &[u64],
) -> Result<VariantOrdering> {
    let mut runs = Vec::new();
    for &seed in seeds {
        let r = TrainRecipe {
            seed,
            ..recipe.clone()
        };
        let acc = |variant| -> Result<f64> {
            let (p, _) = train_prompts(model, dataset, variant, options, &r)?;
            prompt_accuracy(model, &p, variant, options, &dataset.test)
        };
        runs.push(VariantRun {
            seed,
            deep: acc(PromptVariant::Deep)?,
            shallow: acc(PromptVariant::Shallow)?,
        });
    }
    let deep_wins = runs.iter().filter(|r| r.deep >= r.shallow).count();
    Ok(VariantOrdering { runs, deep_wins })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyRow {
    pub id: String,
    pub genus: usize,
    pub species: usize,
    /// Mean over heads of the genus-level prompt's mass on the genus glyph.
    pub genus_level_mass: f64,
    /// The same for the prompt separating the species within its genus.
    pub species_level_mass: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaxonomySummary {
    pub images: usize,
    pub genus_level_mean: f64,
    pub species_level_mean: f64,
    /// Images where the genus-level prompt puts strictly more mass on the glyph.
    pub genus_wins: usize,
    pub win_rate: f64,
    /// One-sided sign-test p-value for `genus_wins` out of `images`.
    pub p_value: f64,
}

/// Trains one prompt set at the root (genus labels) and one per genus node
/// (sibling species), then compares each prompt's attention on the shared
/// genus glyph, paired per test image. Each prompt queried is the one for the
/// image's true label at that node.
pub fn taxonomy_suite(
    data: &SynthTraits,
    model: &ViTModel,
    variant: PromptVariant,
    options: ForwardOptions,
    recipe: &TrainRecipe,
) -> Result<Vec<TaxonomyRow>> {
    let tree = TaxonomyTree::from_manifest(&data.manifest);
    let root = relabel_taxonomy(&data.dataset, &tree, tree.root())?;
    let (genus_prompts, _) = train_prompts(model, &root.dataset, variant, options, recipe)?;
    let genus_level = Trained {
        model,
        prompts: &genus_prompts,
        variant,
        options,
    };
    let ps = model.config.patch_size;
    let mean_mass = |stack: &AttentionStack, s: &Sample| {
        stack
            .maps
            .iter()
            .map(|m| mass_on_mask(m, &s.genus_mask, ps))
            .sum::<f64>()
            / stack.maps.len() as f64
    };
    let mut rows = Vec::new();
    for &genus_node in &tree.node(tree.root()).children {
        let node = relabel_taxonomy(&data.dataset, &tree, genus_node)?;
        let (species_prompts, _) = train_prompts(model, &node.dataset, variant, options, recipe)?;
        let species_level = Trained {
            model,
            prompts: &species_prompts,
            variant,
            options,
        };
        for s in &node.dataset.test {
            let coarse = root
                .dataset
                .test
                .iter()
                .find(|r| r.id == s.id)
                .expect("every node image sits under the root");
            if s.genus_mask.is_empty() {
                continue;
            }
            let g = extract_class_attention(
                &genus_level.infer(&s.image)?,
                coarse.label,
                Scaling::ForwardConsistent,
            )?;
            let f = extract_class_attention(
                &species_level.infer(&s.image)?,
                s.label,
                Scaling::ForwardConsistent,
            )?;
            rows.push(TaxonomyRow {
                id: s.id.clone(),
                genus: s.genus,
                species: s.species,
                genus_level_mass: mean_mass(&g, s),
                species_level_mass: mean_mass(&f, s),
            });
        }
    }
    Ok(rows)
}

pub fn summarize_taxonomy(rows: &[TaxonomyRow]) -> TaxonomySummary {
    let n = rows.len();
    let nf = n.max(1) as f64;
    let wins = rows
        .iter()
        .filter(|r| r.genus_level_mass > r.species_level_mass)
        .count();
    TaxonomySummary {
        images: n,
        genus_level_mean: rows.iter().map(|r| r.genus_level_mass).sum::<f64>() / nf,
        species_level_mean: rows.iter().map(|r| r.species_level_mass).sum::<f64>() / nf,
        genus_wins: wins,
        win_rate: wins as f64 / nf,
        p_value: sign_test_p(wins, n),
    }
}

/// `P(X >= k)` for `X ~ Binomial(n, 1/2)`.
pub fn sign_test_p(k: usize, n: usize) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    // log C(n, i) built up term by term.
    let mut log_c = vec![0.0; n + 1];
    for i in 1..=n {
        log_c[i] = log_c[i - 1] + ((n - i + 1) as f64).ln() - (i as f64).ln();
    }
    let tail: Vec<f64> = log_c[k..]
        .iter()
        .map(|c| c - n as f64 * std::f64::consts::LN_2)
        .collect();
    log_sum_exp(&tail).exp().min(1.0)
}
