//! Invariants and brute-force oracles that hold for any small model.

use pcam::data::{generate_synth_traits, Image, Mask, SynthSpec};
use pcam::evaluate::{
    build_saliency, insertion_deletion, pointing_game, Baselines, Classifier, SaliencyMap,
};
use pcam::interpret::{
    blurred_scores, extract_class_attention, greedy_trait_ranking, mass_on_mask,
    simplified_layer_scores, Scaling, ScoreRule, SimplifiedLayer,
};
use pcam::prompt::{prompted_inference, ForwardOptions, Inference, PromptSet, PromptVariant};
use pcam::tensor::{softmax, Tape, Tensor};
use pcam::vit::{ViTConfig, ViTModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config(layers: usize, embed_dim: usize, heads: usize) -> ViTConfig {
    ViTConfig {
        layers,
        embed_dim,
        heads,
        mlp_dim: 2 * embed_dim,
        patch_size: 2,
        image_size: 4,
        channels: 3,
        classes: 3,
        ln_eps: 1e-5,
    }
}

/// A model whose weights are large enough that attention is far from uniform.
fn random_model(config: &ViTConfig, seed: u64) -> ViTModel {
    let mut model = ViTModel::init(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in model.tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|x| *x = rng.random_range(-0.8..0.8));
    }
    model
}

fn random_prompts(
    config: &ViTConfig,
    classes: usize,
    variant: PromptVariant,
    seed: u64,
) -> PromptSet {
    let mut prompts = PromptSet::init(config, classes, variant, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    for t in prompts.tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|x| *x = rng.random_range(-1.0..1.0));
    }
    prompts
}

fn random_image(size: usize, rng: &mut ChaCha8Rng) -> Image {
    Image::new(
        size,
        size,
        (0..size * size * 3).map(|_| rng.random()).collect(),
    )
    .unwrap()
}

fn first_argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------- tensors

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions_and_shift_invariant(
        rows in 1usize..4,
        cols in 1usize..7,
        seed in any::<u64>(),
        shift in -50.0f64..50.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[rows, cols], |_| rng.random_range(-20.0..20.0));
        let shifted = Tensor::from_fn(&[rows, cols], |i| x.data()[i] + shift);
        let (p, q) = (softmax(&x), softmax(&shifted));
        for r in 0..rows {
            let row = p.row(r);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let denom: f64 = x.row(r).iter().map(|v| (v - 20.0).exp()).sum();
            for (j, &v) in row.iter().enumerate() {
                prop_assert!((v - (x.at(r, j) - 20.0).exp() / denom).abs() <= 1e-12);
                prop_assert!((v - q.at(r, j)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_matches_naive_formula_and_gradient(
        batch in 1usize..4,
        classes in 2usize..6,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Tensor::from_fn(&[batch, classes], |_| rng.random_range(-15.0..15.0));
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        let mut tape = Tape::new();
        let v = tape.param(logits.clone());
        let loss = tape.cross_entropy(v, &labels).unwrap();
        let grads = tape.backward(loss).unwrap();
        let g = grads.get(v).unwrap();

        let mut expect = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let z: f64 = logits.row(r).iter().map(|v| v.exp()).sum();
            expect -= (logits.at(r, y).exp() / z).ln();
            for j in 0..classes {
                let p = logits.at(r, j).exp() / z;
                let onehot = if j == y { 1.0 } else { 0.0 };
                prop_assert!((g[r * classes + j] - (p - onehot) / batch as f64).abs() <= 1e-12);
            }
        }
        expect /= batch as f64;
        prop_assert!((tape.value(loss).data()[0] - expect).abs() <= 1e-10 * expect.abs().max(1.0));
    }
}

#[test]
fn cross_entropy_survives_huge_logits() {
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::matrix(1, 3, vec![1000.0, 999.0, 0.0]).unwrap());
    let loss = tape.cross_entropy(v, &[1]).unwrap();
    let expect = 1.0 + (1.0 + (-1.0f64).exp() + (-1000.0f64).exp()).ln();
    assert!((tape.value(loss).data()[0] - expect).abs() < 1e-12);
}

// ---------------------------------------------------------------- attention masks

fn variant_of(i: usize) -> PromptVariant {
    match i {
        0 => PromptVariant::Shallow,
        1 => PromptVariant::Deep,
        _ => PromptVariant::AtLayer(2),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn final_attention_rows_respect_masks(
        seed in any::<u64>(),
        variant in 0usize..3,
        classes in 1usize..4,
        isolation in any::<bool>(),
        hide_cls in any::<bool>(),
    ) {
        let config = tiny_config(2, 8, 2);
        let variant = variant_of(variant);
        let model = random_model(&config, seed);
        let prompts = random_prompts(&config, classes, variant, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = [random_image(4, &mut rng), random_image(4, &mut rng)];
        let refs: Vec<&Image> = images.iter().collect();
        let options = ForwardOptions { prompt_isolation: isolation, hide_cls };
        let inf = prompted_inference(&model, &prompts, variant, options, &refs).unwrap();
        let t = inf.final_spec.seq;
        prop_assert_eq!(t, classes + 4 + 1);
        for (row_index, row) in inf.final_probs.chunks(t).enumerate() {
            let query = row_index % t;
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            if query < classes {
                if isolation {
                    prop_assert!(row[..classes].iter().all(|&p| p == 0.0));
                }
                if hide_cls {
                    prop_assert_eq!(row[t - 1], 0.0);
                }
            }
        }
    }

    /// With prompts seeing only patches, the extracted patch softmax is the
    /// forward pass's own attention row.
    #[test]
    fn extraction_equals_forward_row_when_only_patches_are_visible(
        seed in any::<u64>(),
        variant in 0usize..3,
        classes in 1usize..4,
    ) {
        let config = tiny_config(3, 8, 2);
        let variant = variant_of(variant);
        let model = random_model(&config, seed);
        let prompts = random_prompts(&config, classes, variant, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = random_image(4, &mut rng);
        let options = ForwardOptions { prompt_isolation: true, hide_cls: true };
        let inf = prompted_inference(&model, &prompts, variant, options, &[&image]).unwrap();
        for c in 0..classes {
            let stack = extract_class_attention(&inf, c, Scaling::ForwardConsistent).unwrap();
            for (map, raw) in stack.maps.iter().zip(&stack.raw) {
                for (a, b) in map.iter().zip(raw) {
                    prop_assert!((a - b).abs() <= 1e-12);
                }
            }
        }
    }
}

// ---------------------------------------------------------------- prompt variants

#[test]
fn isolated_deep_scores_depend_only_on_their_own_prompt() {
    let config = tiny_config(3, 8, 2);
    let model = random_model(&config, 11);
    let prompts = random_prompts(&config, 3, PromptVariant::Deep, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let images = [random_image(4, &mut rng), random_image(4, &mut rng)];
    let refs: Vec<&Image> = images.iter().collect();
    for isolation in [true, false] {
        let options = ForwardOptions {
            prompt_isolation: isolation,
            hide_cls: false,
        };
        let base =
            prompted_inference(&model, &prompts, PromptVariant::Deep, options, &refs).unwrap();
        for changed in 0..3 {
            let mut edited = prompts.clone();
            let d = config.embed_dim;
            edited.class_specific.data_mut()[changed * d..(changed + 1) * d]
                .iter_mut()
                .enumerate()
                .for_each(|(i, x)| *x += 0.1 * i as f64);
            let after =
                prompted_inference(&model, &edited, PromptVariant::Deep, options, &refs).unwrap();
            let mut others_moved = false;
            for b in 0..2 {
                for c in (0..3).filter(|&c| c != changed) {
                    let (x, y) = (base.sample_scores(b)[c], after.sample_scores(b)[c]);
                    if isolation {
                        assert_eq!(
                            x.to_bits(),
                            y.to_bits(),
                            "class {c} moved when prompt {changed} changed"
                        );
                    }
                    others_moved |= x != y;
                }
                assert_ne!(
                    base.sample_scores(b)[changed],
                    after.sample_scores(b)[changed]
                );
            }
            if !isolation {
                assert!(others_moved, "without isolation prompts should interact");
            }
        }
    }
}

#[test]
fn shallow_and_deep_differ_on_the_same_class_prompts() {
    let config = tiny_config(3, 8, 2);
    let model = random_model(&config, 4);
    let deep = random_prompts(&config, 3, PromptVariant::Deep, 4);
    let shallow = PromptSet {
        class_agnostic: Vec::new(),
        ..deep.clone()
    };
    assert!(deep.check(&config, PromptVariant::Shallow).is_err());
    assert!(shallow.check(&config, PromptVariant::Deep).is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let image = random_image(4, &mut rng);
    let options = ForwardOptions::default();
    let a = prompted_inference(&model, &deep, PromptVariant::Deep, options, &[&image]).unwrap();
    let b =
        prompted_inference(&model, &shallow, PromptVariant::Shallow, options, &[&image]).unwrap();
    let gap: f64 = a
        .sample_scores(0)
        .iter()
        .zip(b.sample_scores(0))
        .map(|(x, y)| (x - y).abs())
        .sum();
    assert!(gap > 1e-6, "gap {gap}");
}

// ---------------------------------------------------------------- greedy ranking

/// Scores of every subset of blurred heads, indexed by bitmask.
fn subset_table(
    model: &ViTModel,
    prompts: &PromptSet,
    inf: &Inference,
    class: usize,
) -> Vec<Vec<f64>> {
    (0..1usize << inf.heads)
        .map(|bits| {
            let heads: Vec<usize> = (0..inf.heads).filter(|h| bits >> h & 1 == 1).collect();
            blurred_scores(model, prompts, inf, class, &heads).unwrap()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn greedy_ranking_matches_exhaustive_subset_search(seed in any::<u64>(), classes in 2usize..4) {
        let config = tiny_config(2, 8, 4);
        let model = random_model(&config, seed);
        let prompts = random_prompts(&config, classes, PromptVariant::Deep, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = random_image(4, &mut rng);
        let options = ForwardOptions { prompt_isolation: true, hide_cls: false };
        let inf = prompted_inference(&model, &prompts, PromptVariant::Deep, options, &[&image]).unwrap();
        let class = first_argmax(inf.sample_scores(0));
        let table = subset_table(&model, &prompts, &inf, class);
        prop_assert_eq!(&table[0], &inf.sample_scores(0).to_vec());

        let mut bits = 0usize;
        let mut order = Vec::new();
        let mut steps = 0;
        while order.len() < 4 {
            let mut best: Option<usize> = None;
            for h in (0..4).filter(|h| bits >> h & 1 == 0) {
                if best.is_none_or(|b| table[bits | 1 << h][class] > table[bits | 1 << b][class]) {
                    best = Some(h);
                }
            }
            let h = best.unwrap();
            steps += 1;
            if first_argmax(&table[bits | 1 << h]) != class {
                break;
            }
            bits |= 1 << h;
            order.push(h);
        }
        let surviving: Vec<usize> = (0..4).filter(|h| bits >> h & 1 == 0).collect();

        let ranking = greedy_trait_ranking(&model, &prompts, &inf, class).unwrap();
        prop_assert_eq!(&ranking.blur_order, &order);
        prop_assert_eq!(&ranking.surviving, &surviving);
        prop_assert_eq!(ranking.steps.len(), steps);
        for step in &ranking.steps {
            let set: usize = step.blurred.iter().map(|h| 1 << h).sum();
            for &(h, s) in &step.candidates {
                prop_assert_eq!(s.to_bits(), table[set | 1 << h][class].to_bits());
            }
        }
        // Every survivor flips the prediction once added to the blurred set.
        for &r in &surviving {
            prop_assert_ne!(first_argmax(&table[bits | 1 << r]), class);
        }
    }

    #[test]
    fn top_k_saliency_is_the_mean_of_the_most_important_maps(seed in any::<u64>(), k in 1usize..=4) {
        let config = tiny_config(2, 8, 4);
        let model = random_model(&config, seed);
        let prompts = random_prompts(&config, 2, PromptVariant::Deep, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = random_image(4, &mut rng);
        let inf = prompted_inference(&model, &prompts, PromptVariant::Deep, ForwardOptions::default(), &[&image]).unwrap();
        let class = first_argmax(inf.sample_scores(0));
        let ranking = greedy_trait_ranking(&model, &prompts, &inf, class).unwrap();
        let stack = extract_class_attention(&inf, class, Scaling::ForwardConsistent).unwrap();
        let saliency = build_saliency(&stack, &ranking, k, 4).unwrap();

        let importance = ranking.importance();
        prop_assert_eq!(importance.len(), 4);
        let mut sorted = importance.clone();
        sorted.sort_unstable();
        prop_assert_eq!(sorted, vec![0, 1, 2, 3]);
        for y in 0..4 {
            for x in 0..4 {
                let patch = (y / 2) * 2 + x / 2;
                let mean: f64 = importance[..k].iter().map(|&h| stack.maps[h][patch]).sum::<f64>() / k as f64;
                prop_assert!((saliency.scores[y * 4 + x] - mean).abs() <= 1e-15);
            }
        }
    }
}

// ---------------------------------------------------------------- simplified layer

#[test]
fn simplified_layer_two_patch_closed_form() {
    let layer = SimplifiedLayer {
        values: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        alpha_star: vec![0.25, 0.75],
        alpha: vec![vec![1.0, 0.0], vec![0.5, 0.5]],
        w_fc: vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![2.0, -1.0]],
        w_shared: vec![3.0, -1.0],
    };
    assert_eq!(
        simplified_layer_scores(&layer, ScoreRule::Conventional).unwrap(),
        vec![0.25, 0.75, -0.25]
    );
    assert_eq!(
        simplified_layer_scores(&layer, ScoreRule::PromptCam).unwrap(),
        vec![3.0, 1.0]
    );
    let broken = SimplifiedLayer {
        alpha: vec![vec![0.7, 0.7]],
        ..layer
    };
    assert!(simplified_layer_scores(&broken, ScoreRule::PromptCam).is_err());
}

proptest! {
    #[test]
    fn prompt_cam_score_is_attention_weighted_patch_evidence(
        m in 1usize..6,
        d in 1usize..5,
        c in 1usize..4,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-2.0..2.0)).collect() };
        let values: Vec<Vec<f64>> = (0..m).map(|_| draw(d)).collect();
        let w_shared = draw(d);
        let alpha: Vec<Vec<f64>> = (0..c)
            .map(|_| {
                let raw: Vec<f64> = draw(m).iter().map(|x| x.exp()).collect();
                let z: f64 = raw.iter().sum();
                raw.iter().map(|x| x / z).collect()
            })
            .collect();
        let layer = SimplifiedLayer {
            values: values.clone(),
            alpha_star: alpha[0].clone(),
            alpha: alpha.clone(),
            w_fc: vec![w_shared.clone(); c],
            w_shared: w_shared.clone(),
        };
        let scores = simplified_layer_scores(&layer, ScoreRule::PromptCam).unwrap();
        let evidence: Vec<f64> = values
            .iter()
            .map(|v| v.iter().zip(&w_shared).map(|(a, b)| a * b).sum())
            .collect();
        for (k, s) in scores.iter().enumerate() {
            let expect: f64 = alpha[k].iter().zip(&evidence).map(|(a, e)| a * e).sum();
            prop_assert!((s - expect).abs() <= 1e-12);
        }
        // With every class sharing one classifier vector, the conventional
        // rule cannot tell classes apart.
        let conventional = simplified_layer_scores(&layer, ScoreRule::Conventional).unwrap();
        prop_assert!(conventional.iter().all(|&s| s == conventional[0]));
    }
}

// ---------------------------------------------------------------- pointing

fn saliency_from(scores: Vec<f64>) -> SaliencyMap {
    let mut s = SaliencyMap::uniform(4, 4);
    s.scores = scores;
    s
}

proptest! {
    #[test]
    fn pointing_ignores_rescaling_and_monotone_transforms(
        raw in prop::collection::vec(1u32..1000, 16),
        mask_bits in 1u32..(1 << 16),
        power in -10i32..10,
    ) {
        let scores: Vec<f64> = raw.iter().map(|&v| v as f64).collect();
        let mut mask = Mask::empty(4, 4);
        for (i, m) in mask.data.iter_mut().enumerate() {
            *m = mask_bits >> i & 1 == 1;
        }
        let base = pointing_game(&saliency_from(scores.clone()), &mask).unwrap();

        let total: f64 = scores.iter().sum();
        let inside: f64 = scores.iter().zip(&mask.data).filter(|(_, &m)| m).map(|(s, _)| s).sum();
        prop_assert!((base.mass_in_mask - inside / total).abs() <= 1e-12);
        let top = first_argmax(&scores);
        prop_assert_eq!(base.hit, mask.data[top]);

        let factor = 2f64.powi(power);
        let scaled = pointing_game(&saliency_from(scores.iter().map(|s| s * factor).collect()), &mask).unwrap();
        prop_assert_eq!(scaled.hit, base.hit);
        prop_assert!((scaled.mass_in_mask - base.mass_in_mask).abs() <= 1e-12);

        let bent = pointing_game(&saliency_from(scores.iter().map(|s| s * s * s + 2.0 * s).collect()), &mask).unwrap();
        prop_assert_eq!(bent.hit, base.hit);
    }
}

#[test]
fn patch_mass_weights_partial_overlap() {
    // One pixel of patch 0 and all of patch 3.
    let mut mask = Mask::empty(4, 4);
    for (x, y) in [(0, 0), (2, 2), (3, 2), (2, 3), (3, 3)] {
        mask.data[y * 4 + x] = true;
    }
    let map = [0.1, 0.2, 0.3, 0.4];
    assert!((mass_on_mask(&map, &mask, 2) - (0.1 * 0.25 + 0.4)).abs() < 1e-15);
}

// ---------------------------------------------------------------- insertion and deletion

/// Probability of class 0 is the mean red level.
struct RedLevel;

impl Classifier for RedLevel {
    fn probabilities(&self, images: &[&Image]) -> pcam::Result<Vec<Vec<f64>>> {
        Ok(images
            .iter()
            .map(|img| {
                let red: f64 = img.data.chunks(3).map(|p| p[0] as f64).sum();
                let p = red / (255.0 * (img.width * img.height) as f64);
                vec![p, 1.0 - p]
            })
            .collect())
    }
}

fn patch_image(reds: &[u8]) -> Image {
    let mut img = Image::filled(4, 4, [0, 0, 0]);
    for y in 0..4 {
        for x in 0..4 {
            img.set_pixel(x, y, [reds[(y / 2) * 2 + x / 2], 9, 9]);
        }
    }
    img
}

proptest! {
    #[test]
    fn curves_match_patch_enumeration(
        reds in prop::collection::vec(any::<u8>(), 4),
        base_red in any::<u8>(),
        order_keys in Just([0usize, 1, 2, 3]).prop_shuffle(),
        steps in 1usize..7,
    ) {
        let image = patch_image(&reds);
        // Saliency ranks patches by `order_keys`: patch order_keys[i] is i-th.
        let mut scores = vec![0.0; 16];
        for (rank, &p) in order_keys.iter().enumerate() {
            for y in 0..4 {
                for x in 0..4 {
                    if (y / 2) * 2 + x / 2 == p {
                        scores[y * 4 + x] = (10 - rank) as f64;
                    }
                }
            }
        }
        let baselines = Baselines {
            deletion: Image::filled(4, 4, [base_red, 0, 0]),
            insertion: Image::filled(4, 4, [0, 0, 0]),
        };
        let result = insertion_deletion(&image, &saliency_from(scores), &RedLevel, 0, steps, &baselines, 2).unwrap();

        let level = |reds: &[f64]| reds.iter().sum::<f64>() / (4.0 * 255.0);
        let mut del = Vec::new();
        let mut ins = Vec::new();
        for k in 0..=steps {
            let n = (2 * k * 4 + steps) / (2 * steps);
            let mut d: Vec<f64> = reds.iter().map(|&r| r as f64).collect();
            let mut i = vec![0.0; 4];
            for &p in &order_keys[..n] {
                d[p] = base_red as f64;
                i[p] = reds[p] as f64;
            }
            del.push(level(&d));
            ins.push(level(&i));
        }
        let auc = |ys: &[f64]| ys.windows(2).map(|w| (w[0] + w[1]) / (2.0 * steps as f64)).sum::<f64>();
        for k in 0..=steps {
            prop_assert!((result.deletion_curve[k].0 - k as f64 / steps as f64).abs() <= 1e-15);
            prop_assert!((result.deletion_curve[k].1 - del[k]).abs() <= 1e-12);
            prop_assert!((result.insertion_curve[k].1 - ins[k]).abs() <= 1e-12);
        }
        prop_assert!((result.deletion_auc - auc(&del)).abs() <= 1e-12);
        prop_assert!((result.insertion_auc - auc(&ins)).abs() <= 1e-12);
    }
}

// ---------------------------------------------------------------- generator audit

/// Pearson correlation between a patch and a clean rendering of a glyph.
fn glyph_match(image: &Image, patch: usize, template: &[f64], patch_size: usize) -> f64 {
    let grid = image.width / patch_size;
    let (ox, oy) = ((patch % grid) * patch_size, (patch / grid) * patch_size);
    let mut values = Vec::with_capacity(template.len());
    for y in 0..patch_size {
        for x in 0..patch_size {
            values.extend(image.pixel(ox + x, oy + y).iter().map(|&v| v as f64));
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let (ma, mb) = (mean(&values), mean(template));
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (a, b) in values.iter().zip(template) {
        ab += (a - ma) * (b - mb);
        aa += (a - ma) * (a - ma);
        bb += (b - mb) * (b - mb);
    }
    if aa == 0.0 {
        0.0
    } else {
        ab / (aa * bb).sqrt()
    }
}

#[test]
fn trait_glyphs_identify_their_class_and_only_their_class() {
    let spec = SynthSpec::synth8();
    let data = generate_synth_traits(&spec, 7).unwrap();
    let p = spec.patch_size;
    let m = spec.num_patches();
    let templates: Vec<Vec<f64>> = (0..spec.classes)
        .map(|c| {
            let g = data
                .manifest
                .glyph(data.manifest.class(c).trait_glyphs[0].glyph_id);
            g.pattern
                .bytes()
                .flat_map(|b| if b == b'1' { g.color } else { g.accent })
                .map(f64::from)
                .collect()
        })
        .collect();

    let samples: Vec<_> = data
        .dataset
        .train
        .iter()
        .chain(&data.dataset.test)
        .collect();
    let mut correct = 0;
    for s in &samples {
        let best: Vec<f64> = templates
            .iter()
            .map(|t| {
                (0..m)
                    .map(|q| glyph_match(&s.image, q, t, p))
                    .fold(f64::MIN, f64::max)
            })
            .collect();
        for (c, &score) in best.iter().enumerate() {
            if c == s.label {
                let at_slot =
                    glyph_match(&s.image, data.manifest.species_slot(c), &templates[c], p);
                assert!(at_slot > 0.9, "{}: own glyph match {at_slot}", s.id);
            } else {
                assert!(score < 0.7, "{}: glyph of class {c} matched {score}", s.id);
            }
        }
        correct += usize::from(first_argmax(&best) == s.label);
    }
    assert_eq!(correct, samples.len());
}
