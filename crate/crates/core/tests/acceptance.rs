//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line
//! straight to stderr (so it shows even when output is captured) and then
//! asserts. The synth8 pipeline is trained once and shared; tests hold a
//! lock so that the wall-clock budget is measured without competition.

use std::io::Write;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use pcam::checkpoint::{model_checkpoint, prompt_checkpoint, PromptMeta};
use pcam::data::{mean_color, pnm, SynthSpec};
use pcam::interpret::{
    extract_class_attention, render_heatmap, simplified_layer_scores, Scaling, ScoreRule,
    SimplifiedLayer,
};
use pcam::pipeline::{pretrain_stage, prompt_stage, Backbone, PipelineConfig, PromptRun};
use pcam::prompt::{
    prompted_forward_vars, prompted_inference, ForwardOptions, PromptSet, PromptVariant,
};
use pcam::suites::{
    blur_soundness, glyph_swap, image_rows, summarize_faithfulness, summarize_pointing,
    summarize_swaps, summarize_taxonomy, taxonomy_suite, variant_ordering, ImageRow, Trained,
};
use pcam::tensor::{finite_difference_gradient, max_relative_error, Tape};
use pcam::train::{layer_sweep, train_prompts};
use pcam::vit::{patch_matrix, ViTConfig, ViTModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SEED: u64 = 7;

fn report(n: usize, name: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let line = format!("criterion {n:>2} {verdict}  {name}: {detail}\n");
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

struct Shared {
    config: PipelineConfig,
    backbone: Backbone,
    run: PromptRun,
    seconds: f64,
    checksum_before: String,
    rows: Vec<ImageRow>,
}

impl Shared {
    fn trained(&self) -> Trained<'_> {
        Trained {
            model: &self.backbone.model,
            prompts: &self.run.prompts,
            variant: self.config.variant,
            options: self.config.options,
        }
    }
}

fn shared() -> &'static Shared {
    static SHARED: OnceLock<Shared> = OnceLock::new();
    SHARED.get_or_init(|| {
        let config = PipelineConfig::synth8(SEED);
        let start = Instant::now();
        let backbone = pretrain_stage(&config).unwrap();
        let checksum_before = backbone.model.checksum();
        let run = prompt_stage(&backbone, &config).unwrap();
        let seconds = start.elapsed().as_secs_f64();
        let mut s = Shared {
            config,
            backbone,
            run,
            seconds,
            checksum_before,
            rows: Vec::new(),
        };
        let ds = &s.backbone.data.dataset;
        s.rows = image_rows(&s.trained(), &ds.test, mean_color(&ds.train), 4).unwrap();
        s
    })
}

fn random_weights<'a>(
    tensors: impl IntoIterator<Item = &'a mut pcam::tensor::Tensor>,
    rng: &mut ChaCha8Rng,
) {
    for t in tensors {
        t.data_mut()
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-0.5..0.5));
    }
}

#[test]
fn c01_gradient_correctness() {
    let _g = serial();
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let configs = 24;
    for case in 0..configs {
        let layers = rng.random_range(1..=2);
        let (embed_dim, heads) = [(4, 1), (4, 2), (8, 2), (8, 4)][rng.random_range(0..4)];
        let image_size = [2, 4][rng.random_range(0..2)];
        let classes = rng.random_range(1..=3);
        let cfg = ViTConfig {
            layers,
            embed_dim,
            heads,
            mlp_dim: rng.random_range(2..=8),
            patch_size: 2,
            image_size,
            channels: 3,
            classes,
            ln_eps: 1e-5,
        };
        let variant = match rng.random_range(0..3) {
            0 => PromptVariant::Shallow,
            1 => PromptVariant::Deep,
            _ => PromptVariant::AtLayer(rng.random_range(1..=layers)),
        };
        let options = ForwardOptions {
            prompt_isolation: rng.random_bool(0.5),
            hide_cls: rng.random_bool(0.5),
        };
        let mut model = ViTModel::init(&cfg, case).unwrap();
        random_weights(model.tensors_mut(), &mut rng);
        model.freeze();
        let mut prompts = PromptSet::init(&cfg, classes, variant, case).unwrap();
        random_weights(prompts.tensors_mut(), &mut rng);
        let batch = rng.random_range(1..=2);
        let images: Vec<pcam::data::Image> = (0..batch)
            .map(|_| {
                let data = (0..image_size * image_size * 3)
                    .map(|_| rng.random())
                    .collect();
                pcam::data::Image::new(image_size, image_size, data).unwrap()
            })
            .collect();
        let refs: Vec<&pcam::data::Image> = images.iter().collect();
        let pm = patch_matrix(&refs, &cfg).unwrap();
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        let loss_of = |p: &PromptSet, grads: bool| {
            let mut tape = Tape::new();
            let mv = model.attach(&mut tape, false);
            let pv = p.attach(&mut tape, grads);
            let x = tape.constant(pm.clone());
            let tr = prompted_forward_vars(&mut tape, &mv, &pv, variant, options, x, batch, vec![])
                .unwrap();
            let l = tape.cross_entropy(tr.scores, &labels).unwrap();
            (tape, pv, l)
        };
        let (tape, pv, l) = loss_of(&prompts, true);
        let grads = tape.backward(l).unwrap();
        for (i, &var) in pv.all().iter().enumerate() {
            let analytic = grads.get(var).unwrap().to_vec();
            let x = prompts.tensors_mut()[i].clone();
            let numeric = finite_difference_gradient(
                |p| {
                    let mut ps = prompts.clone();
                    *ps.tensors_mut()[i] = p.clone();
                    let (t, _, l) = loss_of(&ps, false);
                    t.value(l).data()[0]
                },
                &x,
                1e-4,
            );
            worst = worst.max(max_relative_error(&analytic, numeric.data(), 1e-6));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let pass = worst <= 1e-4 && secs < 60.0;
    report(
        1,
        "gradient correctness",
        pass,
        format!("{configs} configs, max relative error {worst:.2e}, {secs:.1}s"),
    );
    assert!(pass);
}

#[test]
fn c02_frozen_backbone() {
    let _g = serial();
    let s = shared();
    let unchanged = s.checksum_before == s.run.checksum_after;
    // Structural check: prompted forward on a frozen model records no
    // backbone gradient at all.
    let img = &s.backbone.data.dataset.train[0].image;
    let mut tape = Tape::new();
    let mv = s.backbone.model.attach(&mut tape, true);
    let pv = s.run.prompts.attach(&mut tape, true);
    let x = tape.constant(patch_matrix(&[img], &s.backbone.model.config).unwrap());
    let tr = prompted_forward_vars(
        &mut tape,
        &mv,
        &pv,
        s.config.variant,
        s.config.options,
        x,
        1,
        vec![],
    )
    .unwrap();
    let l = tape.cross_entropy(tr.scores, &[0]).unwrap();
    let grads = tape.backward(l).unwrap();
    let no_backbone_grads = mv.all().iter().all(|&v| grads.get(v).is_none());
    let prompt_grads = pv.all().iter().all(|&v| grads.get(v).is_some());
    let mut unfrozen = s.backbone.model.clone();
    unfrozen.frozen = false;
    let refuses = train_prompts(
        &unfrozen,
        &s.backbone.data.dataset,
        s.config.variant,
        s.config.options,
        &s.config.prompt,
    )
    .is_err();
    let pass = unchanged && no_backbone_grads && prompt_grads && refuses;
    report(
        2,
        "frozen backbone",
        pass,
        format!(
            "checksum {} -> {}, backbone grads absent {no_backbone_grads}, unfrozen model refused {refuses}",
            &s.checksum_before[..12],
            &s.run.checksum_after[..12]
        ),
    );
    assert!(pass);
}

#[test]
fn c03_synth8_end_to_end() {
    let _g = serial();
    let s = shared();
    let ds = &s.backbone.data.dataset;
    let pretrain_acc = pcam::train::backbone_accuracy(&s.backbone.model, &ds.train).unwrap();
    let deep_acc = pcam::train::prompt_accuracy(
        &s.backbone.model,
        &s.run.prompts,
        s.config.variant,
        s.config.options,
        &ds.test,
    )
    .unwrap();
    let cfg = &s.backbone.model.config;
    let shape_ok = ds.classes == 8
        && ds.train.len() == 800
        && ds.test.len() == 240
        && cfg.image_size == 32
        && cfg.patch_size == 8
        && (cfg.layers, cfg.embed_dim, cfg.heads) == (4, 64, 4)
        && s.config.variant == PromptVariant::Deep;
    let pass = shape_ok && pretrain_acc >= 0.95 && deep_acc >= 0.9 && s.seconds <= 600.0;
    report(
        3,
        "synth8 end-to-end",
        pass,
        format!(
            "pretrain train acc {pretrain_acc:.3}, Deep test acc {deep_acc:.3}, {:.0}s wall-clock",
            s.seconds
        ),
    );
    assert!(pass);
}

#[test]
fn c04_localization() {
    let _g = serial();
    let p = summarize_pointing(&shared().rows);
    let pass = p.hit_rate >= 0.8 && p.mass_ratio >= 3.0;
    report(
        4,
        "localization",
        pass,
        format!(
            "hit rate {:.3} over {} images ({} with survivors), mass {:.3} vs uniform {:.3} (ratio {:.2})",
            p.hit_rate, p.images, p.with_survivors, p.mean_mass, p.uniform_mass, p.mass_ratio
        ),
    );
    assert!(pass);
}

#[test]
fn c05_faithfulness_direction() {
    let _g = serial();
    let f = summarize_faithfulness(&shared().rows);
    let pass = f.gap >= 0.15 && f.uniform_gap <= 0.05;
    report(
        5,
        "faithfulness direction",
        pass,
        format!(
            "insertion {:.3} deletion {:.3} gap {:.3}; uniform gap {:.3} over {} images",
            f.insertion, f.deletion, f.gap, f.uniform_gap, f.images
        ),
    );
    assert!(pass);
}

#[test]
fn c06_greedy_blurring_soundness() {
    let _g = serial();
    let s = shared();
    let b = blur_soundness(&s.trained(), &s.backbone.data.dataset.test, 50, SEED).unwrap();
    let pass = b.images == 50 && b.holds();
    report(
        6,
        "greedy blurring soundness",
        pass,
        format!(
            "{} images, {} with survivors, {} surviving heads checked, {} violations, {} restore mismatches",
            b.images, b.with_survivors, b.heads_checked, b.violations, b.restore_mismatches
        ),
    );
    assert!(pass);
}

#[test]
fn c07_counterfactual_flip() {
    let _g = serial();
    let s = shared();
    let w = summarize_swaps(&glyph_swap(&s.backbone.data, &s.trained(), 4, SEED).unwrap());
    let pass = w.flip_rate >= 0.7 && w.relative_drop >= 0.5;
    report(
        7,
        "counterfactual flip",
        pass,
        format!(
            "flip rate {:.3} over {} images, mass {:.3} -> {:.3} (relative drop {:.3})",
            w.flip_rate, w.images, w.mean_mass_before, w.mean_mass_after, w.relative_drop
        ),
    );
    assert!(pass);
}

#[test]
fn c08_detour_properties() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let simplex = |rng: &mut ChaCha8Rng, m: usize| {
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.01..1.0)).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|v| v / total).collect::<Vec<f64>>()
    };
    let (m, d, c) = (6, 5, 4);
    let vec = |rng: &mut ChaCha8Rng, n: usize| {
        (0..n)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect::<Vec<f64>>()
    };

    // Identical value columns: every class attention mixes to the same vector.
    let v = vec(&mut rng, d);
    let mut spread: f64 = 0.0;
    for _ in 0..100 {
        let layer = SimplifiedLayer {
            values: vec![v.clone(); m],
            alpha_star: simplex(&mut rng, m),
            alpha: (0..c).map(|_| simplex(&mut rng, m)).collect(),
            w_fc: (0..c).map(|_| vec(&mut rng, d)).collect(),
            w_shared: vec(&mut rng, d),
        };
        let s = simplified_layer_scores(&layer, ScoreRule::PromptCam).unwrap();
        let (lo, hi) = s
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
                (a.min(x), b.max(x))
            });
        spread = spread.max(hi - lo);
    }

    // Aligned values (positive multiples of one direction): the conventional
    // prediction cannot depend on the [CLS] attention.
    let u = vec(&mut rng, d);
    let values: Vec<Vec<f64>> = (0..m)
        .map(|_| {
            let k = rng.random_range(0.1..2.0);
            u.iter().map(|x| k * x).collect()
        })
        .collect();
    let w_fc: Vec<Vec<f64>> = (0..c).map(|_| vec(&mut rng, d)).collect();
    let mut predictions = std::collections::BTreeSet::new();
    for _ in 0..100 {
        let layer = SimplifiedLayer {
            values: values.clone(),
            alpha_star: simplex(&mut rng, m),
            alpha: vec![vec![1.0 / m as f64; m]; c],
            w_fc: w_fc.clone(),
            w_shared: vec![0.0; d],
        };
        let s = simplified_layer_scores(&layer, ScoreRule::Conventional).unwrap();
        predictions.insert(pcam::tensor::argmax(&s));
    }
    let pass = spread <= 1e-12 && predictions.len() == 1;
    report(
        8,
        "detour properties",
        pass,
        format!(
            "prompt-cam score spread {spread:.1e} over 100 layers; conventional predictions over 100 alpha* draws: {predictions:?}"
        ),
    );
    assert!(pass);
}

#[test]
fn c09_variant_ordering() {
    let _g = serial();
    let s = shared();
    let ds = &s.backbone.data.dataset;
    let ordering = variant_ordering(
        &s.backbone.model,
        ds,
        s.config.options,
        &s.config.prompt,
        &[7, 8, 9],
    )
    .unwrap();
    let sweep = layer_sweep(&s.backbone.model, ds, s.config.options, &s.config.prompt).unwrap();
    let dir = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("layer_sweep.json");
    let body = serde_json::json!({ "variant_ordering": ordering, "layer_sweep": sweep });
    std::fs::write(&path, serde_json::to_vec_pretty(&body).unwrap()).unwrap();
    let pass = ordering.majority() && sweep.len() == s.backbone.model.config.layers;
    let runs: Vec<String> = ordering
        .runs
        .iter()
        .map(|r| {
            format!(
                "seed {}: deep {:.3} shallow {:.3}",
                r.seed, r.deep, r.shallow
            )
        })
        .collect();
    let layers: Vec<String> = sweep
        .iter()
        .map(|e| format!("{}:{:.3}", e.layer, e.test_acc))
        .collect();
    report(
        9,
        "variant ordering",
        pass,
        format!(
            "{}; Deep>=Shallow on {}/3; sweep [{}] written to {}",
            runs.join(", "),
            ordering.deep_wins,
            layers.join(" "),
            path.display()
        ),
    );
    assert!(pass);
}

#[test]
fn c10_taxonomy_direction() {
    let _g = serial();
    let s = shared();
    let rows = taxonomy_suite(
        &s.backbone.data,
        &s.backbone.model,
        s.config.variant,
        s.config.options,
        &s.config.prompt,
    )
    .unwrap();
    let t = summarize_taxonomy(&rows);
    let pass = t.genus_level_mean > t.species_level_mean && (t.p_value < 0.05 || t.win_rate >= 0.6);
    report(
        10,
        "taxonomy direction",
        pass,
        format!(
            "genus-level mass {:.3} vs species-level {:.3}; genus wins {}/{} ({:.3}), sign-test p {:.2e}",
            t.genus_level_mean, t.species_level_mean, t.genus_wins, t.images, t.win_rate, t.p_value
        ),
    );
    assert!(pass);
}

/// Checkpoint, metrics and heatmap bytes from one small run.
fn small_run(seed: u64) -> Vec<Vec<u8>> {
    let mut config = PipelineConfig::synth8(seed);
    config.synth = SynthSpec {
        train_per_class: 8,
        test_per_class: 2,
        ..config.synth
    };
    config.pretrain.epochs = 2;
    config.pretrain.warmup_epochs = 1;
    config.prompt.epochs = 2;
    config.prompt.warmup_epochs = 1;
    let backbone = pretrain_stage(&config).unwrap();
    let run = prompt_stage(&backbone, &config).unwrap();
    let meta = PromptMeta {
        variant: config.variant,
        options: config.options,
        recipe: Some(config.prompt.clone()),
        classes: backbone.data.dataset.classes,
        embed_dim: backbone.model.config.embed_dim,
    };
    let mut out = vec![
        model_checkpoint(&backbone.model)
            .unwrap()
            .to_bytes()
            .unwrap(),
        prompt_checkpoint(&run.prompts, &meta)
            .unwrap()
            .to_bytes()
            .unwrap(),
        serde_json::to_vec(&(&backbone.log, &run.log)).unwrap(),
    ];
    let sample = &backbone.data.dataset.test[0];
    let inf = prompted_inference(
        &backbone.model,
        &run.prompts,
        config.variant,
        config.options,
        &[&sample.image],
    )
    .unwrap();
    let stack = extract_class_attention(&inf, sample.label, Scaling::ForwardConsistent).unwrap();
    let cfg = &backbone.model.config;
    for map in &stack.maps {
        out.push(pnm::encode_ppm(&render_heatmap(
            map,
            cfg.grid(),
            cfg.image_size,
        )));
    }
    out
}

#[test]
fn c11_determinism() {
    let _g = serial();
    let a = small_run(SEED);
    let b = small_run(SEED);
    let other = small_run(SEED + 1);
    let identical = a == b;
    let seed_matters = a[0] != other[0];
    let bytes: usize = a.iter().map(Vec::len).sum();
    let pass = identical && seed_matters;
    report(
        11,
        "determinism",
        pass,
        format!(
            "{} artifacts ({bytes} bytes) identical across two runs: {identical}; different seed differs: {seed_matters}",
            a.len()
        ),
    );
    assert!(pass);
}
