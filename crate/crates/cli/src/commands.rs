use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use pcam::checkpoint::{
    model_checkpoint, model_from_checkpoint, prompt_checkpoint, prompts_from_checkpoint,
    Checkpoint, PromptMeta,
};
use pcam::data::{generate_synth_traits, mean_color, pnm, Sample, SynthTraits};
use pcam::evaluate::linear_probe_baseline;
use pcam::interpret::{
    blurred_scores, explain_misclassification, extract_class_attention, greedy_trait_ranking,
    head_report, render_heatmap, AttentionStack, TraitRanking,
};
use pcam::pipeline::{pretrain_on, prompt_stage};
use pcam::prompt::{prompted_inference, PromptSet};
use pcam::suites::{
    image_rows, summarize_faithfulness, summarize_pointing, summarize_taxonomy, taxonomy_suite,
    ImageRow, Trained,
};
use pcam::train::{layer_sweep, prompt_accuracy, TrainLog};
use pcam::vit::ViTModel;
use serde::Serialize;

use crate::config::{RunConfig, RunRecord};
use crate::{ClassSelector, Split, Suite};

pub const BACKBONE_FILE: &str = "backbone.ckpt";
pub const PROMPTS_FILE: &str = "prompts.ckpt";
pub const PROBE_FILE: &str = "probe.ckpt";

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn prepare_out(config: &RunConfig) -> Result<()> {
    fs::create_dir_all(&config.out)
        .with_context(|| format!("creating {}", config.out.display()))?;
    let record = RunRecord::new(config);
    write_json(
        &config.out.join(format!("{}.run.json", config.subcommand)),
        &record,
    )
}

fn load_data(config: &RunConfig) -> Result<SynthTraits> {
    if config.dataset == "synth8" {
        Ok(generate_synth_traits(&config.synth, config.seed)?)
    } else {
        SynthTraits::load_dir(Path::new(&config.dataset))
            .with_context(|| format!("loading dataset {}", config.dataset))
    }
}

pub fn generate(config: &RunConfig) -> Result<()> {
    let data = generate_synth_traits(&config.synth, config.seed)?;
    prepare_out(config)?;
    data.write_dir(&config.out)?;
    println!(
        "wrote {} images to {}",
        data.manifest.images.len(),
        config.out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainMetrics {
    pretrain: TrainLog,
    prompts: Option<TrainLog>,
    probe: Option<TrainLog>,
    backbone_checksum_before: String,
    backbone_checksum_after: String,
    test_accuracy: Option<f64>,
}

pub fn train(config: &RunConfig) -> Result<()> {
    let data = load_data(config)?;
    prepare_out(config)?;
    let ckpt_dir = config.checkpoint_dir();
    fs::create_dir_all(&ckpt_dir)?;
    let pipeline = config.pipeline();
    let backbone = pretrain_on(data, &pipeline)?;
    model_checkpoint(&backbone.model)?.save(&ckpt_dir.join(BACKBONE_FILE))?;
    let before = backbone.model.checksum();
    let mut metrics = TrainMetrics {
        pretrain: backbone.log.clone(),
        prompts: None,
        probe: None,
        backbone_checksum_before: before.clone(),
        backbone_checksum_after: before,
        test_accuracy: None,
    };
    if config.linear_probe {
        let probe = linear_probe_baseline(&backbone.model, &backbone.data.dataset, &config.prompt)?;
        let ckpt = Checkpoint {
            kind: "linear-probe".into(),
            meta: serde_json::json!({ "classes": backbone.data.dataset.classes }),
            tensors: vec![
                ("w".into(), probe.head.w.clone()),
                ("b".into(), probe.head.b.clone()),
            ],
        };
        ckpt.save(&ckpt_dir.join(PROBE_FILE))?;
        metrics.test_accuracy = Some(probe.accuracy);
        metrics.probe = Some(probe.log);
    } else {
        let run = prompt_stage(&backbone, &pipeline)?;
        let meta = PromptMeta {
            variant: config.variant,
            options: config.options(),
            recipe: Some(config.prompt.clone()),
            classes: backbone.data.dataset.classes,
            embed_dim: backbone.model.config.embed_dim,
        };
        prompt_checkpoint(&run.prompts, &meta)?.save(&ckpt_dir.join(PROMPTS_FILE))?;
        metrics.test_accuracy = if backbone.data.dataset.test.is_empty() {
            None
        } else {
            Some(prompt_accuracy(
                &backbone.model,
                &run.prompts,
                config.variant,
                config.options(),
                &backbone.data.dataset.test,
            )?)
        };
        metrics.backbone_checksum_after = run.checksum_after;
        metrics.prompts = Some(run.log);
    }
    if metrics.backbone_checksum_before != metrics.backbone_checksum_after {
        bail!("backbone changed during prompt training");
    }
    write_json(&config.out.join("metrics.json"), &metrics)?;
    if let Some(acc) = metrics.test_accuracy {
        println!("test accuracy {acc:.4}");
    }
    Ok(())
}

struct Loaded {
    data: SynthTraits,
    model: ViTModel,
    prompts: PromptSet,
    meta: PromptMeta,
}

impl Loaded {
    fn trained(&self) -> Trained<'_> {
        Trained {
            model: &self.model,
            prompts: &self.prompts,
            variant: self.meta.variant,
            options: self.meta.options,
        }
    }
}

fn load_trained(config: &RunConfig) -> Result<Loaded> {
    let dir = config.checkpoint_dir();
    let read = |name: &str| -> Result<Checkpoint> {
        let p = dir.join(name);
        if !p.is_file() {
            bail!("missing checkpoint {}; run `pcam train` first", p.display());
        }
        Ok(Checkpoint::load(&p)?)
    };
    let model = model_from_checkpoint(&read(BACKBONE_FILE)?)?;
    let (prompts, meta) = prompts_from_checkpoint(&read(PROMPTS_FILE)?)?;
    let data = load_data(config)?;
    if data.dataset.classes != meta.classes {
        bail!(
            "dataset has {} classes but the prompts were trained for {}",
            data.dataset.classes,
            meta.classes
        );
    }
    Ok(Loaded {
        data,
        model,
        prompts,
        meta,
    })
}

fn find_sample<'a>(data: &'a SynthTraits, id: &str) -> Option<&'a Sample> {
    data.dataset
        .test
        .iter()
        .chain(&data.dataset.train)
        .find(|s| s.id == id)
}

/// Heads ordered by how far blurring each one alone lowers `s[class]`.
/// Used when `class` is not the prediction, where greedy blurring does
/// not apply. The order is stored as a reversed blur order so that
/// `importance()` lists the most important head first.
fn single_blur_ranking(
    model: &ViTModel,
    prompts: &PromptSet,
    inf: &pcam::prompt::Inference,
    class: usize,
) -> Result<TraitRanking> {
    let base = inf.sample_scores(0)[class];
    let mut drops = Vec::with_capacity(inf.heads);
    for h in 0..inf.heads {
        let s = blurred_scores(model, prompts, inf, class, &[h])?;
        drops.push((h, base - s[class]));
    }
    drops.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    Ok(TraitRanking {
        class,
        blur_order: drops.iter().map(|d| d.0).collect(),
        surviving: Vec::new(),
        base_scores: inf.sample_scores(0).to_vec(),
        steps: Vec::new(),
    })
}

pub fn heatmap_name(id: &str, class: usize, head: usize) -> String {
    format!("{id}_c{class}_head{head}.ppm")
}

pub fn composite_name(id: &str, class: usize, top_k: usize) -> String {
    format!("{id}_c{class}_top{top_k}.ppm")
}

fn composite(stack: &AttentionStack, heads: &[usize]) -> Vec<f64> {
    let m = stack.maps[0].len();
    let mut out = vec![0.0; m];
    for &h in heads {
        for (o, v) in out.iter_mut().zip(&stack.maps[h]) {
            *o += v / heads.len() as f64;
        }
    }
    out
}

pub fn visualize(config: &RunConfig, ids: &[String], selector: ClassSelector) -> Result<()> {
    let loaded = load_trained(config)?;
    let samples: Vec<&Sample> = ids
        .iter()
        .map(|id| find_sample(&loaded.data, id).ok_or_else(|| anyhow!("unknown image id {id:?}")))
        .collect::<Result<_>>()?;
    if let ClassSelector::Class(k) = selector {
        if k >= loaded.meta.classes {
            bail!("class {k} outside 0..{}", loaded.meta.classes);
        }
    }
    prepare_out(config)?;
    let out = config.out.join("visualize");
    fs::create_dir_all(&out)?;
    let t = loaded.trained();
    let cfg = &loaded.model.config;
    let (grid, size) = (cfg.grid(), cfg.image_size);
    for s in samples {
        let inf = prompted_inference(t.model, t.prompts, t.variant, t.options, &[&s.image])?;
        let predicted = inf.predicted(0);
        let class = match selector {
            ClassSelector::True => s.label,
            ClassSelector::Predicted => predicted,
            ClassSelector::Class(k) => k,
        };
        let stack = extract_class_attention(&inf, class, config.scaling())?;
        let ranking = if class == predicted {
            greedy_trait_ranking(t.model, t.prompts, &inf, class)?
        } else {
            single_blur_ranking(t.model, t.prompts, &inf, class)?
        };
        for (h, map) in stack.maps.iter().enumerate() {
            pnm::save_ppm(
                &render_heatmap(map, grid, size),
                &out.join(heatmap_name(&s.id, class, h)),
            )?;
        }
        let top: Vec<usize> = ranking
            .importance()
            .into_iter()
            .take(config.top_k)
            .collect();
        pnm::save_ppm(
            &render_heatmap(&composite(&stack, &top), grid, size),
            &out.join(composite_name(&s.id, class, config.top_k)),
        )?;
        let mask = (!s.trait_mask.is_empty()).then_some(&s.trait_mask);
        let report = head_report(&s.id, &stack, &ranking, mask, cfg.patch_size);
        write_json(&out.join(format!("{}_c{class}.json", s.id)), &report)?;
        if predicted != s.label {
            let mis = explain_misclassification(
                &inf,
                &s.id,
                s.label,
                mask,
                cfg.patch_size,
                config.scaling(),
            )?;
            write_json(&out.join(format!("{}_misclassified.json", s.id)), &mis)?;
        }
    }
    Ok(())
}

/// Flat CSV form of [`ImageRow`].
#[derive(Serialize)]
struct CsvRow<'a> {
    id: &'a str,
    label: usize,
    predicted: usize,
    correct: bool,
    occluded: bool,
    top_head: usize,
    surviving: String,
    pointing_hit: bool,
    mass_in_mask: f64,
    mask_fraction: f64,
    insertion_auc: f64,
    deletion_auc: f64,
    uniform_insertion_auc: f64,
    uniform_deletion_auc: f64,
}

impl<'a> From<&'a ImageRow> for CsvRow<'a> {
    fn from(r: &'a ImageRow) -> Self {
        Self {
            id: &r.id,
            label: r.label,
            predicted: r.predicted,
            correct: r.correct,
            occluded: r.occluded,
            top_head: r.top_head,
            surviving: r
                .surviving
                .iter()
                .map(|h| h.to_string())
                .collect::<Vec<_>>()
                .join(";"),
            pointing_hit: r.pointing_hit,
            mass_in_mask: r.mass_in_mask,
            mask_fraction: r.mask_fraction,
            insertion_auc: r.insertion_auc,
            deletion_auc: r.deletion_auc,
            uniform_insertion_auc: r.uniform_insertion_auc,
            uniform_deletion_auc: r.uniform_deletion_auc,
        }
    }
}

#[derive(Serialize)]
struct AccuracyReport {
    split: &'static str,
    images: usize,
    accuracy: f64,
}

pub fn evaluate(config: &RunConfig, suite: Suite, split: Split) -> Result<()> {
    let loaded = load_trained(config)?;
    prepare_out(config)?;
    let t = loaded.trained();
    let ds = &loaded.data.dataset;
    let out = &config.out;
    match suite {
        Suite::Faithfulness | Suite::Pointing => {
            let rows = image_rows(&t, &ds.test, mean_color(&ds.train), config.top_k)?;
            let csv_rows: Vec<CsvRow> = rows.iter().map(CsvRow::from).collect();
            if suite == Suite::Faithfulness {
                write_csv(&out.join("faithfulness.csv"), &csv_rows)?;
                let summary = summarize_faithfulness(&rows);
                println!(
                    "insertion {:.4} deletion {:.4} gap {:.4}",
                    summary.insertion, summary.deletion, summary.gap
                );
                write_json(&out.join("faithfulness.json"), &summary)?;
            } else {
                write_csv(&out.join("pointing.csv"), &csv_rows)?;
                let summary = summarize_pointing(&rows);
                println!(
                    "hit rate {:.4} mass ratio {:.2}",
                    summary.hit_rate, summary.mass_ratio
                );
                write_json(&out.join("pointing.json"), &summary)?;
            }
        }
        Suite::Accuracy => {
            let (name, samples) = match split {
                Split::Train => ("train", &ds.train),
                Split::Test => ("test", &ds.test),
            };
            let accuracy = prompt_accuracy(t.model, t.prompts, t.variant, t.options, samples)?;
            println!("{name} accuracy {accuracy:.4}");
            write_json(
                &out.join("accuracy.json"),
                &AccuracyReport {
                    split: name,
                    images: samples.len(),
                    accuracy,
                },
            )?;
        }
        Suite::LayerSweep => {
            let sweep = layer_sweep(t.model, ds, config.options(), &config.prompt)?;
            for e in &sweep {
                println!("layer {} accuracy {:.4}", e.layer, e.test_acc);
            }
            write_csv(&out.join("layer_sweep.csv"), &sweep)?;
        }
        Suite::Taxonomy => {
            let rows = taxonomy_suite(&loaded.data, t.model, t.variant, t.options, &config.prompt)?;
            write_csv(&out.join("taxonomy.csv"), &rows)?;
            let summary = summarize_taxonomy(&rows);
            println!(
                "genus-level mass {:.4} species-level mass {:.4} win rate {:.3} p {:.2e}",
                summary.genus_level_mean,
                summary.species_level_mean,
                summary.win_rate,
                summary.p_value
            );
            write_json(&out.join("taxonomy.json"), &summary)?;
        }
    }
    Ok(())
}
