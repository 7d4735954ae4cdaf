use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pcam::data::SynthSpec;
use pcam::interpret::Scaling;
use pcam::pipeline::PipelineConfig;
use pcam::prompt::{ForwardOptions, PromptVariant};
use pcam::train::TrainRecipe;
use pcam::vit::ViTConfig;
use serde::{Deserialize, Serialize};

/// Everything a run depends on. Each subcommand writes it, inside a
/// [`RunRecord`], to `<subcommand>.run.json` in the output directory, and
/// `--config` accepts that file back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub subcommand: String,
    /// A dataset directory, or `synth8` to generate the benchmark in memory.
    pub dataset: String,
    /// Where checkpoints are written (train) or read (visualize, evaluate).
    /// Defaults to the output directory.
    pub checkpoints: Option<PathBuf>,
    pub out: PathBuf,
    pub synth: SynthSpec,
    pub vit: ViTOverrides,
    pub variant: PromptVariant,
    pub pretrain: TrainRecipe,
    pub prompt: TrainRecipe,
    pub seed: u64,
    pub prompt_isolation: bool,
    pub hide_cls: bool,
    pub paper_literal_scaling: bool,
    pub top_k: usize,
    /// Train a linear probe on `[CLS]` instead of prompts.
    pub linear_probe: bool,
}

/// Reproducibility record written next to every run's outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: RunConfig,
    pub git_describe: String,
    pub seed: u64,
    pub version: String,
}

impl RunRecord {
    pub fn new(config: &RunConfig) -> Self {
        Self {
            config: config.clone(),
            git_describe: git_describe(),
            seed: config.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTOverrides {
    pub layers: Option<usize>,
    pub embed_dim: Option<usize>,
    pub heads: Option<usize>,
    pub mlp_dim: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let p = PipelineConfig::synth8(7);
        Self {
            subcommand: String::new(),
            dataset: "synth8".into(),
            checkpoints: None,
            out: PathBuf::from("out"),
            synth: p.synth,
            vit: ViTOverrides::default(),
            variant: p.variant,
            pretrain: p.pretrain,
            prompt: p.prompt,
            seed: p.seed,
            prompt_isolation: p.options.prompt_isolation,
            hide_cls: p.options.hide_cls,
            paper_literal_scaling: false,
            top_k: 4,
            linear_probe: false,
        }
    }
}

impl RunConfig {
    /// Reads a plain config or the `config` field of a run record.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let value: serde_json::Value = serde_json::from_slice(&bytes)
            .with_context(|| format!("parsing {}", path.display()))?;
        let inner = match value.get("config") {
            Some(c) if value.get("git_describe").is_some() => c.clone(),
            _ => value,
        };
        serde_json::from_value(inner)
            .with_context(|| format!("reading config from {}", path.display()))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoints.clone().unwrap_or_else(|| self.out.clone())
    }

    pub fn options(&self) -> ForwardOptions {
        ForwardOptions {
            prompt_isolation: self.prompt_isolation,
            hide_cls: self.hide_cls,
        }
    }

    pub fn scaling(&self) -> Scaling {
        if self.paper_literal_scaling {
            Scaling::PaperLiteral
        } else {
            Scaling::ForwardConsistent
        }
    }

    pub fn vit(&self) -> ViTConfig {
        let base = ViTConfig::synth8();
        ViTConfig {
            layers: self.vit.layers.unwrap_or(base.layers),
            embed_dim: self.vit.embed_dim.unwrap_or(base.embed_dim),
            heads: self.vit.heads.unwrap_or(base.heads),
            mlp_dim: self.vit.mlp_dim.unwrap_or(base.mlp_dim),
            image_size: self.synth.image_size,
            patch_size: self.synth.patch_size,
            classes: self.synth.classes,
            ..base
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            seed: self.seed,
            synth: self.synth.clone(),
            vit: self.vit(),
            pretrain: self.pretrain.clone(),
            prompt: self.prompt.clone(),
            variant: self.variant,
            options: self.options(),
        }
    }

    /// Every problem with the configuration, reported together.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut collect = |r: pcam::Result<()>, what: &str| {
            if let Err(e) = r {
                match e {
                    pcam::Error::Config(ps) => {
                        problems.extend(ps.into_iter().map(|p| format!("{what}: {p}")))
                    }
                    other => problems.push(format!("{what}: {other}")),
                }
            }
        };
        collect(self.pretrain.validate(), "pretrain");
        collect(self.prompt.validate(), "prompt");
        collect(self.vit().validate(), "vit");
        if self.dataset == "synth8" {
            collect(self.synth.validate(), "synth");
        }
        let vit = self.vit();
        if let Err(e) = self.variant.injection_layer(vit.layers) {
            problems.push(format!("variant: {e}"));
        }
        if self.top_k == 0 || self.top_k > vit.heads {
            problems.push(format!(
                "top_k must lie in 1..={}, got {}",
                vit.heads, self.top_k
            ));
        }
        if self.dataset != "synth8" && !Path::new(&self.dataset).join("manifest.json").is_file() {
            problems.push(format!("dataset {:?} has no manifest.json", self.dataset));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            bail!("invalid configuration:\n  - {}", problems.join("\n  - "))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 3, "top_k": 2}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.top_k, 2);
        assert_eq!(c.dataset, "synth8");
    }

    #[test]
    fn round_trips_through_json() {
        let c = RunConfig {
            variant: PromptVariant::AtLayer(2),
            ..RunConfig::default()
        };
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn all_problems_are_listed() {
        let mut c = RunConfig::default();
        c.prompt.momentum = 1.5;
        c.top_k = 0;
        c.dataset = "/nonexistent".into();
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("momentum"), "{msg}");
        assert!(msg.contains("top_k"), "{msg}");
        assert!(msg.contains("manifest.json"), "{msg}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sed": 3}"#).is_err());
    }
}
