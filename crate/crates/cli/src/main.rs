use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use pcam::prompt::PromptVariant;

mod commands;
mod config;

use config::RunConfig;

#[derive(Parser)]
#[command(
    name = "pcam",
    version,
    about = "Class-specific prompt attention maps on a frozen ViT"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a SynthTraits dataset (PPM images, PGM masks, manifest.json).
    Generate(Common),
    /// Pretrain and freeze the backbone, then train prompts or a linear probe.
    Train(Common),
    /// Per-head heatmaps, a top-k composite and a JSON report per image.
    Visualize {
        #[command(flatten)]
        common: Common,
        /// Comma-separated image ids.
        #[arg(long, value_delimiter = ',', required = true)]
        images: Vec<String>,
        /// `true`, `predicted`, or a class index.
        #[arg(long, default_value = "true")]
        class: ClassSelector,
    },
    /// Run an evaluation suite over the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        suite: Suite,
        /// Split scored by the accuracy suite.
        #[arg(long, default_value = "test")]
        split: Split,
    },
}

/// Flags shared by every subcommand. Flags override `--config`.
#[derive(Args, Clone, Default)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// shallow, deep, or at-layer=<i>.
    #[arg(long)]
    variant: Option<PromptVariant>,
    /// A dataset directory, or `synth8`.
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    checkpoints: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    top_k: Option<usize>,
    /// Epochs for both training stages.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    prompt_isolation: Option<bool>,
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    hide_cls: Option<bool>,
    /// Use D' instead of sqrt(D') when extracting maps for display.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    paper_literal_scaling: Option<bool>,
    #[arg(long)]
    linear_probe: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassSelector {
    True,
    Predicted,
    Class(usize),
}

impl std::str::FromStr for ClassSelector {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "true" => Ok(Self::True),
            "predicted" => Ok(Self::Predicted),
            _ => s
                .parse()
                .map(Self::Class)
                .map_err(|_| format!("expected true, predicted or a class index, got {s:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Faithfulness,
    Pointing,
    Accuracy,
    LayerSweep,
    Taxonomy,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Test,
}

fn resolve(name: &str, common: &Common) -> anyhow::Result<RunConfig> {
    let mut c = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    c.subcommand = name.to_string();
    if let Some(v) = common.seed {
        c.seed = v;
    }
    if let Some(v) = common.variant {
        c.variant = v;
    }
    if let Some(v) = &common.dataset {
        c.dataset = v.clone();
    }
    if let Some(v) = &common.checkpoints {
        c.checkpoints = Some(v.clone());
    }
    if let Some(v) = &common.out {
        c.out = v.clone();
    }
    if let Some(v) = common.top_k {
        c.top_k = v;
    }
    if let Some(e) = common.epochs {
        c.pretrain.epochs = e;
        c.prompt.epochs = e;
        if e == 0 {
            c.pretrain.warmup_epochs = 0;
            c.prompt.warmup_epochs = 0;
        }
    }
    if let Some(v) = common.prompt_isolation {
        c.prompt_isolation = v;
    }
    if let Some(v) = common.hide_cls {
        c.hide_cls = v;
    }
    if let Some(v) = common.paper_literal_scaling {
        c.paper_literal_scaling = v;
    }
    if common.linear_probe {
        c.linear_probe = true;
    }
    // One seed drives every stream.
    c.pretrain.seed = c.seed;
    c.prompt.seed = c.seed;
    c.validate()?;
    Ok(c)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate(common) => commands::generate(&resolve("generate", &common)?),
        Command::Train(common) => commands::train(&resolve("train", &common)?),
        Command::Visualize {
            common,
            images,
            class,
        } => commands::visualize(&resolve("visualize", &common)?, &images, class),
        Command::Evaluate {
            common,
            suite,
            split,
        } => commands::evaluate(&resolve("evaluate", &common)?, suite, split),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
