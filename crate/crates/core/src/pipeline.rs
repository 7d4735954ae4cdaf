//! End-to-end run: generate data, pretrain, freeze, tune prompts.

use serde::{Deserialize, Serialize};

use crate::data::{generate_synth_traits, SynthSpec, SynthTraits};
use crate::error::Result;
use crate::prompt::{ForwardOptions, PromptSet, PromptVariant};
use crate::train::{
    pretrain_backbone, train_prompts, OptimizerKind, PromptInit, TrainLog, TrainRecipe,
};
use crate::vit::{ViTConfig, ViTModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub synth: SynthSpec,
    pub vit: ViTConfig,
    pub pretrain: TrainRecipe,
    pub prompt: TrainRecipe,
    pub variant: PromptVariant,
    pub options: ForwardOptions,
}

impl PipelineConfig {
    /// The eight-class desk-scale setup.
    pub fn synth8(seed: u64) -> Self {
        Self {
            seed,
            synth: SynthSpec::synth8(),
            vit: ViTConfig::synth8(),
            pretrain: TrainRecipe {
                lr: 1e-3,
                momentum: 0.9,
                weight_decay: 0.0,
                epochs: 10,
                warmup_epochs: 1,
                batch_size: 32,
                seed,
                optimizer: OptimizerKind::AdamW,
                reconstruction_weight: 0.3,
                patch_erase: 0.0,
                prompt_init: PromptInit::Random,
            },
            prompt: TrainRecipe {
                lr: 0.02,
                momentum: 0.9,
                weight_decay: 0.0,
                epochs: 16,
                warmup_epochs: 1,
                batch_size: 32,
                seed,
                optimizer: OptimizerKind::Sgd,
                reconstruction_weight: 0.0,
                patch_erase: 0.25,
                prompt_init: PromptInit::MeanCls,
            },
            variant: PromptVariant::Deep,
            options: ForwardOptions {
                prompt_isolation: true,
                hide_cls: true,
            },
        }
    }
}

/// A pretrained, frozen backbone and the data it was trained on.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub data: SynthTraits,
    pub model: ViTModel,
    pub log: TrainLog,
}

pub fn pretrain_stage(config: &PipelineConfig) -> Result<Backbone> {
    pretrain_on(generate_synth_traits(&config.synth, config.seed)?, config)
}

/// Pretrains a backbone sized to `data` (classes, image and patch size).
pub fn pretrain_on(data: SynthTraits, config: &PipelineConfig) -> Result<Backbone> {
    let vit = ViTConfig {
        classes: data.dataset.classes,
        image_size: data.manifest.image_size,
        patch_size: data.manifest.patch_size,
        ..config.vit.clone()
    };
    let mut model = ViTModel::init(&vit, config.seed)?;
    let log = pretrain_backbone(
        &mut model,
        &data.dataset.train,
        &data.dataset.test,
        &config.pretrain,
    )?;
    model.freeze();
    Ok(Backbone { data, model, log })
}

#[derive(Clone, Debug)]
pub struct PromptRun {
    pub prompts: PromptSet,
    pub log: TrainLog,
    pub checksum_before: String,
    pub checksum_after: String,
}

pub fn prompt_stage(backbone: &Backbone, config: &PipelineConfig) -> Result<PromptRun> {
    let checksum_before = backbone.model.checksum();
    let (prompts, log) = train_prompts(
        &backbone.model,
        &backbone.data.dataset,
        config.variant,
        config.options,
        &config.prompt,
    )?;
    Ok(PromptRun {
        prompts,
        log,
        checksum_before,
        checksum_after: backbone.model.checksum(),
    })
}
