use std::path::PathBuf;

use pcam::checkpoint::{
    model_checkpoint, model_from_checkpoint, prompt_checkpoint, prompts_from_checkpoint,
    Checkpoint, PromptMeta,
};
use pcam::data::{generate_synth_traits, Image, Sample, SynthSpec, SynthTraits};
use pcam::interpret::{extract_class_attention, greedy_trait_ranking, Scaling};
use pcam::pipeline::PipelineConfig;
use pcam::prompt::{prompted_inference, ForwardOptions, PromptSet, PromptVariant};
use pcam::train::{
    backbone_accuracy, pretrain_backbone, prompt_accuracy, train_prompts, TrainRecipe,
};
use pcam::vit::{predict, ViTConfig, ViTModel};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn err(e: pcam::Error) -> PyErr {
    match e {
        pcam::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_py<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn recipe(json: Option<&str>, default: TrainRecipe) -> PyResult<TrainRecipe> {
    match json {
        None => Ok(default),
        Some(text) => {
            serde_json::from_str(text).map_err(|e| PyValueError::new_err(format!("recipe: {e}")))
        }
    }
}

fn image_from_bytes(bytes: &[u8], size: usize) -> PyResult<Image> {
    Image::new(size, size, bytes.to_vec()).map_err(err)
}

/// Synthetic fine-grained dataset with planted trait glyphs.
#[pyclass(name = "SynthData", module = "pcam_py")]
struct PySynth {
    inner: SynthTraits,
}

impl PySynth {
    fn split(&self, split: &str) -> PyResult<&[Sample]> {
        match split {
            "train" => Ok(&self.inner.dataset.train),
            "test" => Ok(&self.inner.dataset.test),
            other => Err(PyValueError::new_err(format!("unknown split {other:?}"))),
        }
    }
}

#[pymethods]
impl PySynth {
    #[staticmethod]
    #[pyo3(signature = (
        seed, classes=8, species_per_genus=2, train_per_class=100, test_per_class=30,
        image_size=32, patch_size=8, noise_level=10.0, occlusion_rate=0.0, distractors=2
    ))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        seed: u64,
        classes: usize,
        species_per_genus: usize,
        train_per_class: usize,
        test_per_class: usize,
        image_size: usize,
        patch_size: usize,
        noise_level: f64,
        occlusion_rate: f64,
        distractors: usize,
    ) -> PyResult<Self> {
        let spec = SynthSpec {
            classes,
            species_per_genus,
            train_per_class,
            test_per_class,
            image_size,
            patch_size,
            noise_level,
            occlusion_rate,
            distractors,
        };
        Ok(Self {
            inner: generate_synth_traits(&spec, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: SynthTraits::load_dir(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_dir(&path).map_err(err)
    }

    #[getter]
    fn classes(&self) -> usize {
        self.inner.dataset.classes
    }

    #[getter]
    fn image_size(&self) -> usize {
        self.inner.manifest.image_size
    }

    fn __len__(&self) -> usize {
        self.inner.dataset.train.len() + self.inner.dataset.test.len()
    }

    fn count(&self, split: &str) -> PyResult<usize> {
        Ok(self.split(split)?.len())
    }

    /// `(id, label, rgb_bytes)` of one image; pixels are row-major RGB.
    fn sample<'py>(
        &self,
        py: Python<'py>,
        split: &str,
        index: usize,
    ) -> PyResult<(String, usize, Bound<'py, PyBytes>)> {
        let samples = self.split(split)?;
        let s = samples.get(index).ok_or_else(|| {
            PyValueError::new_err(format!(
                "index {index} outside {split} split of {}",
                samples.len()
            ))
        })?;
        Ok((s.id.clone(), s.label, PyBytes::new(py, &s.image.data)))
    }

    /// Row-major trait mask of one image.
    fn trait_mask(&self, split: &str, index: usize) -> PyResult<Vec<bool>> {
        let samples = self.split(split)?;
        samples
            .get(index)
            .map(|s| s.trait_mask.data.clone())
            .ok_or_else(|| PyValueError::new_err(format!("index {index} outside {split} split")))
    }

    fn manifest<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.manifest)
    }
}

/// Vision Transformer backbone.
#[pyclass(name = "Model", module = "pcam_py")]
struct PyModel {
    inner: ViTModel,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (seed, image_size=32, patch_size=8, classes=8, layers=4, embed_dim=64, heads=4, mlp_dim=128))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        seed: u64,
        image_size: usize,
        patch_size: usize,
        classes: usize,
        layers: usize,
        embed_dim: usize,
        heads: usize,
        mlp_dim: usize,
    ) -> PyResult<Self> {
        let config = ViTConfig {
            layers,
            embed_dim,
            heads,
            mlp_dim,
            patch_size,
            image_size,
            classes,
            ..ViTConfig::synth8()
        };
        Ok(Self {
            inner: ViTModel::init(&config, seed).map_err(err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(err)?;
        Ok(Self {
            inner: model_from_checkpoint(&ckpt).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        model_checkpoint(&self.inner)
            .and_then(|c| c.save(&path))
            .map_err(err)
    }

    /// Supervised pretraining; returns the per-epoch log. `recipe` is a JSON
    /// training recipe and defaults to the eight-class setup.
    #[pyo3(signature = (data, recipe_json=None))]
    fn pretrain<'py>(
        &mut self,
        py: Python<'py>,
        data: &PySynth,
        recipe_json: Option<&str>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let r = recipe(recipe_json, PipelineConfig::synth8(0).pretrain)?;
        let ds = &data.inner.dataset;
        let model = &mut self.inner;
        let log = py
            .detach(|| pretrain_backbone(model, &ds.train, &ds.test, &r))
            .map_err(err)?;
        to_py(py, &log)
    }

    fn freeze(&mut self) {
        self.inner.freeze();
    }

    #[getter]
    fn frozen(&self) -> bool {
        self.inner.frozen
    }

    fn checksum(&self) -> String {
        self.inner.checksum()
    }

    /// Pretraining-head logits for one image.
    fn logits(&self, image: &[u8]) -> PyResult<Vec<f64>> {
        let img = image_from_bytes(image, self.inner.config.image_size)?;
        let (logits, _) = predict(&self.inner, &[&img]).map_err(err)?;
        Ok(logits.row(0).to_vec())
    }

    fn accuracy(&self, data: &PySynth, split: &str) -> PyResult<f64> {
        backbone_accuracy(&self.inner, data.split(split)?).map_err(err)
    }

    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.config)
    }
}

/// Class-specific prompts and the shared scoring vector.
#[pyclass(name = "Prompts", module = "pcam_py")]
struct PyPrompts {
    inner: PromptSet,
    meta: PromptMeta,
}

impl PyPrompts {
    fn infer(&self, model: &PyModel, image: &[u8]) -> PyResult<pcam::prompt::Inference> {
        let img = image_from_bytes(image, model.inner.config.image_size)?;
        prompted_inference(
            &model.inner,
            &self.inner,
            self.meta.variant,
            self.meta.options,
            &[&img],
        )
        .map_err(err)
    }
}

#[pymethods]
impl PyPrompts {
    /// Trains prompts on a frozen model and returns `(prompts, log)`.
    #[staticmethod]
    #[pyo3(signature = (model, data, variant="deep", recipe_json=None, prompt_isolation=true, hide_cls=true))]
    fn train<'py>(
        py: Python<'py>,
        model: &PyModel,
        data: &PySynth,
        variant: &str,
        recipe_json: Option<&str>,
        prompt_isolation: bool,
        hide_cls: bool,
    ) -> PyResult<(Self, Bound<'py, PyAny>)> {
        let variant: PromptVariant = variant.parse().map_err(err)?;
        let options = ForwardOptions {
            prompt_isolation,
            hide_cls,
        };
        let r = recipe(recipe_json, PipelineConfig::synth8(0).prompt)?;
        let (m, ds) = (&model.inner, &data.inner.dataset);
        let (prompts, log) = py
            .detach(|| train_prompts(m, ds, variant, options, &r))
            .map_err(err)?;
        let meta = PromptMeta {
            variant,
            options,
            recipe: Some(r),
            classes: ds.classes,
            embed_dim: m.config.embed_dim,
        };
        Ok((
            Self {
                inner: prompts,
                meta,
            },
            to_py(py, &log)?,
        ))
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(err)?;
        let (inner, meta) = prompts_from_checkpoint(&ckpt).map_err(err)?;
        Ok(Self { inner, meta })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        prompt_checkpoint(&self.inner, &self.meta)
            .and_then(|c| c.save(&path))
            .map_err(err)
    }

    #[getter]
    fn variant(&self) -> String {
        self.meta.variant.to_string()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.meta.classes
    }

    /// Class scores `s[c]` for one image.
    fn scores(&self, model: &PyModel, image: &[u8]) -> PyResult<Vec<f64>> {
        Ok(self.infer(model, image)?.sample_scores(0).to_vec())
    }

    fn accuracy(&self, model: &PyModel, data: &PySynth, split: &str) -> PyResult<f64> {
        prompt_accuracy(
            &model.inner,
            &self.inner,
            self.meta.variant,
            self.meta.options,
            data.split(split)?,
        )
        .map_err(err)
    }

    /// Final-layer patch attention of prompt `class`, one list per head.
    #[pyo3(signature = (model, image, class_index, paper_literal=false))]
    fn attention(
        &self,
        model: &PyModel,
        image: &[u8],
        class_index: usize,
        paper_literal: bool,
    ) -> PyResult<Vec<Vec<f64>>> {
        let scaling = if paper_literal {
            Scaling::PaperLiteral
        } else {
            Scaling::ForwardConsistent
        };
        let inf = self.infer(model, image)?;
        Ok(extract_class_attention(&inf, class_index, scaling)
            .map_err(err)?
            .maps)
    }

    /// Greedy head ranking for the predicted class of one image.
    fn trait_ranking<'py>(
        &self,
        py: Python<'py>,
        model: &PyModel,
        image: &[u8],
    ) -> PyResult<Bound<'py, PyAny>> {
        let inf = self.infer(model, image)?;
        let ranking =
            greedy_trait_ranking(&model.inner, &self.inner, &inf, inf.predicted(0)).map_err(err)?;
        let dict = to_py(py, &ranking)?;
        dict.set_item("importance", ranking.importance())?;
        Ok(dict)
    }
}

/// Default training recipe of the eight-class setup, as JSON.
#[pyfunction]
#[pyo3(signature = (stage, seed=7))]
fn default_recipe(stage: &str, seed: u64) -> PyResult<String> {
    let p = PipelineConfig::synth8(seed);
    let r = match stage {
        "pretrain" => p.pretrain,
        "prompt" => p.prompt,
        other => return Err(PyValueError::new_err(format!("unknown stage {other:?}"))),
    };
    serde_json::to_string(&r).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
pub fn pcam_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySynth>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyPrompts>()?;
    m.add_function(wrap_pyfunction!(default_recipe, m)?)?;
    Ok(())
}
