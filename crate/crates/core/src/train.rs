//! SGD with momentum, linear warmup into cosine decay, and the training loops
//! for backbone pretraining and prompt tuning.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Image, Sample};
use crate::error::{Error, Result};
use crate::prompt::{
    predict_label, prompt_cam_loss, prompted_forward_vars, score_images, ForwardOptions, PromptSet,
    PromptVariant,
};
use crate::rng::{self, Stream};
use crate::tensor::{argmax, Gradients, Tape, Tensor, Var};
use crate::vit::{patch_matrix, predict, vit_forward, ViTConfig, ViTModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecipe {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Weight of the patch-pixel reconstruction term added to the backbone
    /// pretraining loss. Ignored by prompt training.
    #[serde(default)]
    pub reconstruction_weight: f64,
    /// Probability that a patch is replaced by mid-gray during prompt training.
    #[serde(default)]
    pub patch_erase: f64,
    #[serde(default)]
    pub prompt_init: PromptInit,
}

/// Starting point for the class-specific prompts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptInit {
    /// Small Gaussian noise only.
    #[default]
    Random,
    /// Noise plus the mean `[CLS]` token entering the injection layer,
    /// averaged over the whole training set.
    MeanCls,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    /// SGD with momentum; `momentum` is the heavy-ball coefficient.
    #[default]
    Sgd,
    /// AdamW with betas `(momentum, 0.999)` and decoupled weight decay.
    AdamW,
}

impl TrainRecipe {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.lr >= 0.0) {
            problems.push(format!("lr must be non-negative, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if self.weight_decay < 0.0 {
            problems.push("weight_decay must be non-negative".into());
        }
        if !(self.reconstruction_weight >= 0.0) {
            problems.push("reconstruction_weight must be non-negative".into());
        }
        if !(0.0..1.0).contains(&self.patch_erase) {
            problems.push(format!(
                "patch_erase must lie in [0, 1), got {}",
                self.patch_erase
            ));
        }
        if self.batch_size == 0 {
            problems.push("batch_size must be positive".into());
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            problems.push(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }

    /// Learning rate for a 0-based optimizer step.
    pub fn lr_at(&self, step: usize, steps_per_epoch: usize) -> f64 {
        let warm = self.warmup_epochs * steps_per_epoch;
        let total = self.epochs * steps_per_epoch;
        if step < warm {
            return self.lr * (step + 1) as f64 / warm as f64;
        }
        let span = (total - warm).max(1) as f64;
        let t = (step - warm) as f64 / span;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// SGD with heavy-ball momentum: `buf = mu * buf + g`, `p -= lr * buf`.
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    buffers: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            buffers: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]], lr: f64) {
        if self.buffers.is_empty() {
            self.buffers = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        for ((p, g), buf) in params.iter_mut().zip(grads).zip(&mut self.buffers) {
            for ((w, &gi), b) in p.data_mut().iter_mut().zip(g.iter()).zip(buf.iter_mut()) {
                let grad = gi + self.weight_decay * *w;
                *b = self.momentum * *b + grad;
                *w -= lr * *b;
            }
        }
    }
}

pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(beta1: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]], lr: f64) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
                *w -= lr * (update + self.weight_decay * *w);
            }
        }
    }
}

enum Optimizer {
    Sgd(Sgd),
    AdamW(AdamW),
}

impl Optimizer {
    fn new(recipe: &TrainRecipe) -> Self {
        match recipe.optimizer {
            OptimizerKind::Sgd => Optimizer::Sgd(Sgd::new(recipe.momentum, recipe.weight_decay)),
            OptimizerKind::AdamW => {
                Optimizer::AdamW(AdamW::new(recipe.momentum, recipe.weight_decay))
            }
        }
    }

    fn step(&mut self, params: &mut [&mut Tensor], grads: &[&[f64]], lr: f64) {
        match self {
            Optimizer::Sgd(o) => o.step(params, grads, lr),
            Optimizer::AdamW(o) => o.step(params, grads, lr),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    /// Running accuracy over the epoch's training batches.
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochMetrics>,
}

impl TrainLog {
    pub fn final_test_acc(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.test_acc)
    }
}

fn patch_cache(samples: &[Sample], config: &ViTConfig) -> Result<Vec<Tensor>> {
    samples
        .iter()
        .map(|s| patch_matrix(&[&s.image], config))
        .collect()
}

fn stack(cache: &[Tensor], idx: &[usize]) -> Result<Tensor> {
    let pd = cache[0].cols();
    let rows = cache[0].rows();
    let mut data = Vec::with_capacity(idx.len() * rows * pd);
    for &i in idx {
        data.extend_from_slice(cache[i].data());
    }
    Tensor::matrix(idx.len() * rows, pd, data)
}

fn grads_for<'g>(grads: &'g Gradients, vars: &[Var]) -> Result<Vec<&'g [f64]>> {
    vars.iter()
        .map(|&v| {
            grads
                .get(v)
                .ok_or_else(|| Error::contract("trainable parameter received no gradient"))
        })
        .collect()
}

fn check_loss(loss: f64, epoch: usize, step: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!(
            "non-finite loss {loss} at epoch {epoch}, step {step}"
        )))
    }
}

/// Generic minibatch loop. `step_fn` builds the loss on a fresh tape for the
/// given sample indices, returning `(loss var, scores var, trainable vars)`.
fn run_epochs<F, P, E>(
    recipe: &TrainRecipe,
    labels: &[usize],
    mut step_fn: F,
    mut params: P,
    mut evaluate: E,
) -> Result<TrainLog>
where
    F: FnMut(&mut Tape, &[usize]) -> Result<(Var, Var, Vec<Var>)>,
    P: FnMut(&mut dyn FnMut(&mut [&mut Tensor])),
    E: FnMut() -> Result<Option<f64>>,
{
    recipe.validate()?;
    let n = labels.len();
    if n == 0 {
        return Err(Error::contract("training set is empty"));
    }
    let mut rng = rng::stream(recipe.seed, Stream::Shuffle);
    let steps_per_epoch = n.div_ceil(recipe.batch_size);
    let mut opt = Optimizer::new(recipe);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..recipe.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        let mut lr = 0.0;
        for batch in order.chunks(recipe.batch_size) {
            let mut tape = Tape::new();
            let (loss, scores, vars) = step_fn(&mut tape, batch)?;
            let lv = tape.value(loss).data()[0];
            check_loss(lv, epoch, step)?;
            loss_sum += lv * batch.len() as f64;
            let s = tape.value(scores);
            for (row, &i) in batch.iter().enumerate() {
                if argmax(s.row(row)) == labels[i] {
                    correct += 1;
                }
            }
            let grads = tape.backward(loss)?;
            let g = grads_for(&grads, &vars)?;
            lr = recipe.lr_at(step, steps_per_epoch);
            params(&mut |ps| opt.step(ps, &g, lr));
            step += 1;
        }
        log.epochs.push(EpochMetrics {
            epoch,
            lr,
            loss: loss_sum / n as f64,
            train_acc: correct as f64 / n as f64,
            test_acc: evaluate()?,
        });
    }
    Ok(log)
}

/// Supervised pretraining of the whole backbone with its linear head on `x_N`.
pub fn pretrain_backbone(
    model: &mut ViTModel,
    train: &[Sample],
    test: &[Sample],
    recipe: &TrainRecipe,
) -> Result<TrainLog> {
    if model.frozen {
        return Err(Error::contract("cannot pretrain a frozen backbone"));
    }
    let cache = patch_cache(train, &model.config)?;
    let labels: Vec<usize> = train.iter().map(|s| s.label).collect();
    let lambda = recipe.reconstruction_weight;
    let d = model.config.embed_dim;
    let pd = model.config.patch_dim();
    let mut drng = rng::stream(recipe.seed, Stream::Decoder);
    let dec = std::cell::RefCell::new(vec![
        Tensor::from_fn(&[d, pd], |_| rng::normal(&mut drng, 0.02)),
        Tensor::zeros(&[pd]),
    ]);
    let cell = std::cell::RefCell::new(model);
    run_epochs(
        recipe,
        &labels,
        |tape, idx| {
            let m = cell.borrow();
            let mv = m.attach(tape, true);
            let target = stack(&cache, idx)?;
            let rows = target.shape()[0];
            let pm = tape.constant(target.clone());
            let trace = vit_forward(tape, &mv, pm, idx.len())?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut loss = tape.cross_entropy(trace.logits, &y)?;
            let mut vars = mv.all();
            if lambda > 0.0 {
                let dw = tape.param(dec.borrow()[0].clone());
                let db = tape.param(dec.borrow()[1].clone());
                let e = mv.final_norm(tape, trace.patches)?;
                let r = tape.matmul(e, dw)?;
                let r = tape.add_bias(r, db)?;
                let neg = tape.constant(Tensor::new(
                    target.shape().to_vec(),
                    target.data().iter().map(|v| -v).collect(),
                )?);
                let diff = tape.add(r, neg)?;
                let sq = tape.mul(diff, diff)?;
                let sum = tape.sum(sq);
                let rec = tape.scale(sum, lambda / (rows * pd) as f64);
                loss = tape.add(loss, rec)?;
                vars.push(dw);
                vars.push(db);
            }
            Ok((loss, trace.logits, vars))
        },
        |apply| {
            let mut mm = cell.borrow_mut();
            let mut dd = dec.borrow_mut();
            let mut ts = mm.tensors_mut();
            if lambda > 0.0 {
                ts.extend(dd.iter_mut());
            }
            apply(&mut ts)
        },
        || {
            if test.is_empty() {
                return Ok(None);
            }
            backbone_accuracy(&cell.borrow(), test).map(Some)
        },
    )
}

/// Accuracy of the pretraining head.
pub fn backbone_accuracy(model: &ViTModel, samples: &[Sample]) -> Result<f64> {
    let mut correct = 0;
    for chunk in samples.chunks(64) {
        let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let (logits, _) = predict(model, &images)?;
        correct += chunk
            .iter()
            .enumerate()
            .filter(|(b, s)| argmax(logits.row(*b)) == s.label)
            .count();
    }
    Ok(correct as f64 / samples.len().max(1) as f64)
}

/// Accuracy of a trained prompt set.
pub fn prompt_accuracy(
    model: &ViTModel,
    prompts: &PromptSet,
    variant: PromptVariant,
    options: ForwardOptions,
    samples: &[Sample],
) -> Result<f64> {
    let images: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let scores = score_images(model, prompts, variant, options, &images)?;
    let correct = scores
        .iter()
        .zip(samples)
        .filter(|(s, x)| predict_label(s) == x.label)
        .count();
    Ok(correct as f64 / samples.len().max(1) as f64)
}

/// Per-class mean of the `[CLS]` token entering `layer` (1-based).
pub fn class_mean_cls(
    model: &ViTModel,
    samples: &[Sample],
    classes: usize,
    layer: usize,
) -> Result<Tensor> {
    if layer == 0 || layer > model.config.layers {
        return Err(Error::contract(format!("layer {layer} out of range")));
    }
    let d = model.config.embed_dim;
    let m = model.config.num_patches();
    let mut sums = Tensor::zeros(&[classes, d]);
    let mut counts = vec![0usize; classes];
    for chunk in samples.chunks(64) {
        let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        let mut tape = Tape::new();
        let mv = model.attach(&mut tape, false);
        let pm = tape.constant(patch_matrix(&images, &model.config)?);
        let trace = vit_forward(&mut tape, &mv, pm, chunk.len())?;
        let input = tape.value(trace.layers[layer - 1].input);
        for (b, s) in chunk.iter().enumerate() {
            let row = input.row(b * (m + 1) + m);
            for (acc, v) in sums.data_mut()[s.label * d..(s.label + 1) * d]
                .iter_mut()
                .zip(row)
            {
                *acc += v;
            }
            counts[s.label] += 1;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        for v in &mut sums.data_mut()[c * d..(c + 1) * d] {
            *v /= n.max(1) as f64;
        }
    }
    Ok(sums)
}

/// Trains prompts and `w` with the backbone frozen.
pub fn train_prompts(
    model: &ViTModel,
    dataset: &Dataset,
    variant: PromptVariant,
    options: ForwardOptions,
    recipe: &TrainRecipe,
) -> Result<(PromptSet, TrainLog)> {
    if !model.frozen {
        return Err(Error::contract(
            "prompt training requires a frozen backbone",
        ));
    }
    if dataset.train.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    let mut prompts = PromptSet::init(&model.config, dataset.classes, variant, recipe.seed)?;
    if recipe.prompt_init == PromptInit::MeanCls {
        let layer = variant.injection_layer(model.config.layers)?;
        let means = class_mean_cls(model, &dataset.train, dataset.classes, layer)?;
        let d = model.config.embed_dim;
        let c = dataset.classes;
        let global: Vec<f64> = (0..d)
            .map(|k| (0..c).map(|i| means.at(i, k)).sum::<f64>() / c as f64)
            .collect();
        for row in prompts.class_specific.data_mut().chunks_mut(d) {
            for (p, g) in row.iter_mut().zip(&global) {
                *p += g;
            }
        }
    }
    let cache = patch_cache(&dataset.train, &model.config)?;
    let labels: Vec<usize> = dataset.train.iter().map(|s| s.label).collect();
    let erase = recipe.patch_erase;
    let mut aug = rng::stream(recipe.seed, Stream::Augment);
    let cell = std::cell::RefCell::new(prompts);
    let log = run_epochs(
        recipe,
        &labels,
        |tape, idx| {
            let mv = model.attach(tape, false);
            let pv = cell.borrow().attach(tape, true);
            let mut batch = stack(&cache, idx)?;
            if erase > 0.0 {
                let pd = batch.cols();
                for row in batch.data_mut().chunks_mut(pd) {
                    if aug.random_bool(erase) {
                        row.fill(128.0 / 255.0);
                    }
                }
            }
            let pm = tape.constant(batch);
            let trace =
                prompted_forward_vars(tape, &mv, &pv, variant, options, pm, idx.len(), vec![])?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let loss = prompt_cam_loss(tape, trace.scores, &y)?;
            Ok((loss, trace.scores, pv.all()))
        },
        |apply| apply(&mut cell.borrow_mut().tensors_mut()),
        || {
            if dataset.test.is_empty() {
                return Ok(None);
            }
            prompt_accuracy(model, &cell.borrow(), variant, options, &dataset.test).map(Some)
        },
    )?;
    Ok((cell.into_inner(), log))
}

/// Linear classifier on frozen `[CLS]` features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    /// `D x C`.
    pub w: Tensor,
    pub b: Tensor,
}

impl LinearHead {
    pub fn logits(&self, features: &Tensor) -> Result<Tensor> {
        let mut out = features.matmul(&self.w)?;
        let c = self.b.len();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += self.b.data()[i % c];
        }
        Ok(out)
    }
}

/// Final normalized `[CLS]` features of every sample, `n x D`.
pub fn cls_features(model: &ViTModel, samples: &[Sample]) -> Result<Tensor> {
    let d = model.config.embed_dim;
    let mut data = Vec::with_capacity(samples.len() * d);
    for chunk in samples.chunks(64) {
        let images: Vec<&Image> = chunk.iter().map(|s| &s.image).collect();
        data.extend_from_slice(predict(model, &images)?.1.data());
    }
    Tensor::matrix(samples.len(), d, data)
}

/// Trains a fresh `C`-way linear head on frozen features.
pub fn train_linear_probe(
    model: &ViTModel,
    dataset: &Dataset,
    recipe: &TrainRecipe,
) -> Result<(LinearHead, TrainLog)> {
    if !model.frozen {
        return Err(Error::contract("linear probing requires a frozen backbone"));
    }
    let (d, c) = (model.config.embed_dim, dataset.classes);
    let mut rng = rng::stream(recipe.seed, Stream::Init);
    let head = LinearHead {
        w: Tensor::from_fn(&[d, c], |_| rng::truncated_normal(&mut rng, 0.02)),
        b: Tensor::zeros(&[c]),
    };
    let train = cls_features(model, &dataset.train)?;
    let test = cls_features(model, &dataset.test)?;
    let labels: Vec<usize> = dataset.train.iter().map(|s| s.label).collect();
    let cell = std::cell::RefCell::new(head);
    let log = run_epochs(
        recipe,
        &labels,
        |tape, idx| {
            let h = cell.borrow();
            let (w, b) = (tape.param(h.w.clone()), tape.param(h.b.clone()));
            let rows: Vec<f64> = idx.iter().flat_map(|&i| train.row(i).to_vec()).collect();
            let x = tape.constant(Tensor::matrix(idx.len(), d, rows)?);
            let logits = tape.matmul(x, w)?;
            let logits = tape.add_bias(logits, b)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let loss = tape.cross_entropy(logits, &y)?;
            Ok((loss, logits, vec![w, b]))
        },
        |apply| {
            let mut h = cell.borrow_mut();
            let LinearHead { w, b } = &mut *h;
            apply(&mut [w, b])
        },
        || {
            if dataset.test.is_empty() {
                return Ok(None);
            }
            let logits = cell.borrow().logits(&test)?;
            Ok(Some(head_accuracy(&logits, &dataset.test)))
        },
    )?;
    Ok((cell.into_inner(), log))
}

pub fn head_accuracy(logits: &Tensor, samples: &[Sample]) -> f64 {
    let correct = samples
        .iter()
        .enumerate()
        .filter(|(i, s)| argmax(logits.row(*i)) == s.label)
        .count();
    correct as f64 / samples.len().max(1) as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub layer: usize,
    pub agnostic_layers: usize,
    pub test_acc: f64,
}

/// Test accuracy with class-specific prompts entering each layer in turn.
pub fn layer_sweep(
    model: &ViTModel,
    dataset: &Dataset,
    options: ForwardOptions,
    recipe: &TrainRecipe,
) -> Result<Vec<SweepEntry>> {
    (1..=model.config.layers)
        .map(|layer| {
            let variant = PromptVariant::AtLayer(layer);
            let (prompts, _) = train_prompts(model, dataset, variant, options, recipe)?;
            Ok(SweepEntry {
                layer,
                agnostic_layers: layer - 1,
                test_acc: prompt_accuracy(model, &prompts, variant, options, &dataset.test)?,
            })
        })
        .collect()
}
