//! Plain SGD with two learning-rate groups, the test-time training loop and
//! supervised pretraining.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::{ImageSample, UnlabeledSample};
use crate::error::{Error, Result};
use crate::imaging::{AugConfig, Image};
use crate::model::{
    forward_backbone, forward_classifier, forward_head, forward_latent, images_to_input, BoundParams, Group, ModelParams, TaskKind,
    TaskSpec, DEFAULT_BARLOW_LAMBDA, JIGSAW_CLASSES,
};
use crate::rng::Rng;
use crate::ssl::{
    barlow_loss, generate_permutation_set, jigsaw_batch_with_labels, make_barlow_batch, rotnet_batch_with_labels,
    sample_labels, PermutationSet, SslBatch, Tagged, DEFAULT_POOL,
};
use crate::tensor::{Tape, Tensor, Var};

pub const HEAD_LR_RANGE: (f64, f64) = (1e-6, 1e-4);

/// Stream used for pretext labels inside a batch; per-sample augmentation
/// streams use the sample's position.
const LABEL_STREAM: u64 = u64::MAX;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroupLrs {
    pub backbone: f64,
    pub head: f64,
}

impl GroupLrs {
    pub fn uniform(lr: f64) -> Self {
        Self { backbone: lr, head: lr }
    }

    pub fn get(&self, group: Group) -> f64 {
        match group {
            Group::Backbone => self.backbone,
            Group::Head => self.head,
        }
    }
}

/// `t ← t − lr_G · grad(t)` for every trainable tensor, then zeroes the
/// gradients. No momentum, no weight decay.
pub fn sgd_step(params: &mut ModelParams, lrs: GroupLrs, with_classifier: bool) -> Result<()> {
    let mut tensors = params.trainable_mut(with_classifier);
    if let Some(i) = tensors.iter().position(|(_, t)| t.grad().is_none()) {
        return Err(Error::contract(format!("trainable tensor #{i} has no gradient")));
    }
    for (group, t) in &mut tensors {
        let lr = lrs.get(*group);
        let grad = t.grad().expect("checked above").to_vec();
        for (v, g) in t.data_mut().iter_mut().zip(&grad) {
            *v -= lr * g;
        }
        t.zero_grad();
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TTTConfig {
    pub task: TaskKind,
    /// Jigsaw permutation-set size.
    pub permutations: usize,
    /// Barlow off-diagonal weight.
    pub lambda: f64,
    pub head_lr: f64,
    pub backbone_lr_ratio: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub permutation_pool: usize,
    pub permutation_seed: u64,
    pub aug: AugConfig,
    /// Accept a head learning rate outside the recommended range.
    pub force: bool,
}

impl Default for TTTConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Rotnet,
            permutations: JIGSAW_CLASSES,
            lambda: DEFAULT_BARLOW_LAMBDA,
            head_lr: 1e-5,
            backbone_lr_ratio: 0.1,
            batch_size: 64,
            epochs: 1,
            seed: 0,
            permutation_pool: DEFAULT_POOL,
            permutation_seed: 0,
            aug: AugConfig::default(),
            force: false,
        }
    }
}

impl TTTConfig {
    pub fn for_task(task: TaskKind) -> Self {
        Self {
            task,
            ..Self::default()
        }
    }

    pub fn task_spec(&self) -> TaskSpec {
        match self.task {
            TaskKind::Rotnet => TaskSpec::rotnet(),
            TaskKind::Jigsaw => TaskSpec::jigsaw(self.permutations),
            TaskKind::Barlow => TaskSpec::barlow(self.lambda),
        }
    }

    pub fn lrs(&self) -> GroupLrs {
        GroupLrs {
            backbone: self.head_lr * self.backbone_lr_ratio,
            head: self.head_lr,
        }
    }

    /// A head learning rate of exactly 0 is always accepted; it disables
    /// adaptation.
    pub fn validate(&self) -> Result<()> {
        self.task_spec().validate()?;
        let (lo, hi) = HEAD_LR_RANGE;
        if !self.head_lr.is_finite() || self.head_lr < 0.0 {
            return Err(Error::Config(format!("ttt.head_lr {} must be finite and >= 0", self.head_lr)));
        }
        if self.head_lr != 0.0 && !(lo..=hi).contains(&self.head_lr) && !self.force {
            return Err(Error::Config(format!(
                "ttt.head_lr {} outside [{lo:e}, {hi:e}]; set ttt.force to override",
                self.head_lr
            )));
        }
        if !self.backbone_lr_ratio.is_finite() || self.backbone_lr_ratio < 0.0 {
            return Err(Error::Config(format!(
                "ttt.backbone_lr_ratio {} must be finite and >= 0",
                self.backbone_lr_ratio
            )));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("ttt.batch_size {} must be at least 2", self.batch_size)));
        }
        if self.task == TaskKind::Jigsaw && self.permutations > self.permutation_pool + 1 {
            return Err(Error::Config(format!(
                "ttt.permutations {} exceeds ttt.permutation_pool + 1",
                self.permutations
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub batch: usize,
    /// Samples in the batch.
    pub rows: usize,
    pub loss: f64,
    pub lr_head: f64,
    pub lr_backbone: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub records: Vec<BatchRecord>,
    pub epoch_seconds: Vec<f64>,
}

impl LossTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("batch,rows,loss,lr_head,lr_backbone\n");
        for r in &self.records {
            let _ = writeln!(out, "{},{},{},{},{}", r.batch, r.rows, r.loss, r.lr_head, r.lr_backbone);
        }
        out
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Mean loss over the first and the last quarter of batches (at least
    /// one batch each).
    ///
    /// Only batches of the largest size in the trace take part: the Barlow
    /// objective is biased upwards on small batches, so a short trailing batch
    /// would otherwise tilt the comparison.
    pub fn quarter_means(&self) -> Option<(f64, f64)> {
        let full = self.records.iter().map(|r| r.rows).max()?;
        let losses: Vec<f64> = self.records.iter().filter(|r| r.rows == full).map(|r| r.loss).collect();
        let n = losses.len();
        if n < 2 {
            return None;
        }
        let q = (n / 4).max(1);
        let mean = |ls: &[f64]| ls.iter().sum::<f64>() / ls.len() as f64;
        Some((mean(&losses[..q]), mean(&losses[n - q..])))
    }
}

/// Batches of the shuffled index list; a trailing batch of fewer than two
/// samples is dropped.
fn batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect()
}

fn augment_all(images: &[&Image], aug: &AugConfig, rng: &Rng) -> Result<Vec<Image>> {
    images
        .par_iter()
        .enumerate()
        .map(|(i, img)| aug.apply(img, &mut rng.fork(i as u64)))
        .collect()
}

/// Builds the self-supervised batch for one group of samples.
pub fn build_batch(
    samples: &[&UnlabeledSample],
    task: &TaskSpec,
    perms: Option<&PermutationSet>,
    aug: &AugConfig,
    rng: &Rng,
) -> Result<SslBatch> {
    if task.kind == TaskKind::Barlow {
        let tagged: Vec<Tagged> = samples.iter().map(|s| (s.id.as_str(), &s.image)).collect();
        return make_barlow_batch(&tagged, aug, rng);
    }
    let originals: Vec<&Image> = samples.iter().map(|s| &s.image).collect();
    let augmented = augment_all(&originals, aug, rng)?;
    let tagged: Vec<Tagged> = samples.iter().zip(&augmented).map(|(s, img)| (s.id.as_str(), img)).collect();
    let labels = sample_labels(samples.len(), task.k, &mut rng.fork(LABEL_STREAM));
    match task.kind {
        TaskKind::Rotnet => rotnet_batch_with_labels(&tagged, labels),
        _ => {
            let perms = perms.ok_or_else(|| Error::contract("jigsaw batch without a permutation set"))?;
            jigsaw_batch_with_labels(&tagged, perms, labels)
        }
    }
}

/// Records the task loss of `batch` on `tape`, returning the loss variable.
fn task_loss(
    params: &ModelParams,
    tape: &mut Tape,
    batch: &SslBatch,
    task: &TaskSpec,
) -> Result<(BoundParams, Var)> {
    let bound = params.bind(tape, false);
    let x = tape.constant(&batch.inputs);
    let g = forward_backbone(tape, &bound, x)?;
    let f = forward_latent(tape, &bound, g)?;
    let loss = match (&task.kind, batch.labels(), batch.inputs2()) {
        (TaskKind::Barlow, _, Some(x2)) => {
            let x2 = tape.constant(x2);
            let g2 = forward_backbone(tape, &bound, x2)?;
            let f2 = forward_latent(tape, &bound, g2)?;
            barlow_loss(tape, f, f2, task.lambda)?
        }
        (_, Some(labels), _) => {
            let h = forward_head(tape, &bound, f, task.k)?;
            tape.cross_entropy(h, labels)?
        }
        _ => return Err(Error::contract("batch targets do not match the task")),
    };
    Ok((bound, loss))
}

/// Task loss of one batch without updating anything.
pub fn evaluate_task_loss(params: &ModelParams, batch: &SslBatch, task: &TaskSpec) -> Result<f64> {
    let mut tape = Tape::new();
    let (_, loss) = task_loss(params, &mut tape, batch, task)?;
    Ok(tape.value(loss)[0])
}

/// Adapts `params` to an unlabeled test set with one self-supervised task.
///
/// The task head is replaced by a fresh one when its width does not match
/// the task. Each epoch shuffles the set once; batch `b` of epoch `e`
/// draws all randomness from `Rng::new(seed).fork(e).fork(b + 1)`.
pub fn run_ttt(
    params: &ModelParams,
    samples: &[UnlabeledSample],
    cfg: &TTTConfig,
) -> Result<(ModelParams, LossTrace)> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::contract("test-time training needs at least one sample"));
    }
    let task = cfg.task_spec();
    let mut p = params.clone();
    p.clear_grads();
    if task.kind != TaskKind::Barlow {
        p.ensure_head(task.k)?;
    }
    let perms = match task.kind {
        TaskKind::Jigsaw => Some(generate_permutation_set(task.k, cfg.permutation_pool, cfg.permutation_seed)?),
        _ => None,
    };
    let lrs = cfg.lrs();
    let root = Rng::new(cfg.seed);
    let mut trace = LossTrace::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let epoch_rng = root.fork(epoch as u64);
        for (b, idx) in batches(samples.len(), cfg.batch_size, &mut epoch_rng.fork(0)).iter().enumerate() {
            let members: Vec<&UnlabeledSample> = idx.iter().map(|&i| &samples[i]).collect();
            let batch = build_batch(&members, &task, perms.as_ref(), &cfg.aug, &epoch_rng.fork(b as u64 + 1))?;
            let mut tape = Tape::new();
            let (bound, loss) = task_loss(&p, &mut tape, &batch, &task)?;
            let value = tape.value(loss)[0];
            let batch_index = trace.records.len();
            if !value.is_finite() {
                return Err(Error::Divergence { batch: batch_index });
            }
            let mut grads = tape.backward(loss)?;
            p.store_grads(&bound, &mut grads)?;
            sgd_step(&mut p, lrs, false)?;
            if !p.all_finite() {
                return Err(Error::Divergence { batch: batch_index });
            }
            trace.records.push(BatchRecord {
                batch: batch_index,
                rows: idx.len(),
                loss: value,
                lr_head: lrs.head,
                lr_backbone: lrs.backbone,
            });
        }
        trace.epoch_seconds.push(start.elapsed().as_secs_f64());
    }
    p.clear_grads();
    Ok((p, trace))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub aug: AugConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            lr: 0.01,
            batch_size: 32,
            seed: 0,
            aug: AugConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("pretrain.lr {} must be finite and >= 0", self.lr)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("pretrain.batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// Supervised cross-entropy training of the classifier over the retrieval
/// space, all parameters at one learning rate. Labels must already be
/// compact (`0..classes`).
pub fn pretrain(params: &ModelParams, samples: &[ImageSample], cfg: &PretrainConfig) -> Result<ModelParams> {
    cfg.validate()?;
    let classes = params
        .classifier
        .as_ref()
        .ok_or_else(|| Error::contract("pretraining needs a model with a classifier"))?
        .fan_out();
    if samples.is_empty() {
        return Err(Error::contract("pretraining needs at least one sample"));
    }
    let labels: Vec<usize> = samples.iter().map(ImageSample::class_id).collect();
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Label { label: bad, classes });
    }
    let mut p = params.clone();
    p.clear_grads();
    let root = Rng::new(cfg.seed);
    for epoch in 0..cfg.epochs {
        let epoch_rng = root.fork(epoch as u64);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        epoch_rng.fork(0).shuffle(&mut order);
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let images: Vec<&Image> = idx.iter().map(|&i| &samples[i].image).collect();
            let augmented = augment_all(&images, &cfg.aug, &epoch_rng.fork(b as u64 + 1))?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape, true);
            let x = tape.constant(&images_to_input(&augmented)?);
            let g = forward_backbone(&mut tape, &bound, x)?;
            let f = forward_latent(&mut tape, &bound, g)?;
            let logits = forward_classifier(&mut tape, &bound, f)?;
            let loss = tape.cross_entropy(logits, &y)?;
            if !tape.value(loss)[0].is_finite() {
                return Err(Error::Divergence { batch: b });
            }
            let mut grads = tape.backward(loss)?;
            p.store_grads(&bound, &mut grads)?;
            sgd_step(&mut p, GroupLrs::uniform(cfg.lr), true)?;
        }
    }
    p.clear_grads();
    Ok(p)
}

/// Fraction of samples whose classifier argmax matches the label.
pub fn classifier_accuracy(params: &ModelParams, samples: &[ImageSample]) -> Result<f64> {
    let x = images_to_input(samples.iter().map(|s| &s.image))?;
    let logits = params.classify(&x)?;
    let k = logits.cols();
    let hits = samples
        .iter()
        .enumerate()
        .filter(|(i, s)| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let arg = (0..k).fold(0, |best, j| if row[j] > row[best] { j } else { best });
            arg == s.class_id()
        })
        .count();
    Ok(hits as f64 / samples.len() as f64)
}

/// Embeddings of raw images (no augmentation), one row per image.
pub fn embed_images(params: &ModelParams, images: &[&Image]) -> Result<Tensor> {
    params.embed(&images_to_input(images.iter().copied())?)
}
