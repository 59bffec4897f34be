//! Dual-stream optimization: each step pushes one augmented annotated batch
//! through encoder and mask decoder, and one diffusion-noised real batch
//! through encoder and image decoder, then takes an AdamW step on the sum.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{load_image, load_mask, DatasetManifest, ImageBuffer, MaskBuffer, RngState};
use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore};
use crate::losses::{self, ConvPyramidExtractor, FeatureDistance, FeatureExtractor, LossWeights};
use crate::metrics::{evaluate_items, EvalItem, EvalReport, DEFAULT_THRESHOLD};
use crate::model::{ModelConfig, Network};
use crate::schedule::{diffuse_closed, NoiseSchedule, SchedulerKind};
use crate::synthgen::{augment, AugmentPolicy};
use crate::tensor::Tensor;

// Named random streams. Everything random in training is derived from
// (seed, stream, step, slot) so results do not depend on thread count.
const STREAM_PLAN: u64 = 1;
const STREAM_AUGMENT: u64 = 2;
const STREAM_NOISE: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub kind: SchedulerKind,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            kind: SchedulerKind::Cosine,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.kind, self.steps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seg_batch: usize,
    pub rec_batch: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub loss_weights: LossWeights,
    pub diffusion: DiffusionConfig,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Validate every this many epochs.
    pub validation_interval: usize,
    pub threshold: f64,
    pub augment: AugmentPolicy,
    pub perceptual_distance: FeatureDistance,
    /// Stop early once validation Dice reaches this value.
    pub stop_at_dice: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seg_batch: 32,
            rec_batch: 32,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            epochs: 50,
            loss_weights: LossWeights::default(),
            diffusion: DiffusionConfig::default(),
            seed: 0,
            checkpoint_dir: None,
            validation_interval: 1,
            threshold: DEFAULT_THRESHOLD,
            augment: AugmentPolicy::default(),
            perceptual_distance: FeatureDistance::Squared,
            stop_at_dice: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seg_batch == 0 || self.rec_batch == 0 {
            return Err(Error::Config("batch sizes must be ≥ 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be ≥ 1".into()));
        }
        if self.validation_interval == 0 {
            return Err(Error::Config("validation_interval must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("invalid AdamW betas or eps".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config("weight_decay must be ≥ 0".into()));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold must lie in [0,1), got {}", self.threshold)));
        }
        self.loss_weights.validate()?;
        self.augment.validate()?;
        self.diffusion.schedule()?;
        Ok(())
    }
}

/// AdamW with decoupled weight decay. Parameters that receive no gradient in
/// a step are left untouched, decay included.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: Vec<u64>,
}

impl AdamW {
    pub fn new(params: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        Self {
            lr: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            m: zeros.clone(),
            v: zeros,
            steps: vec![0; params.len()],
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Option<Tensor>]) {
        for (id, grad) in grads.iter().enumerate() {
            let Some(g) = grad else { continue };
            self.steps[id] += 1;
            let t = self.steps[id] as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let p = params.tensor_mut(id).data_mut();
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            for i in 0..p.len() {
                let gi = g.data()[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                p[i] -= self.lr * self.weight_decay * p[i];
                p[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }

    fn to_tensors(&self, params: &ParamStore) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.m.len() + 1);
        for (id, (name, _)) in params.iter().enumerate() {
            out.push((format!("adam.m.{name}"), self.m[id].clone()));
            out.push((format!("adam.v.{name}"), self.v[id].clone()));
        }
        let steps = self.steps.iter().map(|&s| s as f64).collect();
        out.push(("adam.steps".into(), Tensor::new(vec![self.steps.len()], steps).expect("shape")));
        out
    }

    fn restore(&mut self, params: &ParamStore, ckpt: &Checkpoint) -> Result<()> {
        for (id, (name, t)) in params.iter().enumerate() {
            for (prefix, slot) in [("adam.m.", &mut self.m[id]), ("adam.v.", &mut self.v[id])] {
                let key = format!("{prefix}{name}");
                let src = ckpt
                    .get(&key)
                    .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {key}")))?;
                if src.shape() != t.shape() {
                    return Err(Error::Checkpoint(format!("optimizer tensor {key} has wrong shape")));
                }
                *slot = src.clone();
            }
        }
        let steps = ckpt
            .get("adam.steps")
            .ok_or_else(|| Error::Checkpoint("missing adam.steps".into()))?;
        if steps.numel() != self.steps.len() {
            return Err(Error::Checkpoint("adam.steps has wrong length".into()));
        }
        self.steps = steps.data().iter().map(|&s| s as u64).collect();
        Ok(())
    }
}

/// One training example held in memory at network resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub domain: String,
    pub image: ImageBuffer,
    pub mask: Option<MaskBuffer>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    /// Loads every record, resized to `size×size`.
    pub fn from_manifest(manifest: &DatasetManifest, size: usize) -> Result<Self> {
        let samples = manifest
            .records
            .iter()
            .map(|r| {
                Ok(Sample {
                    id: r.id(),
                    domain: r.domain.clone(),
                    image: load_image(&r.image)?.resize(size, size),
                    mask: match &r.mask {
                        Some(m) => Some(load_mask(m)?.resize(size, size)),
                        None => None,
                    },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    fn check(&self, what: &str, size: usize, need_masks: bool) -> Result<()> {
        if self.is_empty() {
            return Err(Error::Data(format!("{what} dataset is empty")));
        }
        for s in &self.samples {
            if s.image.height() != size || s.image.width() != size {
                return Err(Error::Data(format!(
                    "{what} sample {} is {}x{}, expected {size}x{size}",
                    s.id,
                    s.image.height(),
                    s.image.width()
                )));
            }
            if need_masks && s.mask.is_none() {
                return Err(Error::Data(format!("{what} sample {} has no mask", s.id)));
            }
        }
        Ok(())
    }

    fn eval_items(&self) -> (Vec<EvalItem<'_>>, Vec<String>) {
        let mut items = Vec::new();
        let mut skipped = Vec::new();
        for s in &self.samples {
            match &s.mask {
                Some(mask) => items.push(EvalItem {
                    id: &s.id,
                    domain: &s.domain,
                    image: &s.image,
                    mask,
                }),
                None => skipped.push(s.id.clone()),
            }
        }
        (items, skipped)
    }
}

/// Loss components of one step. Inactive branches report zeros.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub bce: f64,
    pub dice: f64,
    pub seg: f64,
    pub mse: f64,
    pub ssim: f64,
    pub perc: f64,
    pub rec: f64,
    pub total: f64,
}

impl StepLog {
    pub const CSV_HEADER: &'static str = "step,epoch,bce,dice,seg,mse,ssim,perc,rec,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10},{:.10}",
            self.step, self.epoch, self.bce, self.dice, self.seg, self.mse, self.ssim, self.perc, self.rec, self.total
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValRecord {
    pub epoch: usize,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub is_best: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    /// Steps already taken inside the current epoch.
    pub step_in_epoch: usize,
    pub global_step: u64,
    pub best_val_dice: Option<f64>,
    pub best_checkpoint_path: Option<PathBuf>,
}

/// Indices for `steps` batches of size `min(batch, n)`, drawn from
/// back-to-back reshuffled permutations of `0..n`.
fn cycle_plan<R: Rng + ?Sized>(n: usize, batch: usize, steps: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let b = batch.min(n);
    let mut order = Vec::with_capacity(steps * b + n);
    while order.len() < steps * b {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(rng);
        order.extend(perm);
    }
    order.chunks(b).take(steps).map(|c| c.to_vec()).collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Network,
    pub best: Network,
    pub best_val_dice: f64,
    pub best_checkpoint_path: Option<PathBuf>,
    pub log: Vec<StepLog>,
    pub val_log: Vec<ValRecord>,
}

pub struct Trainer {
    network: Network,
    config: TrainConfig,
    optimizer: AdamW,
    schedule: NoiseSchedule,
    extractor: Box<dyn FeatureExtractor>,
    seg: Dataset,
    rec: Dataset,
    val: Option<Dataset>,
    state: TrainState,
    best_params: Option<ParamStore>,
    log: Vec<StepLog>,
    val_log: Vec<ValRecord>,
}

impl Trainer {
    /// Without a validation set, model selection scores the segmentation
    /// training set instead.
    pub fn new(network: Network, config: TrainConfig, seg: Dataset, rec: Dataset, val: Option<Dataset>) -> Result<Self> {
        config.validate()?;
        let size = network.config().image_size;
        seg.check("segmentation", size, true)?;
        rec.check("reconstruction", size, false)?;
        if let Some(v) = &val {
            v.check("validation", size, true)?;
        }
        let optimizer = AdamW::new(network.params(), &config);
        Ok(Self {
            schedule: config.diffusion.schedule()?,
            extractor: Box::new(ConvPyramidExtractor::frozen_random(losses::DEFAULT_EXTRACTOR_SEED)),
            optimizer,
            network,
            config,
            seg,
            rec,
            val,
            state: TrainState {
                epoch: 0,
                step_in_epoch: 0,
                global_step: 0,
                best_val_dice: None,
                best_checkpoint_path: None,
            },
            best_params: None,
            log: Vec::new(),
            val_log: Vec::new(),
        })
    }

    pub fn with_extractor(mut self, extractor: Box<dyn FeatureExtractor>) -> Self {
        self.extractor = extractor;
        self
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn log(&self) -> &[StepLog] {
        &self.log
    }

    pub fn val_log(&self) -> &[ValRecord] {
        &self.val_log
    }

    /// Steps needed to cover the larger stream once.
    pub fn steps_per_epoch(&self) -> usize {
        let s = self.seg.len().div_ceil(self.config.seg_batch);
        let r = self.rec.len().div_ceil(self.config.rec_batch);
        s.max(r)
    }

    /// Batch indices `(seg, rec)` for every step of `epoch`.
    pub fn epoch_plan(&self, epoch: usize) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        let steps = self.steps_per_epoch();
        let mut rng = RngState::new(self.config.seed, STREAM_PLAN).child(epoch as u64).rng();
        let seg = cycle_plan(self.seg.len(), self.config.seg_batch, steps, &mut rng);
        let rec = cycle_plan(self.rec.len(), self.config.rec_batch, steps, &mut rng);
        (seg, rec)
    }

    /// Takes the next optimization step of the current epoch.
    pub fn step(&mut self) -> Result<StepLog> {
        let (seg_plan, rec_plan) = self.epoch_plan(self.state.epoch);
        let k = self.state.step_in_epoch;
        let entry = self.forward_backward(&seg_plan[k], &rec_plan[k])?;
        self.state.global_step += 1;
        self.state.step_in_epoch += 1;
        if self.state.step_in_epoch == seg_plan.len() {
            self.state.epoch += 1;
            self.state.step_in_epoch = 0;
        }
        self.log.push(entry);
        Ok(entry)
    }

    pub fn train_steps(&mut self, n: usize) -> Result<Vec<StepLog>> {
        (0..n).map(|_| self.step()).collect()
    }

    fn seg_batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let base = RngState::new(self.config.seed, STREAM_AUGMENT).child(self.state.global_step);
        let mut images = Vec::with_capacity(idx.len());
        let mut masks = Vec::with_capacity(idx.len());
        for (slot, &i) in idx.iter().enumerate() {
            let s = &self.seg.samples[i];
            let mut rng = base.child(slot as u64).rng();
            let (img, mask) = augment(&s.image, s.mask.as_ref(), &self.config.augment, &mut rng);
            images.push(self.to_input(img));
            masks.push(mask.expect("segmentation samples carry masks"));
        }
        Ok((Tensor::from_images(&images)?, Tensor::from_masks(&masks)?))
    }

    /// Noised inputs and the clean targets they came from.
    fn rec_batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let base = RngState::new(self.config.seed, STREAM_NOISE).child(self.state.global_step);
        let mut noised = Vec::with_capacity(idx.len());
        let mut clean = Vec::with_capacity(idx.len());
        for (slot, &i) in idx.iter().enumerate() {
            let x0 = self.to_input(self.rec.samples[i].image.clone());
            let mut rng = base.child(slot as u64).rng();
            let t = rng.random_range(1..=self.schedule.steps());
            noised.push(diffuse_closed(&x0, t, &self.schedule, &mut rng)?);
            clean.push(x0);
        }
        Ok((Tensor::from_images(&noised)?, Tensor::from_images(&clean)?))
    }

    fn to_input(&self, img: ImageBuffer) -> ImageBuffer {
        if self.network.config().in_channels == 3 {
            img.to_rgb()
        } else {
            img
        }
    }

    fn forward_backward(&mut self, seg_idx: &[usize], rec_idx: &[usize]) -> Result<StepLog> {
        let w = self.config.loss_weights;
        let (seg_on, rec_on) = (w.segmentation_active(), w.reconstruction_active());
        let mut g = Graph::new();
        let mut entry = StepLog {
            step: self.state.global_step,
            epoch: self.state.epoch,
            ..StepLog::default()
        };
        let mut root_terms = Vec::new();
        if seg_on {
            let (x, y) = self.seg_batch(seg_idx)?;
            let x = g.input(x);
            let y = g.input(y);
            let pyr = self.network.encode(&mut g, x)?;
            let pred = self.network.decode_mask(&mut g, &pyr)?;
            let t = losses::seg(&mut g, pred, y, &w)?;
            entry.bce = g.value(t.bce).item();
            entry.dice = g.value(t.dice).item();
            entry.seg = g.value(t.total).item();
            root_terms.push((t.total, 1.0));
        }
        if rec_on {
            let (xn, x0) = self.rec_batch(rec_idx)?;
            let xn = g.input(xn);
            let x0 = g.input(x0);
            let pyr = self.network.encode(&mut g, xn)?;
            let recon = self.network.decode_image(&mut g, &pyr)?;
            let t = losses::rec(&mut g, recon, x0, self.extractor.as_ref(), self.config.perceptual_distance, &w)?;
            entry.mse = g.value(t.mse).item();
            entry.ssim = g.value(t.ssim).item();
            entry.perc = g.value(t.perceptual).item();
            entry.rec = g.value(t.total).item();
            root_terms.push((t.total, 1.0));
        }
        entry.total = entry.seg + entry.rec;
        let values = [entry.bce, entry.dice, entry.mse, entry.ssim, entry.perc, entry.total];
        if values.iter().any(|v| !v.is_finite()) {
            let mut batch_ids: Vec<String> = seg_idx.iter().map(|&i| format!("seg:{}", self.seg.samples[i].id)).collect();
            batch_ids.extend(rec_idx.iter().map(|&i| format!("rec:{}", self.rec.samples[i].id)));
            log::error!("non-finite loss at step {}: {entry:?}", entry.step);
            return Err(Error::NonFinite {
                step: entry.step,
                batch_ids,
            });
        }
        // Nothing to optimize when every weight is zero.
        if root_terms.is_empty() {
            return Ok(entry);
        }
        let root = g.weighted_sum(&root_terms);
        let grads = g.backward(root).for_params(self.network.params().len());
        self.optimizer.step(self.network.params_mut(), &grads);
        Ok(entry)
    }

    /// Scores the validation set, or the segmentation set when none was given.
    pub fn validate(&self) -> Result<EvalReport> {
        let data = self.val.as_ref().unwrap_or(&self.seg);
        let (items, skipped) = data.eval_items();
        evaluate_items(&self.network, &items, self.config.threshold, skipped)
    }

    /// Finishes the current epoch, then validates and checkpoints if due.
    pub fn run_epoch(&mut self) -> Result<Option<ValRecord>> {
        let epoch = self.state.epoch;
        let first = self.log.len();
        while self.state.epoch == epoch {
            self.step()?;
        }
        self.append_step_log(first)?;
        let mut record = None;
        if self.state.epoch.is_multiple_of(self.config.validation_interval) || self.state.epoch == self.config.epochs {
            let report = self.validate()?;
            let is_best = self.state.best_val_dice.is_none_or(|b| report.mean_dice > b);
            if is_best {
                self.state.best_val_dice = Some(report.mean_dice);
                self.best_params = Some(self.network.params().clone());
                if let Some(dir) = &self.config.checkpoint_dir {
                    let path = dir.join("best.ckpt");
                    self.network.to_checkpoint(self.metadata()).save(&path)?;
                    self.state.best_checkpoint_path = Some(path);
                }
            }
            let r = ValRecord {
                epoch: self.state.epoch,
                mean_dice: report.mean_dice,
                mean_iou: report.mean_iou,
                is_best,
            };
            log::info!(
                "epoch {} dice {:.4} iou {:.4}{}",
                r.epoch,
                r.mean_dice,
                r.mean_iou,
                if is_best { " (best)" } else { "" }
            );
            self.append_val_log(&r)?;
            self.val_log.push(r);
            record = Some(r);
        }
        if let Some(dir) = &self.config.checkpoint_dir {
            self.save_state(dir.join("last.ckpt"))?;
        }
        Ok(record)
    }

    /// Runs the remaining epochs, stopping early when `stop_at_dice` is met.
    pub fn train(mut self) -> Result<TrainOutcome> {
        if let Some(dir) = &self.config.checkpoint_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        while self.state.epoch < self.config.epochs {
            let record = self.run_epoch()?;
            if let (Some(r), Some(target)) = (record, self.config.stop_at_dice) {
                if r.mean_dice >= target {
                    log::info!("reached target dice {target} at epoch {}", r.epoch);
                    break;
                }
            }
        }
        let best_params = match self.best_params.take() {
            Some(p) => p,
            None => self.network.params().clone(),
        };
        let best = Network::from_parts(*self.network.config(), best_params)?;
        Ok(TrainOutcome {
            best_val_dice: self.state.best_val_dice.unwrap_or(f64::NAN),
            best_checkpoint_path: self.state.best_checkpoint_path.clone(),
            last: self.network,
            best,
            log: self.log,
            val_log: self.val_log,
        })
    }

    fn metadata(&self) -> serde_json::Value {
        serde_json::json!({
            "train_config": self.config,
            "train_state": self.state,
            "extractor_fingerprint": self.extractor.fingerprint(),
        })
    }

    /// Full state: weights, optimizer moments and loop position.
    pub fn save_state(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut ckpt = self.network.to_checkpoint(self.metadata());
        ckpt.tensors.extend(self.optimizer.to_tensors(self.network.params()));
        if let Some(best) = &self.best_params {
            ckpt.tensors
                .extend(best.iter().map(|(n, t)| (format!("best.{n}"), t.clone())));
        }
        ckpt.save(path)
    }

    /// Restores a state written by [`Trainer::save_state`]. The model
    /// configuration must match exactly.
    pub fn resume(
        path: impl AsRef<Path>,
        expected: &ModelConfig,
        config: TrainConfig,
        seg: Dataset,
        rec: Dataset,
        val: Option<Dataset>,
    ) -> Result<Self> {
        let ckpt = Checkpoint::load(path)?;
        let network = Network::from_checkpoint(&ckpt, Some(expected))?;
        let state: TrainState = serde_json::from_value(
            ckpt.metadata
                .get("train_state")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("no train_state in metadata".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("train_state: {e}")))?;
        let mut trainer = Trainer::new(network, config, seg, rec, val)?;
        trainer.optimizer.restore(trainer.network.params(), &ckpt)?;
        let mut best = ParamStore::new();
        for (name, t) in &ckpt.tensors {
            if let Some(n) = name.strip_prefix("best.") {
                best.insert(n, t.clone());
            }
        }
        trainer.best_params = (!best.is_empty()).then_some(best);
        trainer.state = state;
        Ok(trainer)
    }

    fn append_lines(&self, name: &str, header: &str, body: &str, fresh: bool) -> Result<()> {
        let Some(dir) = &self.config.checkpoint_dir else {
            return Ok(());
        };
        let path = dir.join(name);
        let exists = path.exists() && !fresh;
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(exists)
            .write(true)
            .truncate(!exists)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut text = String::new();
        if !exists {
            text.push_str(header);
            text.push('\n');
        }
        text.push_str(body);
        f.write_all(text.as_bytes()).map_err(|e| Error::io(&path, e))
    }

    fn append_step_log(&self, first: usize) -> Result<()> {
        let mut body = String::new();
        for e in &self.log[first..] {
            let _ = writeln!(body, "{}", e.csv_row());
        }
        let fresh = self.log.first().is_some_and(|e| e.step == 0) && first == 0;
        self.append_lines("train_log.csv", StepLog::CSV_HEADER, &body, fresh)
    }

    fn append_val_log(&self, r: &ValRecord) -> Result<()> {
        let body = format!("{},{:.6},{:.6},{}\n", r.epoch, r.mean_dice, r.mean_iou, r.is_best);
        let fresh = self.val_log.is_empty() && self.log.first().is_some_and(|e| e.step == 0);
        self.append_lines("val.csv", "epoch,mean_dice,mean_iou,is_best", &body, fresh)
    }
}

/// Continues training from saved weights with a fresh optimizer. Zero epochs
/// returns the checkpoint weights unchanged.
pub fn fine_tune(
    base: impl AsRef<Path>,
    expected: &ModelConfig,
    config: TrainConfig,
    seg: Dataset,
    rec: Dataset,
    val: Option<Dataset>,
) -> Result<TrainOutcome> {
    let ckpt = Checkpoint::load(base)?;
    let network = Network::from_checkpoint(&ckpt, Some(expected))?;
    if config.epochs == 0 {
        return Ok(TrainOutcome {
            best: network.clone(),
            last: network,
            best_val_dice: f64::NAN,
            best_checkpoint_path: None,
            log: Vec::new(),
            val_log: Vec::new(),
        });
    }
    Trainer::new(network, config, seg, rec, val)?.train()
}

/// Loss paths that [`grad_check`] can differentiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossSelector {
    Bce,
    Dice,
    Mse,
    Ssim,
    Perceptual,
    Seg,
    Rec,
    Total,
}

impl LossSelector {
    pub const ALL: [LossSelector; 8] = [
        LossSelector::Bce,
        LossSelector::Dice,
        LossSelector::Mse,
        LossSelector::Ssim,
        LossSelector::Perceptual,
        LossSelector::Seg,
        LossSelector::Rec,
        LossSelector::Total,
    ];

    fn uses_seg(self) -> bool {
        matches!(self, Self::Bce | Self::Dice | Self::Seg | Self::Total)
    }

    fn uses_rec(self) -> bool {
        matches!(self, Self::Mse | Self::Ssim | Self::Perceptual | Self::Rec | Self::Total)
    }
}

/// Fixed inputs for a gradient check.
struct CheckBatch {
    seg_x: Tensor,
    seg_y: Tensor,
    rec_x: Tensor,
    rec_y: Tensor,
}

fn check_loss(
    net: &Network,
    batch: &CheckBatch,
    sel: LossSelector,
    extractor: &dyn FeatureExtractor,
    g: &mut Graph,
) -> Result<crate::graph::Var> {
    let w = LossWeights::default();
    let mut terms = Vec::new();
    if sel.uses_seg() {
        let x = g.input(batch.seg_x.clone());
        let y = g.input(batch.seg_y.clone());
        let pyr = net.encode(g, x)?;
        let p = net.decode_mask(g, &pyr)?;
        let v = match sel {
            LossSelector::Bce => losses::bce(g, p, y)?,
            LossSelector::Dice => losses::dice(g, p, y)?,
            _ => losses::seg(g, p, y, &w)?.total,
        };
        terms.push((v, 1.0));
    }
    if sel.uses_rec() {
        let x = g.input(batch.rec_x.clone());
        let y = g.input(batch.rec_y.clone());
        let pyr = net.encode(g, x)?;
        let r = net.decode_image(g, &pyr)?;
        let v = match sel {
            LossSelector::Mse => losses::mse(g, r, y)?,
            LossSelector::Ssim => losses::ssim(g, r, y)?,
            LossSelector::Perceptual => losses::perceptual(g, r, y, extractor, FeatureDistance::Squared)?,
            _ => losses::rec(g, r, y, extractor, FeatureDistance::Squared, &w)?.total,
        };
        terms.push((v, 1.0));
    }
    Ok(g.weighted_sum(&terms))
}

/// Result of a finite-difference gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub sampled: usize,
}

/// Compares analytic gradients with central differences (step `1e-5`) on
/// `samples` randomly chosen scalar weights that feed the selected loss.
/// Relative error is `|a−n| / max(|a|, |n|, 1e-6)`.
pub fn grad_check(config: &ModelConfig, sel: LossSelector, samples: usize, seed: u64) -> Result<GradCheck> {
    use crate::synthgen::procedural_toy_scene;
    const H: f64 = 1e-5;
    let mut net = Network::new(*config, RngState::new(seed, 0))?;
    let size = config.image_size;
    let mut rng = RngState::new(seed, 1).rng();
    let mut images = Vec::new();
    let mut masks = Vec::new();
    for _ in 0..2 {
        let (img, mask) = procedural_toy_scene(size, 2, &mut rng);
        images.push(img);
        masks.push(mask);
    }
    let schedule = NoiseSchedule::cosine(50, 1e-4, 0.02)?;
    let noised = images
        .iter()
        .map(|x| diffuse_closed(x, 10, &schedule, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let batch = CheckBatch {
        seg_x: Tensor::from_images(&images)?,
        seg_y: Tensor::from_masks(&masks)?,
        rec_x: Tensor::from_images(&noised)?,
        rec_y: Tensor::from_images(&images)?,
    };
    let extractor = ConvPyramidExtractor::frozen_random(losses::DEFAULT_EXTRACTOR_SEED);

    let mut g = Graph::new();
    let root = check_loss(&net, &batch, sel, &extractor, &mut g)?;
    let grads = g.backward(root).for_params(net.params().len());
    let mut candidates = Vec::new();
    for (id, grad) in grads.iter().enumerate() {
        if grad.is_some() {
            candidates.extend((0..net.params().tensor(id).numel()).map(|k| (id, k)));
        }
    }
    if candidates.is_empty() {
        return Err(Error::Config("selected loss reaches no parameters".into()));
    }
    candidates.shuffle(&mut rng);
    candidates.truncate(samples);

    let eval = |net: &Network| -> Result<f64> {
        let mut g = Graph::new();
        let v = check_loss(net, &batch, sel, &extractor, &mut g)?;
        Ok(g.value(v).item())
    };
    let mut worst: f64 = 0.0;
    for &(id, k) in &candidates {
        let orig = net.params().tensor(id).data()[k];
        net.params_mut().tensor_mut(id).data_mut()[k] = orig + H;
        let plus = eval(&net)?;
        net.params_mut().tensor_mut(id).data_mut()[k] = orig - H;
        let minus = eval(&net)?;
        net.params_mut().tensor_mut(id).data_mut()[k] = orig;
        let numeric = (plus - minus) / (2.0 * H);
        let analytic = grads[id].as_ref().expect("candidate has gradient").data()[k];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    Ok(GradCheck {
        max_rel_error: worst,
        sampled: candidates.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::procedural_toy_scene;

    fn toy(n: usize, size: usize, seed: u64) -> Dataset {
        let samples = (0..n)
            .map(|i| {
                let (image, mask) = procedural_toy_scene(size, 2, &mut RngState::new(seed, i as u64).rng());
                Sample {
                    id: format!("{i:03}"),
                    domain: "toy".into(),
                    image,
                    mask: Some(mask),
                }
            })
            .collect();
        Dataset::new(samples)
    }

    fn tiny_trainer(seg: usize, rec: usize, cfg: TrainConfig) -> Trainer {
        let net = Network::new(ModelConfig::tiny(), RngState::new(3, 0)).unwrap();
        Trainer::new(net, cfg, toy(seg, 8, 1), toy(rec, 8, 2), None).unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            seg_batch: 4,
            rec_batch: 4,
            learning_rate: 1e-3,
            epochs: 2,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn batch_arithmetic() {
        let cfg = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        let mut t = tiny_trainer(32, 32, cfg);
        assert_eq!(t.steps_per_epoch(), 1);
        t.run_epoch().unwrap();
        assert_eq!(t.state().global_step, 1);
        assert_eq!(t.state().epoch, 1);
        let t = tiny_trainer(10, 3, small_cfg());
        assert_eq!(t.steps_per_epoch(), 3);
        let (s, r) = t.epoch_plan(0);
        let mut seen: Vec<usize> = s.concat().into_iter().take(10).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert!(r.iter().all(|b| b.len() == 3));
    }

    #[test]
    fn zero_weights_leave_parameters_unchanged() {
        let cfg = TrainConfig {
            loss_weights: LossWeights {
                bce: 0.0,
                dice: 0.0,
                mse: 0.0,
                ssim: 0.0,
                perceptual: 0.0,
            },
            ..small_cfg()
        };
        let mut t = tiny_trainer(4, 4, cfg);
        let before = t.network().params().clone();
        t.train_steps(3).unwrap();
        assert_eq!(t.network().params(), &before);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::new(vec![2], vec![1.0, -1.0]).unwrap());
        let cfg = TrainConfig {
            weight_decay: 0.0,
            learning_rate: 0.1,
            ..TrainConfig::default()
        };
        let mut opt = AdamW::new(&store, &cfg);
        opt.step(&mut store, &[Some(Tensor::new(vec![2], vec![3.0, -0.5]).unwrap())]);
        let p = store.tensor(0).data();
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
        opt.step(&mut store, &[None]);
        assert!((store.tensor(0).data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn best_dice_never_decreases() {
        let mut t = tiny_trainer(4, 4, TrainConfig { epochs: 4, ..small_cfg() });
        let mut best = f64::NEG_INFINITY;
        for _ in 0..4 {
            let r = t.run_epoch().unwrap().unwrap();
            best = best.max(r.mean_dice);
            assert_eq!(t.state().best_val_dice, Some(best));
        }
    }

    #[test]
    fn resume_matches_continuous_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = tiny_trainer(6, 6, small_cfg());
        let full = a.train_steps(4).unwrap();
        let mut b = tiny_trainer(6, 6, small_cfg());
        b.train_steps(2).unwrap();
        let path = dir.path().join("state.ckpt");
        b.save_state(&path).unwrap();
        let mut c = Trainer::resume(&path, &ModelConfig::tiny(), small_cfg(), toy(6, 8, 1), toy(6, 8, 2), None).unwrap();
        let rest = c.train_steps(2).unwrap();
        for (x, y) in full[2..].iter().zip(&rest) {
            assert_eq!(x.step, y.step);
            assert!((x.total - y.total).abs() < 1e-9);
        }
        assert_eq!(a.network().params(), c.network().params());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { epochs: 0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { seg_batch: 0, ..TrainConfig::default() }.validate().is_err());
    }

    #[test]
    fn empty_and_unmasked_datasets_rejected() {
        let net = Network::new(ModelConfig::tiny(), RngState::new(3, 0)).unwrap();
        assert!(Trainer::new(net.clone(), small_cfg(), Dataset::default(), toy(2, 8, 1), None).is_err());
        let mut seg = toy(2, 8, 1);
        seg.samples[0].mask = None;
        assert!(Trainer::new(net, small_cfg(), seg, toy(2, 8, 1), None).is_err());
    }

    #[test]
    fn mse_gradients_match_finite_differences() {
        let r = grad_check(&ModelConfig::tiny(), LossSelector::Mse, 60, 9).unwrap();
        assert_eq!(r.sampled, 60);
        assert!(r.max_rel_error < 1e-3, "{r:?}");
    }
}
