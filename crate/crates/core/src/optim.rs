//! Query-model training: AdamW with decoupled weight decay under a cosine
//! learning-rate schedule.
//!
//! Training iterates over gallery images. Each image contributes one loss
//! instance: the query network embeds the image's raw features, the
//! positive is that image's stored gallery embedding, and the negatives
//! are the bank centroids of every other place. The loop is strictly
//! serial and every random choice (epoch shuffles, explicit-mode sample
//! draws) derives from the configured seed, so a rerun with the same
//! inputs reproduces the final parameters bit for bit.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gallery::GallerySet;
use crate::loss::{
    asym_loss, implicit_loss, sample_augmented, LossConfig, LossError, LossInstance, LossMode,
};
use crate::membank::{BankError, MemoryBank};
use crate::model::{ModelError, ModelGrads, QueryModelParams};

#[derive(Debug, Error)]
pub enum OptimError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("schedule step {step} out of range for {total} total steps")]
    BadStep { step: u64, total: u64 },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("gradient contains a non-finite value")]
    NonFiniteGrad,
    #[error("gallery has no images to train on")]
    EmptyGallery,
    #[error("gallery has no raw features; training needs the query-side inputs")]
    MissingRawFeature,
    #[error("bank does not match gallery: {0}")]
    BankMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Bank(#[from] BankError),
}

/// Optimizer and schedule settings. Defaults: AdamW(0.9, 0.999, 1e-8) with
/// weight decay 0.01, cosine from 5e-4 down to 1e-4, 15 epochs of batch 64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub loss_mode: LossMode,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr_max: 5e-4,
            lr_min: 1e-4,
            epochs: 15,
            batch_size: 64,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
            loss: LossConfig::default(),
            loss_mode: LossMode::Implicit,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        for (name, v) in [("lr_max", self.lr_max), ("lr_min", self.lr_min)] {
            if !v.is_finite() || v <= 0.0 {
                return Err(OptimError::BadConfig(format!("{name} must be positive and finite, got {v}")));
            }
        }
        if self.lr_min > self.lr_max {
            return Err(OptimError::BadConfig(format!(
                "lr_min {} exceeds lr_max {}",
                self.lr_min, self.lr_max
            )));
        }
        if self.epochs == 0 {
            return Err(OptimError::BadConfig("epochs must be at least 1".to_string()));
        }
        if self.batch_size == 0 {
            return Err(OptimError::BadConfig("batch_size must be at least 1".to_string()));
        }
        for (name, v, lo, hi) in [("beta1", self.beta1, 0.0, 1.0), ("beta2", self.beta2, 0.0, 1.0)] {
            if !v.is_finite() || v < lo || v >= hi {
                return Err(OptimError::BadConfig(format!("{name} must be in [0, 1), got {v}")));
            }
        }
        if !self.eps.is_finite() || self.eps <= 0.0 {
            return Err(OptimError::BadConfig(format!("eps must be positive, got {}", self.eps)));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(OptimError::BadConfig(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// Cosine interpolation from `lr_max` at step 0 to `lr_min` at
/// `total_steps`. Both endpoints are attained exactly.
pub fn cosine_lr(step: u64, total_steps: u64, lr_max: f64, lr_min: f64) -> Result<f64, OptimError> {
    if total_steps == 0 || step > total_steps {
        return Err(OptimError::BadStep { step, total: total_steps });
    }
    let w = 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total_steps as f64).cos());
    Ok(lr_min + (lr_max - lr_min) * w)
}

/// First and second moment accumulators for one flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl AdamWState {
    pub fn new(num_params: usize) -> Self {
        Self { step: 0, m: vec![0.0; num_params], v: vec![0.0; num_params] }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One AdamW update in place. Weight decay is decoupled: it scales the
/// parameter directly and never enters the moment estimates.
pub fn adamw_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamWState,
    lr: f64,
    cfg: &OptimConfig,
) -> Result<(), OptimError> {
    if grads.len() != params.len() {
        return Err(OptimError::ShapeMismatch { expected: params.len(), got: grads.len() });
    }
    if state.m.len() != params.len() {
        return Err(OptimError::ShapeMismatch { expected: params.len(), got: state.m.len() });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(OptimError::NonFiniteGrad);
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * params[i]);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<TrainLogRow>,
}

impl TrainLog {
    /// Mean of the per-batch losses recorded during one epoch.
    pub fn epoch_mean_loss(&self, epoch: usize) -> Option<f64> {
        let losses: Vec<f64> =
            self.rows.iter().filter(|r| r.epoch == epoch).map(|r| r.mean_loss).collect();
        if losses.is_empty() {
            return None;
        }
        Some(losses.iter().sum::<f64>() / losses.len() as f64)
    }
}

struct TrainContext {
    /// Per gallery record: index of its place in the bank entry order.
    record_place: Vec<usize>,
    /// Per place: centroids of every other place, cloned out of the bank.
    negatives: Vec<Vec<Vec<f64>>>,
}

fn prepare_context(gallery: &GallerySet, bank: &MemoryBank) -> Result<TrainContext, OptimError> {
    let mut record_place = Vec::with_capacity(gallery.len());
    for record in gallery.records() {
        let idx = bank.place_index(&record.place_id).ok_or_else(|| {
            OptimError::BankMismatch(format!("place {:?} is missing from the bank", record.place_id))
        })?;
        record_place.push(idx);
    }
    let mut negatives = Vec::with_capacity(bank.len());
    for own in 0..bank.len() {
        let negs: Vec<Vec<f64>> = (0..bank.len())
            .filter(|&j| j != own)
            .map(|j| bank.entry(j).centroid.clone())
            .collect();
        negatives.push(negs);
    }
    Ok(TrainContext { record_place, negatives })
}

/// Uniformly subsamples the cached negative set when the loss config caps
/// it; otherwise borrows every negative centroid.
fn select_negatives<'a>(
    all: &'a [Vec<f64>],
    cap: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Vec<&'a [f64]> {
    match cap {
        Some(k) if k < all.len() => {
            let mut idx: Vec<usize> = (0..all.len()).collect();
            idx.shuffle(rng);
            idx.truncate(k);
            idx.sort_unstable();
            idx.into_iter().map(|i| all[i].as_slice()).collect()
        }
        _ => all.iter().map(|v| v.as_slice()).collect(),
    }
}

/// Trains the query model over the gallery and returns the updated
/// parameters with a per-batch log. Deterministic for a fixed config.
pub fn train(
    gallery: &GallerySet,
    bank: &MemoryBank,
    params: QueryModelParams,
    cfg: &OptimConfig,
) -> Result<(QueryModelParams, TrainLog), OptimError> {
    cfg.validate()?;
    if gallery.is_empty() {
        return Err(OptimError::EmptyGallery);
    }
    let raw = gallery.raw_features().ok_or(OptimError::MissingRawFeature)?;
    if params.input_dim() != raw.dim() {
        return Err(OptimError::ShapeMismatch { expected: raw.dim(), got: params.input_dim() });
    }
    if params.output_dim() != gallery.embeddings().dim() {
        return Err(OptimError::ShapeMismatch {
            expected: gallery.embeddings().dim(),
            got: params.output_dim(),
        });
    }
    if bank.dim() != gallery.embeddings().dim() {
        return Err(OptimError::BankMismatch(format!(
            "bank dimension {} differs from embedding dimension {}",
            bank.dim(),
            gallery.embeddings().dim()
        )));
    }
    if bank.len() < 2 && cfg.loss.negative_subsample.is_none() {
        // A single place has no negatives; the loss would be identically zero.
        return Err(OptimError::BankMismatch(
            "bank needs at least two places to form negatives".to_string(),
        ));
    }

    let ctx = prepare_context(gallery, bank)?;
    let n = gallery.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = (cfg.epochs * batches_per_epoch) as u64;

    let mut params = params;
    let mut flat = params.flatten();
    let mut state = AdamWState::new(flat.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut log = TrainLog::default();
    let mut step: u64 = 0;
    let mut example_counter: u64 = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let lr = cosine_lr(step, total_steps, cfg.lr_max, cfg.lr_min)?;
            let mut batch_grads = ModelGrads::zeros_like(&params);
            let mut batch_loss_total = 0.0;
            for &record_idx in batch {
                let place_idx = ctx.record_place[record_idx];
                let trace = params.forward_traced(raw.row(record_idx))?;
                let g = gallery.embedding_of(record_idx);
                let stats = bank.entry(place_idx);
                let negs =
                    select_negatives(&ctx.negatives[place_idx], cfg.loss.negative_subsample, &mut rng);
                let inst = LossInstance::new(trace.output(), g, negs, &stats.diag_cov)?;
                let (value, grad_q) = match cfg.loss_mode {
                    LossMode::Asym => {
                        let out = asym_loss(&inst, &cfg.loss);
                        (out.value, out.grad_q)
                    }
                    LossMode::Implicit => {
                        let out = implicit_loss(&inst, &cfg.loss);
                        (out.value, out.grad_q)
                    }
                    LossMode::Explicit => {
                        let sample_seed = cfg
                            .seed
                            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                            .wrapping_add(example_counter);
                        let samples = sample_augmented(
                            g,
                            &stats.diag_cov,
                            cfg.loss.gamma,
                            cfg.loss.num_samples,
                            sample_seed,
                        )?;
                        // Each sample plays the positive in its own instance;
                        // averaging those values reproduces the sampled loss.
                        let mut total = 0.0;
                        let mut grad = vec![0.0; inst.dim()];
                        for s in &samples {
                            let s_inst = LossInstance::new(
                                trace.output(),
                                s,
                                inst.negatives().to_vec(),
                                &stats.diag_cov,
                            )?;
                            let out = asym_loss(&s_inst, &cfg.loss);
                            total += out.value;
                            for (acc, gq) in grad.iter_mut().zip(&out.grad_q) {
                                *acc += gq;
                            }
                        }
                        let k = samples.len() as f64;
                        for x in &mut grad {
                            *x /= k;
                        }
                        (total / k, grad)
                    }
                };
                batch_loss_total += value;
                let example_grads = params.backward_traced(&trace, &grad_q)?;
                batch_grads.accumulate(&example_grads);
                example_counter += 1;
            }
            batch_grads.scale(1.0 / batch.len() as f64);
            adamw_step(&mut flat, &batch_grads.flatten(), &mut state, lr, cfg)?;
            params.assign_flat(&flat)?;
            log.rows.push(TrainLogRow {
                epoch,
                step,
                lr,
                mean_loss: batch_loss_total / batch.len() as f64,
            });
            step += 1;
        }
    }
    Ok((params, log))
}
