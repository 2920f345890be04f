//! Contrastive compatibility losses against a bank of place centroids.
//!
//! All variants share one positive term: the query embedding `q` is pulled
//! toward the stored gallery embedding `g` of the same image at temperature
//! `tau`, against negative centroid logits. They differ in the negatives:
//!
//! * [`asym_loss`] scores negatives by their raw logits `q.c_j / tau`.
//! * [`implicit_loss`] adds `gamma / (2 tau^2) * q^T diag_cov q` to every
//!   negative logit, penalizing query directions with high within-place
//!   variance. The shift is identical for all negatives, so their relative
//!   ranking never changes.
//! * [`explicit_loss`] averages raw-logit terms over positives resampled
//!   from the place's variance via [`sample_augmented`].
//!
//! Everything is computed in f64 through max-subtracted log-sum-exp, so
//! logit magnitudes around `1e4` (and the large regularizer shifts that
//! small `tau` produces) stay finite. `q` is treated as a free vector and
//! `grad_q` is the exact gradient in it; unit-norm `q` is the expected
//! usage, not an enforced precondition.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{check_finite, dot};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("input contains a non-finite value")]
    NonFiniteInput,
    #[error("diag_cov component {index} is negative ({value})")]
    NegativeVariance { index: usize, value: f64 },
    #[error("no samples provided")]
    EmptySamples,
    #[error("empty batch")]
    EmptyBatch,
    #[error("bad config: {0}")]
    BadConfig(String),
}

/// Temperature and augmentation strength shared by the loss variants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub gamma: f64,
    /// Sample count for the explicit variant.
    pub num_samples: usize,
    /// Optional uniform negative subsample size used by training loops;
    /// the loss functions themselves always use every negative they are given.
    pub negative_subsample: Option<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { tau: 0.05, gamma: 15.0, num_samples: 10, negative_subsample: None }
    }
}

impl LossConfig {
    pub fn new(tau: f64, gamma: f64) -> Result<Self, LossError> {
        let cfg = Self { tau, gamma, ..Self::default() };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LossError> {
        if !self.tau.is_finite() || self.tau <= 0.0 {
            return Err(LossError::BadConfig(format!("tau must be positive and finite, got {}", self.tau)));
        }
        if !self.gamma.is_finite() || self.gamma < 0.0 {
            return Err(LossError::BadConfig(format!("gamma must be non-negative and finite, got {}", self.gamma)));
        }
        if self.num_samples == 0 {
            return Err(LossError::BadConfig("num_samples must be at least 1".to_string()));
        }
        if self.negative_subsample == Some(0) {
            return Err(LossError::BadConfig("negative_subsample must be at least 1 when set".to_string()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    Asym,
    Implicit,
    Explicit,
}

/// One loss evaluation point: query, its positive gallery embedding, the
/// negative centroids, and the positive place's diagonal variance.
#[derive(Debug, Clone)]
pub struct LossInstance<'a> {
    q: &'a [f64],
    g: &'a [f64],
    negatives: Vec<&'a [f64]>,
    diag_cov: &'a [f64],
}

impl<'a> LossInstance<'a> {
    pub fn new(
        q: &'a [f64],
        g: &'a [f64],
        negatives: Vec<&'a [f64]>,
        diag_cov: &'a [f64],
    ) -> Result<Self, LossError> {
        let d = q.len();
        for other in [g, diag_cov].into_iter().chain(negatives.iter().copied()) {
            if other.len() != d {
                return Err(LossError::DimensionMismatch { expected: d, got: other.len() });
            }
        }
        for v in [q, g].into_iter().chain(negatives.iter().copied()) {
            check_finite(v).map_err(|_| LossError::NonFiniteInput)?;
        }
        for (index, &value) in diag_cov.iter().enumerate() {
            if !value.is_finite() {
                return Err(LossError::NonFiniteInput);
            }
            if value < 0.0 {
                return Err(LossError::NegativeVariance { index, value });
            }
        }
        Ok(Self { q, g, negatives, diag_cov })
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn q(&self) -> &[f64] {
        self.q
    }

    pub fn g(&self) -> &[f64] {
        self.g
    }

    pub fn negatives(&self) -> &[&'a [f64]] {
        &self.negatives
    }

    pub fn diag_cov(&self) -> &[f64] {
        self.diag_cov
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad_q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    pub mean_value: f64,
    pub grads: Vec<Vec<f64>>,
}

/// Max-subtracted log-sum-exp; empty input yields negative infinity.
pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + sum.ln()
}

/// The contrastive value `log(1 + e^(neg_lse - s_pos))`, computed from the
/// logit gap so no precision is lost when the gap is large. Every loss
/// variant funnels its per-term value through this one function, which is
/// what makes the degenerate-case equalities between them bitwise.
pub(crate) fn softplus_gap(s_pos: f64, neg_lse: f64) -> f64 {
    if neg_lse == f64::NEG_INFINITY {
        return 0.0;
    }
    let delta = neg_lse - s_pos;
    if delta <= 0.0 {
        delta.exp().ln_1p()
    } else {
        delta + (-delta).exp().ln_1p()
    }
}

/// Raw negative logits `q.c_j / tau`, in the instance's negative order.
pub fn negative_logits(inst: &LossInstance, cfg: &LossConfig) -> Vec<f64> {
    inst.negatives.iter().map(|c| dot(inst.q, c) / cfg.tau).collect()
}

/// Negative logits with the variance shift `gamma/(2 tau^2) * q^T diag_cov q`
/// added to every entry.
pub fn regularized_negative_logits(inst: &LossInstance, cfg: &LossConfig) -> Vec<f64> {
    let shift = variance_shift(inst, cfg);
    inst.negatives.iter().map(|c| dot(inst.q, c) / cfg.tau + shift).collect()
}

fn variance_shift(inst: &LossInstance, cfg: &LossConfig) -> f64 {
    let quad: f64 = (0..inst.dim()).map(|i| inst.diag_cov[i] * inst.q[i] * inst.q[i]).sum();
    cfg.gamma / (2.0 * cfg.tau * cfg.tau) * quad
}

fn contrastive(inst: &LossInstance, cfg: &LossConfig, neg_logits: &[f64]) -> LossOutput {
    let d = inst.dim();
    let s_pos = dot(inst.q, inst.g) / cfg.tau;
    let neg_lse = logsumexp(neg_logits);
    let value = softplus_gap(s_pos, neg_lse);
    let log_z = s_pos + value;

    let p_pos = (-value).exp();
    let mut grad_q = vec![0.0; d];
    for i in 0..d {
        grad_q[i] = (p_pos - 1.0) * inst.g[i] / cfg.tau;
    }
    for (j, c) in inst.negatives.iter().enumerate() {
        let p_j = (neg_logits[j] - log_z).exp();
        for i in 0..d {
            grad_q[i] += p_j * c[i] / cfg.tau;
        }
    }
    LossOutput { value, grad_q }
}

/// Contrastive loss with raw negative logits. With no negatives the value
/// and gradient are exactly zero.
pub fn asym_loss(inst: &LossInstance, cfg: &LossConfig) -> LossOutput {
    contrastive(inst, cfg, &negative_logits(inst, cfg))
}

/// Contrastive loss with the variance shift on every negative logit. The
/// gradient picks up `gamma/tau^2 * diag_cov_i * q_i` weighted by the total
/// negative softmax mass. Reduces exactly to [`asym_loss`] when the shift
/// is zero (`gamma == 0` or `diag_cov == 0`).
pub fn implicit_loss(inst: &LossInstance, cfg: &LossConfig) -> LossOutput {
    let neg_logits = regularized_negative_logits(inst, cfg);
    let mut out = contrastive(inst, cfg, &neg_logits);
    if !inst.negatives.is_empty() {
        let s_pos = dot(inst.q, inst.g) / cfg.tau;
        let neg_lse = logsumexp(&neg_logits);
        let neg_mass = (neg_lse - (s_pos + out.value)).exp();
        let coeff = neg_mass * cfg.gamma / (cfg.tau * cfg.tau);
        for i in 0..inst.dim() {
            out.grad_q[i] += coeff * inst.diag_cov[i] * inst.q[i];
        }
    }
    out
}

/// Mean contrastive value over resampled positives; negatives keep their
/// raw logits. A single sample equal to `g` reproduces [`asym_loss`] exactly.
pub fn explicit_loss(inst: &LossInstance, cfg: &LossConfig, samples: &[Vec<f64>]) -> Result<f64, LossError> {
    if samples.is_empty() {
        return Err(LossError::EmptySamples);
    }
    for s in samples {
        if s.len() != inst.dim() {
            return Err(LossError::DimensionMismatch { expected: inst.dim(), got: s.len() });
        }
        check_finite(s).map_err(|_| LossError::NonFiniteInput)?;
    }
    let neg_lse = logsumexp(&negative_logits(inst, cfg));
    let mut total = 0.0;
    for s in samples {
        let a = dot(inst.q, s) / cfg.tau;
        total += softplus_gap(a, neg_lse);
    }
    Ok(total / samples.len() as f64)
}

pub(crate) fn augmentation_scales(diag_cov: &[f64], gamma: f64) -> Result<Vec<f64>, LossError> {
    if !gamma.is_finite() || gamma < 0.0 {
        return Err(LossError::BadConfig(format!("gamma must be non-negative and finite, got {gamma}")));
    }
    diag_cov
        .iter()
        .enumerate()
        .map(|(index, &value)| {
            if !value.is_finite() {
                Err(LossError::NonFiniteInput)
            } else if value < 0.0 {
                Err(LossError::NegativeVariance { index, value })
            } else {
                Ok((gamma * value).sqrt())
            }
        })
        .collect()
}

pub(crate) fn draw_augmented(rng: &mut ChaCha8Rng, g: &[f64], scales: &[f64]) -> Vec<f64> {
    g.iter()
        .zip(scales)
        .map(|(&gi, &scale)| {
            let z: f64 = rng.sample(StandardNormal);
            gi + scale * z
        })
        .collect()
}

/// Draws `k` positives from a Gaussian centered at `g` with per-dimension
/// variance `gamma * diag_cov_i`. Samples are not renormalized. `gamma == 0`
/// returns `k` exact copies of `g`.
pub fn sample_augmented(
    g: &[f64],
    diag_cov: &[f64],
    gamma: f64,
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, LossError> {
    if diag_cov.len() != g.len() {
        return Err(LossError::DimensionMismatch { expected: g.len(), got: diag_cov.len() });
    }
    check_finite(g).map_err(|_| LossError::NonFiniteInput)?;
    if k == 0 {
        return Err(LossError::EmptySamples);
    }
    let scales = augmentation_scales(diag_cov, gamma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..k).map(|_| draw_augmented(&mut rng, g, &scales)).collect())
}

/// `sum_i diag_cov_i * q_i^2`, the diagonal quadratic form.
pub fn quadratic_form(q: &[f64], diag_cov: &[f64]) -> Result<f64, LossError> {
    if diag_cov.len() != q.len() {
        return Err(LossError::DimensionMismatch { expected: q.len(), got: diag_cov.len() });
    }
    check_finite(q).map_err(|_| LossError::NonFiniteInput)?;
    let mut acc = 0.0;
    for (index, (&sigma, &qi)) in diag_cov.iter().zip(q).enumerate() {
        if !sigma.is_finite() {
            return Err(LossError::NonFiniteInput);
        }
        if sigma < 0.0 {
            return Err(LossError::NegativeVariance { index, value: sigma });
        }
        acc += sigma * qi * qi;
    }
    Ok(acc)
}

/// Mean value and per-instance query gradients for a training minibatch.
/// Only the asym and implicit modes are closed-form; the explicit mode
/// needs per-instance samples and is assembled by the training loop.
pub fn batch_loss(instances: &[LossInstance], cfg: &LossConfig, mode: LossMode) -> Result<BatchLoss, LossError> {
    if instances.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let eval = match mode {
        LossMode::Asym => asym_loss,
        LossMode::Implicit => implicit_loss,
        LossMode::Explicit => {
            return Err(LossError::BadConfig(
                "explicit mode needs samples; use explicit_loss or the training loop".to_string(),
            ))
        }
    };
    let mut mean_value = 0.0;
    let mut grads = Vec::with_capacity(instances.len());
    for inst in instances {
        let out = eval(inst, cfg);
        mean_value += out.value;
        grads.push(out.grad_q);
    }
    Ok(BatchLoss { mean_value: mean_value / instances.len() as f64, grads })
}
