//! Independent verification routes for the numerical core.
//!
//! Every function here re-derives a quantity the library computes
//! elsewhere, by a deliberately different route: Monte Carlo estimation
//! against the closed-form bound, central finite differences against
//! analytic gradients, a one-hot eigenvector expansion against the direct
//! quadratic form, two-pass statistics against the streaming bank builder,
//! a full-sort scan against the heap-based retriever, and a brute-force
//! k-NN precompute against bank construction for timing. The suite
//! runners bundle these with pinned instance counts and tolerances so the
//! command-line `validate` command and the test suite check exactly the
//! same thing.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::embedding::{dot, l2_normalize, EmbeddingError, EmbeddingMatrix};
use crate::eval::EvalError;
use crate::gallery::{GalleryError, GallerySet};
use crate::loss::{
    asym_loss, augmentation_scales, draw_augmented, explicit_loss, implicit_loss, logsumexp,
    negative_logits, quadratic_form, sample_augmented, softplus_gap, LossConfig, LossError,
    LossInstance,
};
use crate::manifest::{GeoTag, ImageRecord};
use crate::membank::{build_bank, BankError};

// Pinned suite parameters. The validation suites and the acceptance tests
// share these so there is exactly one definition of "passing".
pub const BOUND_SUITE_INSTANCES: usize = 200;
pub const BOUND_SUITE_MC_SAMPLES: usize = 10_000;
pub const GRAD_SUITE_INSTANCES: usize = 100;
pub const GRAD_REL_TOL: f64 = 1e-6;
pub const FD_STEP: f64 = 1e-5;
pub const EIG_SUITE_INSTANCES: usize = 100;
pub const EIG_TOL: f64 = 1e-10;
pub const EQUALITY_SUITE_INSTANCES: usize = 100;
pub const EQUALITY_TOL: f64 = 1e-12;
pub const GAP_SUITE_INSTANCES: usize = 100;
pub const CONV_TRIALS: usize = 50;
pub const CONV_KS: [usize; 4] = [1, 10, 100, 1000];
/// Reference-estimate sample count: this multiple of the largest K.
pub const CONV_REF_MULTIPLE: usize = 1000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("k = {k} exceeds the {available} available neighbors")]
    KTooLarge { k: usize, available: usize },
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Gallery(#[from] GalleryError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

/// Streaming Monte Carlo estimate of the sampled loss.
#[derive(Debug, Clone, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub num_samples: usize,
}

/// Estimates the expected sampled loss by drawing positives exactly the
/// way [`sample_augmented`] does (same generator, same order), so for a
/// given seed and count the estimate equals [`explicit_loss`] over those
/// samples bit for bit. The spread comes from a running second-moment
/// accumulation, which stays accurate when the spread is far smaller than
/// the mean.
pub fn mc_expectation_loss(
    inst: &LossInstance,
    cfg: &LossConfig,
    num_samples: usize,
    seed: u64,
) -> Result<McEstimate, OracleError> {
    if num_samples == 0 {
        return Err(OracleError::BadConfig("num_samples must be at least 1".to_string()));
    }
    let scales = augmentation_scales(inst.diag_cov(), cfg.gamma)?;
    let neg_lse = logsumexp(&negative_logits(inst, cfg));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let mut running_mean = 0.0;
    let mut m2 = 0.0;
    for i in 0..num_samples {
        let sample = draw_augmented(&mut rng, inst.g(), &scales);
        let a = dot(inst.q(), &sample) / cfg.tau;
        let term = softplus_gap(a, neg_lse);
        total += term;
        let delta = term - running_mean;
        running_mean += delta / (i + 1) as f64;
        m2 += delta * (term - running_mean);
    }
    let mean = total / num_samples as f64;
    let stderr = if num_samples > 1 {
        (m2 / (num_samples - 1) as f64 / num_samples as f64).sqrt()
    } else {
        0.0
    };
    Ok(McEstimate { mean, stderr, num_samples })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub implicit_value: f64,
    pub mc_mean: f64,
    pub mc_stderr: f64,
    pub num_samples: usize,
    /// Closed-form value minus the sampled estimate; expected non-negative
    /// up to sampling noise.
    pub slack: f64,
    pub satisfied: bool,
}

/// Checks that the closed-form regularized loss upper-bounds the sampled
/// expectation, allowing three standard errors of Monte Carlo noise.
pub fn check_jensen_bound(
    inst: &LossInstance,
    cfg: &LossConfig,
    num_samples: usize,
    seed: u64,
) -> Result<BoundReport, OracleError> {
    let implicit_value = implicit_loss(inst, cfg).value;
    let mc = mc_expectation_loss(inst, cfg, num_samples, seed)?;
    Ok(BoundReport {
        implicit_value,
        mc_mean: mc.mean,
        mc_stderr: mc.stderr,
        num_samples,
        slack: implicit_value - mc.mean,
        satisfied: mc.mean <= implicit_value + 3.0 * mc.stderr,
    })
}

/// Central finite differences of a scalar function.
pub fn finite_diff_grad(f: &dyn Fn(&[f64]) -> f64, point: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; point.len()];
    let mut x = point.to_vec();
    for i in 0..point.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Norm of the difference over the larger of the two norms, floored to
/// avoid dividing by zero for all-zero gradients.
pub fn relative_grad_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = numeric.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// The diagonal quadratic form computed the long way around: expand the
/// diagonal matrix into its eigenpairs (one-hot eigenvectors with the
/// diagonal entries as eigenvalues) and sum eigenvalue-weighted squared
/// projections.
pub fn eig_quadratic_oracle(q: &[f64], diag_cov: &[f64]) -> Result<f64, OracleError> {
    if diag_cov.len() != q.len() {
        return Err(OracleError::BadConfig(format!(
            "dimension mismatch: q has {}, diag_cov has {}",
            q.len(),
            diag_cov.len()
        )));
    }
    let d = q.len();
    let mut acc = 0.0;
    for i in 0..d {
        let mut basis = vec![0.0; d];
        basis[i] = 1.0;
        let projection = dot(q, &basis);
        acc += diag_cov[i] * projection * projection;
    }
    Ok(acc)
}

/// Plain two-pass mean and population variance, the textbook alternative
/// to the bank's single-pass accumulation.
pub fn two_pass_stats(vectors: &[&[f64]]) -> Result<(Vec<f64>, Vec<f64>), OracleError> {
    let n = vectors.len();
    if n == 0 {
        return Err(OracleError::BadConfig("two_pass_stats needs at least one vector".to_string()));
    }
    let d = vectors[0].len();
    let mut mean = vec![0.0; d];
    for v in vectors {
        if v.len() != d {
            return Err(OracleError::BadConfig(format!(
                "ragged input: expected dimension {d}, got {}",
                v.len()
            )));
        }
        for i in 0..d {
            mean[i] += v[i];
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut var = vec![0.0; d];
    for v in vectors {
        for i in 0..d {
            let delta = v[i] - mean[i];
            var[i] += delta * delta;
        }
    }
    for v in &mut var {
        *v /= n as f64;
    }
    Ok((mean, var))
}

/// Retrieval by sorting every gallery score for every query. Ties break
/// toward the lower gallery index, matching the production retriever's
/// contract.
pub fn full_sort_retrieval(
    queries: &EmbeddingMatrix,
    gallery: &EmbeddingMatrix,
    k: usize,
) -> Result<Vec<Vec<usize>>, OracleError> {
    if queries.dim() != gallery.dim() {
        return Err(OracleError::BadConfig(format!(
            "dimension mismatch: queries {}, gallery {}",
            queries.dim(),
            gallery.dim()
        )));
    }
    let k = k.min(gallery.count());
    let mut results = Vec::with_capacity(queries.count());
    for qi in 0..queries.count() {
        let q = queries.row(qi);
        let mut scored: Vec<(f64, usize)> =
            (0..gallery.count()).map(|gi| (dot(q, gallery.row(gi)), gi)).collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        results.push(scored.into_iter().take(k).map(|(_, gi)| gi).collect());
    }
    Ok(results)
}

#[derive(Debug, Clone)]
pub struct KnnBaseline {
    /// Per item, its `k` nearest other items by dot product (self excluded),
    /// ties toward the lower index.
    pub neighbors: Vec<Vec<usize>>,
    pub elapsed: Duration,
}

/// The all-pairs precompute a retrieval system would need without place
/// summaries: for every item, score every other item and fully sort.
pub fn knn_precompute_baseline(
    embeddings: &EmbeddingMatrix,
    k: usize,
) -> Result<KnnBaseline, OracleError> {
    let n = embeddings.count();
    if n == 0 || k > n - 1 {
        return Err(OracleError::KTooLarge { k, available: n.saturating_sub(1) });
    }
    let start = Instant::now();
    let mut neighbors = Vec::with_capacity(n);
    for i in 0..n {
        let qi = embeddings.row(i);
        let mut scored: Vec<(f64, usize)> = (0..n)
            .filter(|&j| j != i)
            .map(|j| (dot(qi, embeddings.row(j)), j))
            .collect();
        // The index tie-break makes the ordering total, so an unstable sort is
        // deterministic here and avoids the stable sort's scratch allocation.
        scored.sort_unstable_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        // Collect by reference so the stored list gets an exact-size buffer
        // instead of inheriting the full n-element scratch allocation.
        let top_k: Vec<usize> = scored[..k].iter().map(|&(_, j)| j).collect();
        neighbors.push(top_k);
    }
    Ok(KnnBaseline { neighbors, elapsed: start.elapsed() })
}

/// A gallery of random unit embeddings grouped into consecutive places,
/// for timing comparisons where content does not matter.
pub fn random_unit_gallery(
    n: usize,
    dim: usize,
    images_per_place: usize,
    seed: u64,
) -> Result<GallerySet, OracleError> {
    if n == 0 || dim == 0 || images_per_place == 0 {
        return Err(OracleError::BadConfig(
            "random_unit_gallery needs positive n, dim, and images_per_place".to_string(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(n);
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        rows.push(l2_normalize(&v)?);
        records.push(ImageRecord {
            id: format!("item-{i:06}"),
            place_id: format!("cluster-{:05}", i / images_per_place),
            row: i,
            geotag: GeoTag::from_frame(i as u64),
        });
    }
    let embeddings = EmbeddingMatrix::from_rows(&rows, true)?;
    Ok(GallerySet::new(records, embeddings)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub bank_seconds: f64,
    pub knn_seconds: f64,
    /// knn time over bank time.
    pub ratio: f64,
}

fn median_of_three(mut samples: [f64; 3]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
    samples[1]
}

/// Times bank construction against the brute-force k-NN precompute on the
/// same galleries, taking the median of three runs of each.
pub fn bench_bank_vs_knn(
    sizes: &[usize],
    dim: usize,
    k: usize,
    seed: u64,
) -> Result<Vec<BenchRow>, OracleError> {
    if sizes.is_empty() {
        return Err(OracleError::BadConfig("bench needs at least one gallery size".to_string()));
    }
    let mut rows = Vec::with_capacity(sizes.len());
    for (idx, &n) in sizes.iter().enumerate() {
        let gallery = random_unit_gallery(n, dim, 10, seed.wrapping_add(idx as u64))?;
        let mut bank_times = [0.0; 3];
        for t in &mut bank_times {
            let start = Instant::now();
            let bank = build_bank(&gallery, false)?;
            *t = start.elapsed().as_secs_f64();
            std::hint::black_box(bank.len());
        }
        let mut knn_times = [0.0; 3];
        for t in &mut knn_times {
            let baseline = knn_precompute_baseline(gallery.embeddings(), k)?;
            *t = baseline.elapsed.as_secs_f64();
            std::hint::black_box(baseline.neighbors.len());
        }
        let bank_seconds = median_of_three(bank_times);
        let knn_seconds = median_of_three(knn_times);
        rows.push(BenchRow { n, bank_seconds, knn_seconds, ratio: knn_seconds / bank_seconds });
    }
    Ok(rows)
}

/// Owns one randomly generated loss evaluation point.
#[derive(Debug, Clone)]
pub struct InstanceBundle {
    pub q: Vec<f64>,
    pub g: Vec<f64>,
    pub negatives: Vec<Vec<f64>>,
    pub diag_cov: Vec<f64>,
}

impl InstanceBundle {
    pub fn instance(&self) -> LossInstance<'_> {
        LossInstance::new(
            &self.q,
            &self.g,
            self.negatives.iter().map(|v| v.as_slice()).collect(),
            &self.diag_cov,
        )
        .expect("bundle construction keeps inputs valid")
    }
}

/// Ranges for random instance generation.
#[derive(Debug, Clone)]
pub struct InstanceDistribution {
    pub dim_range: (usize, usize),
    pub num_negatives_range: (usize, usize),
    pub tau_range: (f64, f64),
    pub gamma_range: (f64, f64),
    pub sigma_range: (f64, f64),
}

impl InstanceDistribution {
    /// Wide ranges for bound checking, including the smallest production
    /// temperature and the largest regularization strength.
    pub fn bound_suite() -> Self {
        Self {
            dim_range: (2, 32),
            num_negatives_range: (1, 50),
            tau_range: (0.05, 1.0),
            gamma_range: (0.0, 20.0),
            sigma_range: (0.0, 1.0),
        }
    }

    /// Conditioning suited to central differences: moderate temperatures
    /// keep the loss surface smooth enough that an order-h^2 truncation
    /// stays below the gradient tolerance.
    pub fn grad_suite() -> Self {
        Self {
            dim_range: (2, 16),
            num_negatives_range: (1, 20),
            tau_range: (0.1, 1.0),
            gamma_range: (0.0, 5.0),
            sigma_range: (0.0, 1.0),
        }
    }

    /// Regularizer strictly active: positive gamma and variances bounded
    /// away from zero.
    pub fn strict_gap_suite() -> Self {
        Self {
            dim_range: (2, 32),
            num_negatives_range: (1, 50),
            tau_range: (0.1, 1.0),
            gamma_range: (0.5, 20.0),
            sigma_range: (0.05, 1.0),
        }
    }

    /// Small instances for sampling-convergence studies, where each trial
    /// needs a large reference estimate.
    pub fn convergence_suite() -> Self {
        Self {
            dim_range: (2, 8),
            num_negatives_range: (1, 5),
            tau_range: (0.2, 1.0),
            gamma_range: (0.5, 5.0),
            sigma_range: (0.05, 1.0),
        }
    }
}

fn random_unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

/// Draws one instance and a matching loss config from the distribution.
pub fn random_instance(dist: &InstanceDistribution, rng: &mut ChaCha8Rng) -> (InstanceBundle, LossConfig) {
    let d = rng.random_range(dist.dim_range.0..=dist.dim_range.1);
    let num_neg = rng.random_range(dist.num_negatives_range.0..=dist.num_negatives_range.1);
    let q = random_unit(rng, d);
    let g = random_unit(rng, d);
    let negatives: Vec<Vec<f64>> = (0..num_neg).map(|_| random_unit(rng, d)).collect();
    let diag_cov: Vec<f64> =
        (0..d).map(|_| rng.random_range(dist.sigma_range.0..=dist.sigma_range.1)).collect();
    let tau = rng.random_range(dist.tau_range.0..=dist.tau_range.1);
    let gamma = rng.random_range(dist.gamma_range.0..=dist.gamma_range.1);
    let cfg = LossConfig { tau, gamma, ..LossConfig::default() };
    (InstanceBundle { q, g, negatives, diag_cov }, cfg)
}

/// Outcome of one validation suite: every failure is described, and the
/// suite passes when there are none.
#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub total: usize,
    pub failures: Vec<String>,
    pub elapsed: Duration,
}

impl SuiteOutcome {
    pub fn pass(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn summary(&self) -> String {
        format!(
            "{}: {}/{} checks passed in {:.2?}{}",
            self.name,
            self.total - self.failures.len(),
            self.total,
            self.elapsed,
            if self.pass() { "" } else { " [FAIL]" },
        )
    }
}

/// Monte Carlo estimates must not exceed the closed-form bound by more
/// than three standard errors, across wide random instances.
pub fn run_bound_suite(seed: u64) -> Result<SuiteOutcome, OracleError> {
    let start = Instant::now();
    let dist = InstanceDistribution::bound_suite();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for i in 0..BOUND_SUITE_INSTANCES {
        let (bundle, cfg) = random_instance(&dist, &mut rng);
        let mc_seed: u64 = rng.random();
        let report = check_jensen_bound(&bundle.instance(), &cfg, BOUND_SUITE_MC_SAMPLES, mc_seed)?;
        if !report.satisfied {
            failures.push(format!(
                "instance {i}: sampled mean {} exceeds bound {} + 3*{}",
                report.mc_mean, report.implicit_value, report.mc_stderr
            ));
        }
    }
    Ok(SuiteOutcome { name: "bound", total: BOUND_SUITE_INSTANCES, failures, elapsed: start.elapsed() })
}

/// Analytic query gradients of both closed-form losses must match central
/// finite differences to [`GRAD_REL_TOL`].
pub fn run_grad_suite(seed: u64) -> Result<SuiteOutcome, OracleError> {
    let start = Instant::now();
    let dist = InstanceDistribution::grad_suite();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for i in 0..GRAD_SUITE_INSTANCES {
        let (bundle, cfg) = random_instance(&dist, &mut rng);
        let inst = bundle.instance();
        for (variant, analytic) in
            [("plain", asym_loss(&inst, &cfg)), ("regularized", implicit_loss(&inst, &cfg))]
        {
            let value_at = |x: &[f64]| {
                let probe = LossInstance::new(
                    x,
                    &bundle.g,
                    bundle.negatives.iter().map(|v| v.as_slice()).collect(),
                    &bundle.diag_cov,
                )
                .expect("probe point is finite");
                match variant {
                    "plain" => asym_loss(&probe, &cfg).value,
                    _ => implicit_loss(&probe, &cfg).value,
                }
            };
            let numeric = finite_diff_grad(&value_at, &bundle.q, FD_STEP);
            let err = relative_grad_error(&analytic.grad_q, &numeric);
            if err > GRAD_REL_TOL {
                failures.push(format!("instance {i} ({variant}): relative gradient error {err:e}"));
            }
        }
    }
    Ok(SuiteOutcome { name: "grad", total: 2 * GRAD_SUITE_INSTANCES, failures, elapsed: start.elapsed() })
}

/// The direct quadratic form must agree with the eigen-expansion route.
pub fn run_eig_suite(seed: u64) -> Result<SuiteOutcome, OracleError> {
    let start = Instant::now();
    let dist = InstanceDistribution::bound_suite();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for i in 0..EIG_SUITE_INSTANCES {
        let (bundle, _) = random_instance(&dist, &mut rng);
        let direct = quadratic_form(&bundle.q, &bundle.diag_cov)?;
        let via_eig = eig_quadratic_oracle(&bundle.q, &bundle.diag_cov)?;
        if (direct - via_eig).abs() > EIG_TOL {
            failures.push(format!("instance {i}: direct {direct} vs eigen {via_eig}"));
        }
    }
    Ok(SuiteOutcome { name: "eig", total: EIG_SUITE_INSTANCES, failures, elapsed: start.elapsed() })
}

/// With the regularizer disabled (`gamma = 0`) the regularized loss must
/// equal the plain one to [`EQUALITY_TOL`] in value and gradient.
pub fn run_equality_suite(seed: u64) -> Result<SuiteOutcome, OracleError> {
    let start = Instant::now();
    let dist = InstanceDistribution::bound_suite();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for i in 0..EQUALITY_SUITE_INSTANCES {
        let (bundle, cfg) = random_instance(&dist, &mut rng);
        let cfg = LossConfig { gamma: 0.0, ..cfg };
        let inst = bundle.instance();
        let a = asym_loss(&inst, &cfg);
        let b = implicit_loss(&inst, &cfg);
        if (a.value - b.value).abs() > EQUALITY_TOL {
            failures.push(format!("instance {i}: values differ by {}", (a.value - b.value).abs()));
        }
        let grad_gap = relative_grad_error(&a.grad_q, &b.grad_q);
        if grad_gap > EQUALITY_TOL {
            failures.push(format!("instance {i}: gradients differ by {grad_gap}"));
        }
    }
    Ok(SuiteOutcome { name: "equality", total: EQUALITY_SUITE_INSTANCES, failures, elapsed: start.elapsed() })
}

/// With the regularizer strictly active the regularized loss must be
/// strictly larger than the plain one.
pub fn run_gap_suite(seed: u64) -> Result<SuiteOutcome, OracleError> {
    let start = Instant::now();
    let dist = InstanceDistribution::strict_gap_suite();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = Vec::new();
    for i in 0..GAP_SUITE_INSTANCES {
        let (bundle, cfg) = random_instance(&dist, &mut rng);
        let inst = bundle.instance();
        let a = asym_loss(&inst, &cfg).value;
        let b = implicit_loss(&inst, &cfg).value;
        if b <= a {
            failures.push(format!("instance {i}: regularized {b} not above plain {a}"));
        }
    }
    Ok(SuiteOutcome { name: "gap", total: GAP_SUITE_INSTANCES, failures, elapsed: start.elapsed() })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceRow {
    pub k: usize,
    pub mean_abs_deviation: f64,
}

/// For each sample count, the mean absolute deviation of the sampled loss
/// from a large-sample reference estimate, averaged over fresh instances.
pub fn convergence_check(
    ks: &[usize],
    num_trials: usize,
    seed: u64,
) -> Result<Vec<ConvergenceRow>, OracleError> {
    if ks.is_empty() || num_trials == 0 {
        return Err(OracleError::BadConfig("convergence_check needs ks and trials".to_string()));
    }
    if ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(OracleError::BadConfig("ks must be strictly increasing".to_string()));
    }
    let max_k = *ks.last().expect("ks non-empty");
    let ref_samples = CONV_REF_MULTIPLE * max_k;
    let dist = InstanceDistribution::convergence_suite();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut deviations = vec![0.0; ks.len()];
    for _ in 0..num_trials {
        let (bundle, cfg) = random_instance(&dist, &mut rng);
        let inst = bundle.instance();
        let ref_seed: u64 = rng.random();
        let reference = mc_expectation_loss(&inst, &cfg, ref_samples, ref_seed)?;
        for (slot, &k) in deviations.iter_mut().zip(ks) {
            let trial_seed: u64 = rng.random();
            let samples = sample_augmented(&bundle.g, &bundle.diag_cov, cfg.gamma, k, trial_seed)?;
            let estimate = explicit_loss(&inst, &cfg, &samples)?;
            *slot += (estimate - reference.mean).abs();
        }
    }
    Ok(ks
        .iter()
        .zip(deviations)
        .map(|(&k, total)| ConvergenceRow { k, mean_abs_deviation: total / num_trials as f64 })
        .collect())
}

/// Sampling error must shrink monotonically as the sample count grows
/// through [`CONV_KS`].
pub fn run_conv_suite(seed: u64) -> Result<SuiteOutcome, OracleError> {
    let start = Instant::now();
    let rows = convergence_check(&CONV_KS, CONV_TRIALS, seed)?;
    let mut failures = Vec::new();
    for pair in rows.windows(2) {
        if pair[1].mean_abs_deviation >= pair[0].mean_abs_deviation {
            failures.push(format!(
                "deviation rose from {:.3e} at K={} to {:.3e} at K={}",
                pair[0].mean_abs_deviation, pair[0].k, pair[1].mean_abs_deviation, pair[1].k
            ));
        }
    }
    Ok(SuiteOutcome { name: "conv", total: rows.len() - 1, failures, elapsed: start.elapsed() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::retrieve;

    fn log_two_fixture() -> (InstanceBundle, LossConfig) {
        (
            InstanceBundle {
                q: vec![1.0, 0.0],
                g: vec![1.0, 0.0],
                negatives: vec![vec![0.0, 1.0]],
                diag_cov: vec![1.0, 1.0],
            },
            LossConfig { tau: 1.0, gamma: 2.0, ..LossConfig::default() },
        )
    }

    #[test]
    fn mc_estimate_stays_under_the_closed_form_bound() {
        let (bundle, cfg) = log_two_fixture();
        let inst = bundle.instance();
        let implicit = implicit_loss(&inst, &cfg).value;
        assert!((implicit - std::f64::consts::LN_2).abs() < 1e-15);
        let report = check_jensen_bound(&inst, &cfg, 100_000, 5).unwrap();
        assert!(report.satisfied, "bound violated: {report:?}");
        assert!(
            report.slack > 10.0 * report.mc_stderr,
            "this fixture should show a clear gap, got slack {} vs stderr {}",
            report.slack,
            report.mc_stderr
        );
    }

    #[test]
    fn mc_stderr_shrinks_like_inverse_sqrt_of_samples() {
        let (bundle, cfg) = log_two_fixture();
        let inst = bundle.instance();
        let small = mc_expectation_loss(&inst, &cfg, 20_000, 7).unwrap();
        let large = mc_expectation_loss(&inst, &cfg, 80_000, 7).unwrap();
        let ratio = large.stderr / small.stderr;
        assert!((ratio - 0.5).abs() < 0.1, "quadrupling samples should halve stderr, ratio {ratio}");
    }

    #[test]
    fn mc_with_zero_gamma_is_exact() {
        let (bundle, cfg) = log_two_fixture();
        let cfg = LossConfig { gamma: 0.0, ..cfg };
        let inst = bundle.instance();
        let est = mc_expectation_loss(&inst, &cfg, 500, 3).unwrap();
        assert_eq!(est.stderr, 0.0, "all samples are identical, so the spread must vanish");
        // Every term equals the plain loss exactly; the mean only picks up
        // summation rounding on the order of machine epsilon.
        let plain = asym_loss(&inst, &cfg).value;
        assert!((est.mean - plain).abs() < 1e-13, "got {} want {plain}", est.mean);
    }

    #[test]
    fn mc_mean_equals_explicit_loss_over_the_same_draws() {
        let (bundle, cfg) = log_two_fixture();
        let inst = bundle.instance();
        for n in [1usize, 2, 37] {
            let est = mc_expectation_loss(&inst, &cfg, n, 911).unwrap();
            let samples = sample_augmented(&bundle.g, &bundle.diag_cov, cfg.gamma, n, 911).unwrap();
            let direct = explicit_loss(&inst, &cfg, &samples).unwrap();
            assert_eq!(est.mean, direct, "estimates must coincide bitwise at n={n}");
        }
    }

    #[test]
    fn finite_differences_recover_a_polynomial_gradient() {
        let f = |x: &[f64]| x[0] * x[0] + 3.0 * x[0] * x[1];
        let point = [0.7, -0.4];
        let grad = finite_diff_grad(&f, &point, 1e-5);
        let exact = [2.0 * 0.7 + 3.0 * (-0.4), 3.0 * 0.7];
        assert!(relative_grad_error(&exact, &grad) < 1e-9, "got {grad:?}");
    }

    #[test]
    fn eigen_route_matches_direct_quadratic_form() {
        let q = [0.6, -0.8, 0.2];
        let cov = [0.5, 1.5, 0.0];
        let direct = quadratic_form(&q, &cov).unwrap();
        let via_eig = eig_quadratic_oracle(&q, &cov).unwrap();
        assert!((direct - via_eig).abs() < 1e-15, "direct {direct} vs eigen {via_eig}");
    }

    #[test]
    fn two_pass_stats_match_hand_values() {
        let a = [0.0, 2.0];
        let b = [1.0, 0.0];
        let (mean, var) = two_pass_stats(&[&a, &b]).unwrap();
        assert_eq!(mean, vec![0.5, 1.0]);
        assert_eq!(var, vec![0.25, 1.0]);
    }

    #[test]
    fn knn_breaks_ties_toward_lower_indices() {
        // Orthonormal rows: every cross similarity is zero, so ordering is
        // decided purely by the tie rule.
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let embeddings = EmbeddingMatrix::from_rows(&rows, true).unwrap();
        let baseline = knn_precompute_baseline(&embeddings, 2).unwrap();
        assert_eq!(baseline.neighbors[0], vec![1, 2]);
        assert_eq!(baseline.neighbors[1], vec![0, 2]);
        assert_eq!(baseline.neighbors[3], vec![0, 1]);
    }

    #[test]
    fn knn_rejects_oversized_k() {
        let rows = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let embeddings = EmbeddingMatrix::from_rows(&rows, true).unwrap();
        assert!(matches!(
            knn_precompute_baseline(&embeddings, 2),
            Err(OracleError::KTooLarge { k: 2, available: 1 })
        ));
    }

    #[test]
    fn knn_agrees_with_the_production_retriever() {
        let gallery = random_unit_gallery(30, 8, 3, 21).unwrap();
        let embeddings = gallery.embeddings();
        let baseline = knn_precompute_baseline(embeddings, 5).unwrap();
        // The retriever sees each item as its own best match (unit dot with
        // itself); dropping that leaves the baseline's neighbor list.
        let retrieved = retrieve(embeddings, embeddings, 6).unwrap();
        for (i, row) in retrieved.iter().enumerate() {
            assert_eq!(row[0], i, "item {i} should match itself first");
            assert_eq!(&row[1..], baseline.neighbors[i].as_slice(), "neighbor mismatch for item {i}");
        }
    }

    #[test]
    fn full_sort_retrieval_matches_hand_ranking() {
        let gallery =
            EmbeddingMatrix::from_rows(&[vec![1.0, 0.0], vec![0.6, 0.8], vec![0.0, 1.0]], true).unwrap();
        let queries = EmbeddingMatrix::from_rows(&[vec![0.0, 1.0]], true).unwrap();
        let got = full_sort_retrieval(&queries, &gallery, 3).unwrap();
        assert_eq!(got, vec![vec![2, 1, 0]]);
    }

    #[test]
    fn bench_produces_timed_rows() {
        let rows = bench_bank_vs_knn(&[200, 400], 32, 10, 3).unwrap();
        assert_eq!(rows.len(), 2);
        for row in &rows {
            assert!(row.bank_seconds > 0.0 && row.knn_seconds > 0.0, "times must be positive: {row:?}");
            assert!(row.ratio > 1.0, "all-pairs precompute should already be slower at n={}", row.n);
        }
    }

    #[test]
    fn random_instances_respect_their_distribution() {
        let dist = InstanceDistribution::strict_gap_suite();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let (bundle, cfg) = random_instance(&dist, &mut rng);
            assert!(bundle.q.len() >= 2 && bundle.q.len() <= 32);
            assert!(!bundle.negatives.is_empty() && bundle.negatives.len() <= 50);
            assert!(bundle.diag_cov.iter().all(|&s| (0.05..=1.0).contains(&s)));
            assert!(cfg.gamma >= 0.5 && cfg.gamma <= 20.0);
            assert!(cfg.tau >= 0.1 && cfg.tau <= 1.0);
        }
    }

    #[test]
    fn equality_and_gap_suites_pass() {
        let eq = run_equality_suite(41).unwrap();
        assert!(eq.pass(), "{:?}", eq.failures);
        let gap = run_gap_suite(43).unwrap();
        assert!(gap.pass(), "{:?}", gap.failures);
    }

    #[test]
    fn eig_suite_passes() {
        let outcome = run_eig_suite(47).unwrap();
        assert!(outcome.pass(), "{:?}", outcome.failures);
    }

    #[test]
    fn convergence_deviation_shrinks_with_more_samples() {
        let rows = convergence_check(&[1, 4, 16], 8, 53).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(
            rows[0].mean_abs_deviation > rows[2].mean_abs_deviation,
            "16-sample estimates should beat single samples: {rows:?}"
        );
    }
}
