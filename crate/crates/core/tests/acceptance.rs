//! =======================================================================
//! Acceptance suite
//! =======================================================================
//!
//! One test per shipping criterion, numbered c01 through c12. Every test
//! prints a single `[PASS]`/`[FAIL]` line with the measured quantities so
//! a full run reads as a checklist. Seeds and tolerances are pinned here;
//! the numerical suites themselves (instance counts, tolerances, sample
//! sizes) are pinned in `vpr_core::oracle` and shared with the CLI's
//! `validate` command.
//!
//! c11 (the timing benchmark) is `#[ignore]`d because wall-clock ratios
//! belong to a quiet machine, not to every `cargo test` run:
//! `cargo test --test acceptance -- --ignored` runs it.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use vpr_core::embedding::EmbeddingMatrix;
use vpr_core::eval::{build_gt_geo, recall_at_k, retrieve};
use vpr_core::loss::{
    asym_loss, implicit_loss, negative_logits, regularized_negative_logits, LossConfig, LossMode,
};
use vpr_core::membank::build_bank;
use vpr_core::model::QueryModelParams;
use vpr_core::optim::{cosine_lr, train, OptimConfig};
use vpr_core::oracle::{
    bench_bank_vs_knn, full_sort_retrieval, random_instance, run_bound_suite, run_conv_suite,
    run_equality_suite, run_eig_suite, run_gap_suite, run_grad_suite, two_pass_stats,
    InstanceBundle, InstanceDistribution, EQUALITY_TOL,
};
use vpr_core::synth::{gen_world, WorldConfig};

const SEED_C01: u64 = 101;
const SEED_C02: u64 = 102;
const SEED_C03: u64 = 103;
const SEED_C04: u64 = 104;
const SEED_C05: u64 = 105;
const SEED_C06: u64 = 106;
const SEED_C07: u64 = 107;
const SEED_C08: u64 = 108;
const SEED_C11: u64 = 111;
const SEED_C12: u64 = 112;
const ABLATION_WORLD_SEEDS: [u64; 5] = [1101, 1102, 1103, 1104, 1105];

const C01_TIME_BUDGET_S: f64 = 60.0;
const C04_TIME_BUDGET_S: f64 = 120.0;
const C10_TIME_BUDGET_S: f64 = 300.0;
const C07_STATS_REL_TOL: f64 = 1e-12;
const C07_SUM_REL_TOL: f64 = 1e-10;
const C11_MIN_SPEEDUP: f64 = 20.0;

fn report(criterion: &str, pass: bool, detail: &str) {
    println!("[{}] {criterion}: {detail}", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{criterion} failed: {detail}");
}

/// Indices sorted by descending value, ties toward the lower index.
fn rank_desc(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    idx
}

// -----------------------------------------------------------------------
// c01: sampled-loss estimates never exceed the closed-form bound
// (three standard errors of slack allowed), 200 wide random instances,
// 10^4 samples each, within 60 seconds.
// -----------------------------------------------------------------------
#[test]
fn c01_closed_form_bounds_sampled_loss() {
    let outcome = run_bound_suite(SEED_C01).unwrap();
    let within_budget = outcome.elapsed.as_secs_f64() < C01_TIME_BUDGET_S;
    report(
        "c01 bound",
        outcome.pass() && within_budget,
        &format!(
            "{}/{} instances bounded in {:.2?} (budget {C01_TIME_BUDGET_S}s){}",
            outcome.total - outcome.failures.len(),
            outcome.total,
            outcome.elapsed,
            outcome.failures.first().map(|f| format!("; first failure: {f}")).unwrap_or_default(),
        ),
    );
}

// -----------------------------------------------------------------------
// c02: with the regularizer inert (gamma = 0, or all variances zero) the
// regularized loss equals the plain one to 1e-12 in value and gradient,
// 100 instances per route.
// -----------------------------------------------------------------------
#[test]
fn c02_inert_regularizer_changes_nothing() {
    let outcome = run_equality_suite(SEED_C02).unwrap();

    // Second route: gamma stays random but every variance is zero.
    let dist = InstanceDistribution::bound_suite();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED_C02 ^ 0xFFFF);
    let mut zero_cov_failures = 0usize;
    let total = 100;
    for _ in 0..total {
        let (bundle, cfg) = random_instance(&dist, &mut rng);
        let bundle = InstanceBundle { diag_cov: vec![0.0; bundle.q.len()], ..bundle };
        let inst = bundle.instance();
        let a = asym_loss(&inst, &cfg);
        let b = implicit_loss(&inst, &cfg);
        let value_gap = (a.value - b.value).abs();
        let grad_gap: f64 =
            a.grad_q.iter().zip(&b.grad_q).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        if value_gap > EQUALITY_TOL || grad_gap > EQUALITY_TOL {
            zero_cov_failures += 1;
        }
    }

    report(
        "c02 equality",
        outcome.pass() && zero_cov_failures == 0,
        &format!(
            "gamma=0 route {}/{} within {EQUALITY_TOL:e}; zero-variance route {}/{total}",
            outcome.total - outcome.failures.len(),
            outcome.total,
            total - zero_cov_failures,
        ),
    );
}

// -----------------------------------------------------------------------
// c03: with the regularizer strictly active (gamma > 0 and variances
// bounded away from zero) the regularized loss exceeds the plain one
// strictly, 100 instances.
// -----------------------------------------------------------------------
#[test]
fn c03_active_regularizer_strictly_raises_the_loss() {
    let outcome = run_gap_suite(SEED_C03).unwrap();
    report(
        "c03 strict gap",
        outcome.pass(),
        &format!(
            "{}/{} instances strictly above{}",
            outcome.total - outcome.failures.len(),
            outcome.total,
            outcome.failures.first().map(|f| format!("; first failure: {f}")).unwrap_or_default(),
        ),
    );
}

// -----------------------------------------------------------------------
// c04: analytic query gradients of both closed-form losses match central
// finite differences (h = 1e-5) to a relative error of 1e-6 on at least
// 100 instances, within 120 seconds.
// -----------------------------------------------------------------------
#[test]
fn c04_analytic_gradients_match_finite_differences() {
    let outcome = run_grad_suite(SEED_C04).unwrap();
    let within_budget = outcome.elapsed.as_secs_f64() < C04_TIME_BUDGET_S;
    report(
        "c04 gradients",
        outcome.pass() && within_budget,
        &format!(
            "{}/{} checks within 1e-6 in {:.2?} (budget {C04_TIME_BUDGET_S}s){}",
            outcome.total - outcome.failures.len(),
            outcome.total,
            outcome.elapsed,
            outcome.failures.first().map(|f| format!("; first failure: {f}")).unwrap_or_default(),
        ),
    );
}

// -----------------------------------------------------------------------
// c05: the diagonal quadratic form agrees with an independent
// eigen-expansion route to 1e-10 on 100 random inputs.
// -----------------------------------------------------------------------
#[test]
fn c05_quadratic_form_agrees_with_eigen_expansion() {
    let outcome = run_eig_suite(SEED_C05).unwrap();
    report(
        "c05 quadratic form",
        outcome.pass(),
        &format!("{}/{} within 1e-10", outcome.total - outcome.failures.len(), outcome.total),
    );
}

// -----------------------------------------------------------------------
// c06: the regularizer shifts every negative logit by the same amount,
// so the negative ranking is identical with and without it; exact
// argsort equality on 100 instances.
// -----------------------------------------------------------------------
#[test]
fn c06_regularizer_preserves_negative_ranking() {
    let dist = InstanceDistribution::strict_gap_suite();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED_C06);
    let total = 100;
    let mut failures = 0usize;
    for _ in 0..total {
        let (bundle, cfg) = random_instance(&dist, &mut rng);
        let inst = bundle.instance();
        let plain = rank_desc(&negative_logits(&inst, &cfg));
        let shifted = rank_desc(&regularized_negative_logits(&inst, &cfg));
        if plain != shifted {
            failures += 1;
        }
    }
    report(
        "c06 ranking",
        failures == 0,
        &format!("{}/{total} argsorts identical", total - failures),
    );
}

// -----------------------------------------------------------------------
// c07: bank statistics match a plain two-pass oracle to 1e-12 relative,
// and count x centroid matches an independently accumulated member sum
// to 1e-10 relative, for every place of a generated world.
// -----------------------------------------------------------------------
#[test]
fn c07_bank_statistics_match_two_pass_oracle() {
    let cfg = WorldConfig {
        num_places: 30,
        images_per_place: 8,
        held_out_queries_per_place: 0,
        raw_dim: 16,
        gallery_dim: 24,
        seed: SEED_C07,
        ..WorldConfig::default()
    };
    let world = gen_world(&cfg).unwrap();
    let gallery = world.gallery_set().unwrap();
    let bank = build_bank(&gallery, false).unwrap();

    let rel_ok = |a: f64, b: f64, tol: f64| (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0);
    let mut stat_failures = 0usize;
    let mut sum_failures = 0usize;
    for (place_id, members) in gallery.place_groups() {
        let vectors: Vec<&[f64]> = members.iter().map(|&m| gallery.embedding_of(m)).collect();
        let (mean, var) = two_pass_stats(&vectors).unwrap();
        let stats = bank.stats_of(place_id).unwrap();
        let stats_match = stats
            .centroid
            .iter()
            .zip(&mean)
            .all(|(a, b)| rel_ok(*a, *b, C07_STATS_REL_TOL))
            && stats.diag_cov.iter().zip(&var).all(|(a, b)| rel_ok(*a, *b, C07_STATS_REL_TOL));
        if !stats_match {
            stat_failures += 1;
        }
        // count * centroid against a direct component sum.
        for i in 0..bank.dim() {
            let direct: f64 = vectors.iter().map(|v| v[i]).sum();
            let scaled = stats.centroid[i] * stats.count as f64;
            if !rel_ok(scaled, direct, C07_SUM_REL_TOL) {
                sum_failures += 1;
                break;
            }
        }
    }
    report(
        "c07 bank stats",
        stat_failures == 0 && sum_failures == 0,
        &format!(
            "{} places: {} stat mismatches, {} sum mismatches",
            bank.len(),
            stat_failures,
            sum_failures
        ),
    );
}

// -----------------------------------------------------------------------
// c08: the heap-based retriever returns exactly what a full sort returns,
// including tie handling, over 50 random galleries of up to 500 items
// with deliberately duplicated rows.
// -----------------------------------------------------------------------
#[test]
fn c08_retriever_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED_C08);
    let trials = 50;
    let mut failures = 0usize;
    for _ in 0..trials {
        let n = rng.random_range(5..=500);
        let dim = rng.random_range(2..=16);
        let n_queries = rng.random_range(1..=20);
        let mut rows: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0f64..1.0)).collect();
                v
            })
            .collect();
        // Force exact ties by copying earlier rows into later slots.
        for i in 0..n / 5 {
            let src = rng.random_range(0..n);
            let dst = rng.random_range(0..n);
            let copied = rows[src].clone();
            rows[dst] = copied;
            let _ = i;
        }
        let gallery = EmbeddingMatrix::from_rows(&rows, false).unwrap();
        let queries_rows: Vec<Vec<f64>> = (0..n_queries)
            .map(|_| (0..dim).map(|_| rng.random_range(-1.0f64..1.0)).collect())
            .collect();
        let queries = EmbeddingMatrix::from_rows(&queries_rows, false).unwrap();
        let k = rng.random_range(1..=n + 5);
        let fast = retrieve(&queries, &gallery, k).unwrap();
        let slow = full_sort_retrieval(&queries, &gallery, k).unwrap();
        if fast != slow {
            failures += 1;
        }
    }
    report(
        "c08 retrieval",
        failures == 0,
        &format!("{}/{trials} galleries identical under ties", trials - failures),
    );
}

// -----------------------------------------------------------------------
// c09: the cosine schedule starts at exactly lr_max, ends at exactly
// lr_min, and never increases in between.
// -----------------------------------------------------------------------
#[test]
fn c09_cosine_schedule_endpoints_exact_and_monotone() {
    let (lr_max, lr_min) = (5e-4, 1e-4);
    let mut ok = true;
    let mut detail = String::new();
    for total in [7u64, 480, 1000] {
        let start = cosine_lr(0, total, lr_max, lr_min).unwrap();
        let end = cosine_lr(total, total, lr_max, lr_min).unwrap();
        if start != lr_max || end != lr_min {
            ok = false;
            detail = format!("endpoints at total={total}: start {start}, end {end}");
            break;
        }
        let mut prev = f64::INFINITY;
        for s in 0..=total {
            let lr = cosine_lr(s, total, lr_max, lr_min).unwrap();
            if lr > prev {
                ok = false;
                detail = format!("rose at step {s}/{total}");
                break;
            }
            prev = lr;
        }
    }
    if ok {
        detail = "start == lr_max and end == lr_min bitwise; non-increasing at T in {7, 480, 1000}"
            .to_string();
    }
    report("c09 schedule", ok, &detail);
}

/// Embeds every row of `raw` with the query model.
fn embed_all(params: &QueryModelParams, raw: &EmbeddingMatrix) -> EmbeddingMatrix {
    let rows: Vec<Vec<f64>> =
        (0..raw.count()).map(|i| params.forward(raw.row(i)).unwrap()).collect();
    EmbeddingMatrix::from_rows(&rows, true).unwrap()
}

/// Recall@1 of held-out queries against the frozen gallery, with
/// same-place ground truth derived from coordinates at 25 m.
fn heldout_recall_at_1(world: &vpr_core::synth::SynthWorld, params: &QueryModelParams) -> f64 {
    let query_embs = embed_all(params, &world.query_raw);
    let rankings = retrieve(&query_embs, &world.gallery_embeddings, 1).unwrap();
    let gt = build_gt_geo(&world.query_records, &world.gallery_records, 25.0).unwrap();
    let rep = recall_at_k(&rankings, &gt, &[1]).unwrap();
    rep.recall_at[&1]
}

// -----------------------------------------------------------------------
// c10: training with the variance regularizer on (gamma = 15) reaches at
// least the held-out Recall@1 of training without it (gamma = 0), as a
// mean over five generated worlds with at least 10x anisotropy, within
// five minutes.
// -----------------------------------------------------------------------
#[test]
fn c10_variance_regularizer_does_not_hurt_heldout_recall() {
    let start = Instant::now();
    let mut asym_total = 0.0;
    let mut implicit_total = 0.0;
    for &world_seed in &ABLATION_WORLD_SEEDS {
        let world_cfg = WorldConfig { seed: world_seed, ..WorldConfig::default() };
        let world = gen_world(&world_cfg).unwrap();
        let gallery = world.gallery_set().unwrap();
        let bank = build_bank(&gallery, false).unwrap();
        let params0 = QueryModelParams::init(
            &[world_cfg.raw_dim, 256, world_cfg.gallery_dim],
            world_seed ^ 0xABCD,
        )
        .unwrap();

        let base = OptimConfig { seed: world_seed ^ 0x5EED, ..OptimConfig::default() };
        let asym_cfg = OptimConfig {
            loss: LossConfig { gamma: 0.0, ..base.loss },
            loss_mode: LossMode::Asym,
            ..base.clone()
        };
        let implicit_cfg = OptimConfig {
            loss: LossConfig { gamma: 15.0, ..base.loss },
            loss_mode: LossMode::Implicit,
            ..base
        };

        let (asym_params, _) = train(&gallery, &bank, params0.clone(), &asym_cfg).unwrap();
        let (implicit_params, _) = train(&gallery, &bank, params0, &implicit_cfg).unwrap();
        asym_total += heldout_recall_at_1(&world, &asym_params);
        implicit_total += heldout_recall_at_1(&world, &implicit_params);
    }
    let asym_mean = asym_total / ABLATION_WORLD_SEEDS.len() as f64;
    let implicit_mean = implicit_total / ABLATION_WORLD_SEEDS.len() as f64;
    let elapsed = start.elapsed();
    let within_budget = elapsed.as_secs_f64() < C10_TIME_BUDGET_S;
    report(
        "c10 ablation",
        implicit_mean >= asym_mean && within_budget,
        &format!(
            "mean held-out R@1 over {} worlds: regularized {implicit_mean:.2} vs plain {asym_mean:.2}, in {elapsed:.2?} (budget {C10_TIME_BUDGET_S}s)",
            ABLATION_WORLD_SEEDS.len()
        ),
    );
}

// -----------------------------------------------------------------------
// c11: building the bank is at least 20x faster than the brute-force
// k-NN precompute at 20k items (d = 128, k = 100), and the advantage
// grows with gallery size. Timing-sensitive, so excluded from default
// runs: `cargo test --test acceptance -- --ignored`.
// -----------------------------------------------------------------------
#[test]
#[ignore = "wall-clock benchmark; run explicitly with -- --ignored"]
fn c11_bank_constructions_outpaces_knn_precompute() {
    let sizes = [2_000usize, 8_000, 20_000];
    let rows = bench_bank_vs_knn(&sizes, 128, 100, SEED_C11).unwrap();
    let increasing = rows.windows(2).all(|w| w[1].ratio > w[0].ratio);
    let final_ratio = rows.last().unwrap().ratio;
    let detail = rows
        .iter()
        .map(|r| format!("N={}: bank {:.4}s, knn {:.2}s, ratio {:.0}", r.n, r.bank_seconds, r.knn_seconds, r.ratio))
        .collect::<Vec<_>>()
        .join("; ");
    report(
        "c11 bench",
        increasing && final_ratio >= C11_MIN_SPEEDUP,
        &format!("{detail} (need increasing ratios and >= {C11_MIN_SPEEDUP}x at the top size)"),
    );
}

// -----------------------------------------------------------------------
// c12: the sampled loss converges to its expectation; mean absolute
// deviation from a large-sample reference estimate decreases
// monotonically through K in {1, 10, 100, 1000} over 50 trials.
// -----------------------------------------------------------------------
#[test]
fn c12_sampled_loss_converges_with_more_samples() {
    let outcome = run_conv_suite(SEED_C12).unwrap();
    report(
        "c12 convergence",
        outcome.pass(),
        &format!(
            "{} adjacent sample-count pairs monotone in {:.2?}{}",
            outcome.total,
            outcome.elapsed,
            outcome.failures.first().map(|f| format!("; first failure: {f}")).unwrap_or_default(),
        ),
    );
}
