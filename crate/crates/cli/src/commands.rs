//! Implementations of the pipeline subcommands. Each function returns
//! `Ok(())` on success; the caller maps [`CliError`] variants to exit
//! codes. Commands read their inputs, do the work, write their outputs,
//! and print a one-line summary. No command modifies its input files.

use std::fs;
use std::path::Path;
use std::time::Instant;

use vpr_core::eval::{build_gt_frames, build_gt_geo, read_gt_pairs, GroundTruth, RetrievalReport};
use vpr_core::manifest::{read_manifest, write_manifest, ImageRecord};
use vpr_core::membank::MemoryBank;
use vpr_core::model::QueryModelParams;
use vpr_core::oracle::{
    bench_bank_vs_knn, run_bound_suite, run_conv_suite, run_eig_suite, run_equality_suite,
    run_gap_suite, run_grad_suite, SuiteOutcome,
};
use vpr_core::store::{read_store, write_store};
use vpr_core::synth::gen_world;
use vpr_core::{build_bank, recall_at_k, retrieve, train, EmbeddingMatrix, GallerySet};

use crate::config::load_run_config;
use crate::{input, CliError, GtMode, Suite};

/// Fixed file names written by `synth` and consumed by the other commands.
pub const GALLERY_EMBEDDINGS_FILE: &str = "gallery_embeddings.aeb";
pub const GALLERY_RAW_FILE: &str = "gallery_raw.aeb";
pub const GALLERY_MANIFEST_FILE: &str = "gallery_manifest.jsonl";
pub const QUERY_RAW_FILE: &str = "query_raw.aeb";
pub const QUERY_MANIFEST_FILE: &str = "query_manifest.jsonl";
pub const GALLERY_NETWORK_FILE: &str = "gallery_network.bin";

/// Generates a synthetic world and writes its six artifact files.
pub fn cmd_synth(config_path: &Path, out_dir: &Path) -> Result<(), CliError> {
    let cfg = load_run_config(config_path)?;
    let start = Instant::now();
    let world = gen_world(&cfg.world).map_err(input)?;
    fs::create_dir_all(out_dir).map_err(|e| input(format!("create {}: {e}", out_dir.display())))?;
    write_store(&out_dir.join(GALLERY_EMBEDDINGS_FILE), &world.gallery_embeddings).map_err(input)?;
    write_store(&out_dir.join(GALLERY_RAW_FILE), &world.gallery_raw).map_err(input)?;
    write_manifest(&out_dir.join(GALLERY_MANIFEST_FILE), &world.gallery_records).map_err(input)?;
    write_store(&out_dir.join(QUERY_RAW_FILE), &world.query_raw).map_err(input)?;
    write_manifest(&out_dir.join(QUERY_MANIFEST_FILE), &world.query_records).map_err(input)?;
    world.network.save(&out_dir.join(GALLERY_NETWORK_FILE)).map_err(input)?;
    println!(
        "synth: {} places, {} gallery images, {} queries, raw dim {} -> gallery dim {}, {:.3} s",
        cfg.world.num_places,
        world.gallery_records.len(),
        world.query_records.len(),
        cfg.world.raw_dim,
        cfg.world.gallery_dim,
        start.elapsed().as_secs_f64(),
    );
    Ok(())
}

/// Builds the per-place memory bank from a gallery store and manifest.
pub fn cmd_build_bank(
    embeddings: &Path,
    manifest: &Path,
    out: &Path,
    normalize: bool,
) -> Result<(), CliError> {
    let embs = read_store(embeddings).map_err(input)?;
    let records = read_manifest(manifest).map_err(input)?;
    let gallery = GallerySet::new(records, embs).map_err(input)?;
    let start = Instant::now();
    let bank = build_bank(&gallery, normalize).map_err(input)?;
    let elapsed = start.elapsed().as_secs_f64();
    bank.save(out).map_err(input)?;
    println!("bank: {} places, dim {}, built in {:.6} s", bank.len(), bank.dim(), elapsed);
    Ok(())
}

/// Trains the query model against a frozen gallery and its memory bank,
/// writing the model file and a per-batch CSV log.
#[allow(clippy::too_many_arguments)]
pub fn cmd_train(
    config_path: &Path,
    embeddings: &Path,
    raw: &Path,
    manifest: &Path,
    bank_path: &Path,
    out: &Path,
    log_path: &Path,
) -> Result<(), CliError> {
    let cfg = load_run_config(config_path)?;
    let embs = read_store(embeddings).map_err(input)?;
    let raw_feats = read_store(raw).map_err(input)?;
    let records = read_manifest(manifest).map_err(input)?;
    let raw_dim = raw_feats.dim();
    let gallery = GallerySet::new(records, embs)
        .map_err(input)?
        .with_raw_features(raw_feats)
        .map_err(input)?;
    let bank = MemoryBank::load(bank_path).map_err(input)?;
    let mut dims = Vec::with_capacity(cfg.model.hidden_dims.len() + 2);
    dims.push(raw_dim);
    dims.extend_from_slice(&cfg.model.hidden_dims);
    dims.push(bank.dim());
    let params = QueryModelParams::init(&dims, cfg.model.init_seed).map_err(input)?;
    let start = Instant::now();
    let (trained, log) = train(&gallery, &bank, params, &cfg.optim).map_err(input)?;
    let elapsed = start.elapsed().as_secs_f64();
    trained.save(out).map_err(input)?;
    let mut csv = String::from("epoch,step,lr,mean_loss\n");
    for row in &log.rows {
        csv.push_str(&format!("{},{},{},{}\n", row.epoch, row.step, row.lr, row.mean_loss));
    }
    fs::write(log_path, csv).map_err(|e| input(format!("write {}: {e}", log_path.display())))?;
    let last_epoch = cfg.optim.epochs.saturating_sub(1);
    let final_loss = log.epoch_mean_loss(last_epoch).unwrap_or(f64::NAN);
    println!(
        "train: dims {dims:?}, {} steps, final epoch mean loss {final_loss:.6}, {elapsed:.3} s",
        log.rows.len(),
    );
    Ok(())
}

/// Runs the query model over a raw-feature store and writes the resulting
/// unit-norm embeddings.
pub fn cmd_embed(model_path: &Path, raw: &Path, out: &Path) -> Result<(), CliError> {
    let params = QueryModelParams::load(model_path).map_err(input)?;
    let raw_feats = read_store(raw).map_err(input)?;
    let start = Instant::now();
    let mut rows = Vec::with_capacity(raw_feats.count());
    for row in raw_feats.rows() {
        rows.push(params.forward(row).map_err(input)?);
    }
    let embs = EmbeddingMatrix::from_rows(&rows, true).map_err(input)?;
    write_store(out, &embs).map_err(input)?;
    println!(
        "embed: {} vectors, dim {} -> {}, {:.3} s",
        embs.count(),
        raw_feats.dim(),
        embs.dim(),
        start.elapsed().as_secs_f64(),
    );
    Ok(())
}

/// Validates that manifest records cover store rows `0..count` exactly
/// once, and returns them sorted by row so record order matches store
/// order.
fn row_ordered(mut records: Vec<ImageRecord>, count: usize) -> Result<Vec<ImageRecord>, CliError> {
    if records.len() != count {
        return Err(input(format!("{} manifest records paired with {count} store rows", records.len())));
    }
    records.sort_by_key(|r| r.row);
    for (i, rec) in records.iter().enumerate() {
        if rec.row != i {
            return Err(input(format!(
                "manifest rows must cover 0..{count} exactly once; record `{}` has row {}",
                rec.id, rec.row
            )));
        }
    }
    Ok(records)
}

pub struct EvalArgs<'a> {
    pub query_embeddings: &'a Path,
    pub gallery_embeddings: &'a Path,
    pub query_manifest: &'a Path,
    pub gallery_manifest: &'a Path,
    pub gt_mode: GtMode,
    pub threshold: f64,
    pub frame_window: u64,
    pub pairs: Option<&'a Path>,
    pub ks: &'a [usize],
    pub report_json: &'a Path,
    pub report_csv: &'a Path,
}

fn report_csv_text(report: &RetrievalReport) -> String {
    let mut csv = String::from("k,recall\n");
    for (k, recall) in &report.recall_at {
        csv.push_str(&format!("{k},{recall}\n"));
    }
    csv
}

/// Retrieves over the full gallery and reports recall at the requested
/// depths, writing the report as JSON and CSV.
pub fn cmd_eval(args: &EvalArgs<'_>) -> Result<(), CliError> {
    let query_embs = read_store(args.query_embeddings).map_err(input)?;
    let gallery_embs = read_store(args.gallery_embeddings).map_err(input)?;
    let queries = row_ordered(read_manifest(args.query_manifest).map_err(input)?, query_embs.count())?;
    let gallery = row_ordered(read_manifest(args.gallery_manifest).map_err(input)?, gallery_embs.count())?;
    let gt: GroundTruth = match args.gt_mode {
        GtMode::Geo => build_gt_geo(&queries, &gallery, args.threshold).map_err(input)?,
        GtMode::Frames => build_gt_frames(&queries, &gallery, args.frame_window).map_err(input)?,
        GtMode::Pairs => {
            let path = args.pairs.ok_or_else(|| input("--pairs is required with --gt-mode pairs"))?;
            read_gt_pairs(path, &queries, &gallery).map_err(input)?
        }
    };
    let max_k = *args.ks.iter().max().ok_or_else(|| input("--ks must not be empty"))?;
    let start = Instant::now();
    let rankings = retrieve(&query_embs, &gallery_embs, max_k).map_err(input)?;
    let elapsed = start.elapsed().as_secs_f64();
    let report = recall_at_k(&rankings, &gt, args.ks).map_err(input)?;
    let json = serde_json::to_string_pretty(&report).map_err(input)?;
    fs::write(args.report_json, json).map_err(|e| input(format!("write {}: {e}", args.report_json.display())))?;
    fs::write(args.report_csv, report_csv_text(&report))
        .map_err(|e| input(format!("write {}: {e}", args.report_csv.display())))?;
    let recalls: Vec<String> =
        report.recall_at.iter().map(|(k, r)| format!("R@{k} {r:.2}")).collect();
    println!(
        "eval: {} | {} queries evaluated, {} skipped, retrieval {elapsed:.3} s",
        recalls.join(" "),
        report.num_queries_evaluated,
        report.num_queries_skipped,
    );
    Ok(())
}

fn suite_runs(suite: Suite) -> Vec<fn(u64) -> Result<SuiteOutcome, vpr_core::OracleError>> {
    match suite {
        Suite::Bound => vec![run_bound_suite],
        Suite::Grad => vec![run_grad_suite],
        Suite::Eig => vec![run_eig_suite],
        Suite::Conv => vec![run_conv_suite],
        Suite::Equality => vec![run_equality_suite],
        Suite::Gap => vec![run_gap_suite],
        Suite::All => vec![
            run_bound_suite,
            run_grad_suite,
            run_eig_suite,
            run_equality_suite,
            run_gap_suite,
            run_conv_suite,
        ],
    }
}

/// Runs the selected numerical validation suites. Any suite failure is a
/// validation error (exit code 1), distinct from bad input (exit code 2).
pub fn cmd_validate(suite: Suite, seed: u64) -> Result<(), CliError> {
    let mut failed = Vec::new();
    for run in suite_runs(suite) {
        let outcome = run(seed).map_err(input)?;
        println!("{}", outcome.summary());
        if !outcome.pass() {
            failed.push(outcome.name);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Validation(format!("suites failed: {}", failed.join(", "))))
    }
}

/// Times memory-bank construction against a brute-force k-NN precompute
/// and writes one CSV row per gallery size.
pub fn cmd_bench(
    sizes: &[usize],
    dim: usize,
    k: usize,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let rows = bench_bank_vs_knn(sizes, dim, k, seed).map_err(input)?;
    let mut csv = String::from("n,bank_seconds,knn_seconds,ratio\n");
    for row in &rows {
        csv.push_str(&format!("{},{},{},{}\n", row.n, row.bank_seconds, row.knn_seconds, row.ratio));
        println!(
            "bench: N={} bank {:.6} s, knn {:.6} s, ratio {:.1}",
            row.n, row.bank_seconds, row.knn_seconds, row.ratio
        );
    }
    fs::write(out, csv).map_err(|e| input(format!("write {}: {e}", out.display())))?;
    Ok(())
}
