//! Retrieval evaluation: ground-truth construction, exact dot-product
//! ranking, Recall@k, and similarity-margin statistics.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{dot, EmbeddingMatrix};
use crate::manifest::ImageRecord;

/// Mean Earth radius in meters for great-circle distances.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("record `{id}` has no coordinates")]
    MissingCoordinates { id: String },
    #[error("record `{id}` has no frame index")]
    MissingFrame { id: String },
    #[error("line {line}: unknown id `{id}`")]
    UnknownId { line: usize, id: String },
    #[error("dimension mismatch: queries are {query_dim}-d, gallery is {gallery_dim}-d")]
    DimMismatch { query_dim: usize, gallery_dim: usize },
    #[error("{rankings} rankings paired with {queries} ground-truth rows")]
    QueryCountMismatch { rankings: usize, queries: usize },
    #[error("embeddings contain a non-finite value")]
    NonFiniteInput,
    #[error("no query has a non-empty ground-truth set")]
    NoEvaluableQueries,
    #[error("bad ks: {0}")]
    BadKs(String),
}

/// Great-circle distance in meters between two WGS84 points given in degrees.
pub fn haversine(lat1: f64, lon1: f64, lat2: f64, lon2: f64) -> f64 {
    let phi1 = lat1.to_radians();
    let phi2 = lat2.to_radians();
    let dphi = (lat2 - lat1).to_radians();
    let dlambda = (lon2 - lon1).to_radians();
    let a = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * a.sqrt().min(1.0).asin()
}

/// Per-query sets of relevant gallery indices, sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    relevant: Vec<Vec<usize>>,
}

impl GroundTruth {
    pub fn new(mut relevant: Vec<Vec<usize>>) -> Self {
        for set in &mut relevant {
            set.sort_unstable();
            set.dedup();
        }
        Self { relevant }
    }

    pub fn num_queries(&self) -> usize {
        self.relevant.len()
    }

    pub fn relevant(&self, query: usize) -> &[usize] {
        &self.relevant[query]
    }

    pub fn is_relevant(&self, query: usize, gallery: usize) -> bool {
        self.relevant[query].binary_search(&gallery).is_ok()
    }
}

/// Relevant = gallery records within `threshold_m` meters of the query.
pub fn build_gt_geo(
    queries: &[ImageRecord],
    gallery: &[ImageRecord],
    threshold_m: f64,
) -> Result<GroundTruth, EvalError> {
    let gallery_coords: Vec<(f64, f64)> = gallery
        .iter()
        .map(|r| r.geotag.coords().ok_or_else(|| EvalError::MissingCoordinates { id: r.id.clone() }))
        .collect::<Result<_, _>>()?;
    let mut relevant = Vec::with_capacity(queries.len());
    for q in queries {
        let (qlat, qlon) = q.geotag.coords().ok_or_else(|| EvalError::MissingCoordinates { id: q.id.clone() })?;
        let set = gallery_coords
            .iter()
            .enumerate()
            .filter(|(_, (glat, glon))| haversine(qlat, qlon, *glat, *glon) <= threshold_m)
            .map(|(i, _)| i)
            .collect();
        relevant.push(set);
    }
    Ok(GroundTruth::new(relevant))
}

/// Relevant = gallery records whose frame index is within `window` of the query's.
pub fn build_gt_frames(
    queries: &[ImageRecord],
    gallery: &[ImageRecord],
    window: u64,
) -> Result<GroundTruth, EvalError> {
    let gallery_frames: Vec<u64> = gallery
        .iter()
        .map(|r| r.geotag.frame().ok_or_else(|| EvalError::MissingFrame { id: r.id.clone() }))
        .collect::<Result<_, _>>()?;
    let mut relevant = Vec::with_capacity(queries.len());
    for q in queries {
        let qframe = q.geotag.frame().ok_or_else(|| EvalError::MissingFrame { id: q.id.clone() })?;
        let set = gallery_frames
            .iter()
            .enumerate()
            .filter(|(_, &gframe)| qframe.abs_diff(gframe) <= window)
            .map(|(i, _)| i)
            .collect();
        relevant.push(set);
    }
    Ok(GroundTruth::new(relevant))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PairRecord {
    query_id: String,
    gallery_id: String,
}

/// Relevant sets from explicit JSON Lines pairs `{query_id, gallery_id}`.
/// Queries never mentioned in the file get empty sets.
pub fn parse_gt_pairs(
    text: &str,
    queries: &[ImageRecord],
    gallery: &[ImageRecord],
) -> Result<GroundTruth, EvalError> {
    let query_index: BTreeMap<&str, usize> = queries.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let gallery_index: BTreeMap<&str, usize> = gallery.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let mut relevant = vec![Vec::new(); queries.len()];
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let pair: PairRecord =
            serde_json::from_str(raw_line).map_err(|e| EvalError::Parse { line, message: e.to_string() })?;
        let qi = *query_index
            .get(pair.query_id.as_str())
            .ok_or(EvalError::UnknownId { line, id: pair.query_id.clone() })?;
        let gi = *gallery_index
            .get(pair.gallery_id.as_str())
            .ok_or(EvalError::UnknownId { line, id: pair.gallery_id.clone() })?;
        relevant[qi].push(gi);
    }
    Ok(GroundTruth::new(relevant))
}

pub fn read_gt_pairs(
    path: &Path,
    queries: &[ImageRecord],
    gallery: &[ImageRecord],
) -> Result<GroundTruth, EvalError> {
    parse_gt_pairs(&fs::read_to_string(path)?, queries, gallery)
}

#[derive(Clone, Copy)]
struct Cand {
    score: f64,
    idx: usize,
}

impl Cand {
    // Total order with "worse" comparing greater: lower score, then higher index.
    fn cmp_worse(&self, other: &Self) -> Ordering {
        if self.score < other.score {
            Ordering::Greater
        } else if self.score > other.score {
            Ordering::Less
        } else {
            self.idx.cmp(&other.idx)
        }
    }
}

impl PartialEq for Cand {
    fn eq(&self, other: &Self) -> bool {
        self.cmp_worse(other) == Ordering::Equal
    }
}
impl Eq for Cand {}
impl PartialOrd for Cand {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp_worse(other))
    }
}
impl Ord for Cand {
    fn cmp(&self, other: &Self) -> Ordering {
        self.cmp_worse(other)
    }
}

fn top_k_for_query(q: &[f64], gallery: &EmbeddingMatrix, k: usize) -> Vec<usize> {
    let mut heap = std::collections::BinaryHeap::with_capacity(k + 1);
    for (idx, row) in gallery.rows().enumerate() {
        let cand = Cand { score: dot(q, row), idx };
        if heap.len() < k {
            heap.push(cand);
        } else if let Some(worst) = heap.peek() {
            if cand.cmp_worse(worst) == Ordering::Less {
                heap.pop();
                heap.push(cand);
            }
        }
    }
    let mut kept = heap.into_vec();
    kept.sort_unstable();
    kept.into_iter().map(|c| c.idx).collect()
}

/// Exhaustive exact dot-product retrieval. Returns, per query, the indices
/// of the `min(k, N)` highest-scoring gallery rows in descending score
/// order, ties broken by lower gallery index.
pub fn retrieve(
    query_embs: &EmbeddingMatrix,
    gallery_embs: &EmbeddingMatrix,
    k: usize,
) -> Result<Vec<Vec<usize>>, EvalError> {
    if query_embs.dim() != gallery_embs.dim() {
        return Err(EvalError::DimMismatch { query_dim: query_embs.dim(), gallery_dim: gallery_embs.dim() });
    }
    if !query_embs.data().iter().all(|x| x.is_finite()) || !gallery_embs.data().iter().all(|x| x.is_finite()) {
        return Err(EvalError::NonFiniteInput);
    }
    let k = k.min(gallery_embs.count());
    let rankings = query_embs
        .data()
        .par_chunks_exact(query_embs.dim())
        .map(|q| top_k_for_query(q, gallery_embs, k))
        .collect();
    Ok(rankings)
}

/// Recall percentages plus evaluation bookkeeping; `margin` is filled by
/// callers that also run [`margin_report`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RetrievalReport {
    pub recall_at: BTreeMap<usize, f64>,
    pub num_queries_evaluated: usize,
    pub num_queries_skipped: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub margin: Option<MarginStats>,
}

/// Recall@k = 100 * (queries with a relevant hit in the top k) / (queries
/// with non-empty ground truth). Queries with empty ground truth are
/// skipped and reported separately.
pub fn recall_at_k(rankings: &[Vec<usize>], gt: &GroundTruth, ks: &[usize]) -> Result<RetrievalReport, EvalError> {
    if rankings.len() != gt.num_queries() {
        return Err(EvalError::QueryCountMismatch { rankings: rankings.len(), queries: gt.num_queries() });
    }
    if ks.is_empty() {
        return Err(EvalError::BadKs("empty".to_string()));
    }
    if ks[0] == 0 {
        return Err(EvalError::BadKs("k must be at least 1".to_string()));
    }
    if ks.windows(2).any(|w| w[0] >= w[1]) {
        return Err(EvalError::BadKs(format!("ks must be strictly ascending, got {ks:?}")));
    }
    let evaluable: Vec<usize> = (0..rankings.len()).filter(|&q| !gt.relevant(q).is_empty()).collect();
    if evaluable.is_empty() {
        return Err(EvalError::NoEvaluableQueries);
    }
    let mut recall_at = BTreeMap::new();
    for &k in ks {
        let hits = evaluable
            .iter()
            .filter(|&&q| rankings[q].iter().take(k).any(|&g| gt.is_relevant(q, g)))
            .count();
        recall_at.insert(k, 100.0 * hits as f64 / evaluable.len() as f64);
    }
    Ok(RetrievalReport {
        recall_at,
        num_queries_evaluated: evaluable.len(),
        num_queries_skipped: rankings.len() - evaluable.len(),
        margin: None,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MarginStats {
    pub mean: f64,
    pub min: f64,
    pub fraction_positive: f64,
    pub num_queries: usize,
}

/// Per query: (best relevant similarity) - (best non-relevant similarity).
/// Queries with empty ground truth, or whose ground truth covers the whole
/// gallery, are skipped.
pub fn margin_report(
    query_embs: &EmbeddingMatrix,
    gallery_embs: &EmbeddingMatrix,
    gt: &GroundTruth,
) -> Result<MarginStats, EvalError> {
    if query_embs.dim() != gallery_embs.dim() {
        return Err(EvalError::DimMismatch { query_dim: query_embs.dim(), gallery_dim: gallery_embs.dim() });
    }
    if query_embs.count() != gt.num_queries() {
        return Err(EvalError::QueryCountMismatch { rankings: query_embs.count(), queries: gt.num_queries() });
    }
    let mut margins = Vec::new();
    for (qi, q) in query_embs.rows().enumerate() {
        let rel = gt.relevant(qi);
        if rel.is_empty() || rel.len() == gallery_embs.count() {
            continue;
        }
        let mut best_pos = f64::NEG_INFINITY;
        let mut best_neg = f64::NEG_INFINITY;
        for (gi, row) in gallery_embs.rows().enumerate() {
            let sim = dot(q, row);
            if gt.is_relevant(qi, gi) {
                best_pos = best_pos.max(sim);
            } else {
                best_neg = best_neg.max(sim);
            }
        }
        margins.push(best_pos - best_neg);
    }
    if margins.is_empty() {
        return Err(EvalError::NoEvaluableQueries);
    }
    let n = margins.len() as f64;
    Ok(MarginStats {
        mean: margins.iter().sum::<f64>() / n,
        min: margins.iter().copied().fold(f64::INFINITY, f64::min),
        fraction_positive: margins.iter().filter(|&&m| m > 0.0).count() as f64 / n,
        num_queries: margins.len(),
    })
}
