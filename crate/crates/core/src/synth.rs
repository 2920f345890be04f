//! Synthetic world generation for end-to-end experiments.
//!
//! A world is a set of places scattered over a geographic box, each with a
//! latent feature vector and per-dimension view-noise scales. Gallery and
//! query images of a place are noisy views of its latent:
//!
//! ```text
//! raw = latent + view_noise_scale * (noise_scales ⊙ z),  z ~ N(0, I)
//! ```
//!
//! The per-place, per-dimension `noise_scales` are drawn from
//! `anisotropy_range`, so some feature directions wobble far more between
//! views than others. A frozen two-layer tanh network maps raw features to
//! unit-norm gallery embeddings; its output rows carry log-uniform gains so
//! that the anisotropy survives into embedding space instead of being
//! averaged away by the dense hidden layer. Everything derives from one
//! seed and regenerating a world reproduces it exactly.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbeddingError, EmbeddingMatrix};
use crate::eval::haversine;
use crate::gallery::{GalleryError, GallerySet};
use crate::manifest::{GeoTagError, ImageRecord};
use crate::model::{ModelError, QueryModelParams};

/// Attempts per place before giving up on the separation constraint.
const PLACEMENT_ATTEMPTS: usize = 1000;

/// Half-width of the log-uniform gain range applied to the frozen
/// network's output rows: gains span `[1/GAIN_SPAN, GAIN_SPAN]`.
const GAIN_SPAN: f64 = 4.0;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("could not place {failed_at} of {requested} places at {min_separation_m} m separation after {attempts} attempts")]
    SeparationInfeasible {
        failed_at: usize,
        requested: usize,
        min_separation_m: f64,
        attempts: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Gallery(#[from] GalleryError),
    #[error(transparent)]
    GeoTag(#[from] GeoTagError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorldConfig {
    pub num_places: usize,
    pub images_per_place: usize,
    pub held_out_queries_per_place: usize,
    pub raw_dim: usize,
    pub gallery_dim: usize,
    pub lat_range: (f64, f64),
    pub lon_range: (f64, f64),
    pub place_min_separation_m: f64,
    pub view_noise_scale: f64,
    /// Bounds for the per-place, per-dimension noise scales.
    pub anisotropy_range: (f64, f64),
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            num_places: 200,
            images_per_place: 10,
            held_out_queries_per_place: 3,
            raw_dim: 64,
            gallery_dim: 128,
            lat_range: (37.0, 37.1),
            lon_range: (-122.1, -122.0),
            place_min_separation_m: 100.0,
            view_noise_scale: 0.8,
            anisotropy_range: (0.2, 2.0),
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.num_places == 0 {
            return Err(SynthError::BadConfig("num_places must be at least 1".to_string()));
        }
        if self.images_per_place == 0 {
            return Err(SynthError::BadConfig("images_per_place must be at least 1".to_string()));
        }
        if self.raw_dim == 0 || self.gallery_dim == 0 {
            return Err(SynthError::BadConfig("raw_dim and gallery_dim must be positive".to_string()));
        }
        for (name, (lo, hi), bound) in
            [("lat_range", self.lat_range, 90.0), ("lon_range", self.lon_range, 180.0)]
        {
            if !lo.is_finite() || !hi.is_finite() || lo >= hi || lo < -bound || hi > bound {
                return Err(SynthError::BadConfig(format!("{name} ({lo}, {hi}) is not an ordered range within +-{bound}")));
            }
        }
        if !self.place_min_separation_m.is_finite() || self.place_min_separation_m < 0.0 {
            return Err(SynthError::BadConfig(format!(
                "place_min_separation_m must be non-negative, got {}",
                self.place_min_separation_m
            )));
        }
        if !self.view_noise_scale.is_finite() || self.view_noise_scale < 0.0 {
            return Err(SynthError::BadConfig(format!(
                "view_noise_scale must be non-negative, got {}",
                self.view_noise_scale
            )));
        }
        let (lo, hi) = self.anisotropy_range;
        if !lo.is_finite() || !hi.is_finite() || lo <= 0.0 || lo > hi {
            return Err(SynthError::BadConfig(format!(
                "anisotropy_range ({lo}, {hi}) must satisfy 0 < lo <= hi"
            )));
        }
        Ok(())
    }
}

/// One generated place: its coordinates, latent feature vector, and
/// per-dimension view-noise scales.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaceSpec {
    pub place_id: String,
    pub lat: f64,
    pub lon: f64,
    pub latent: Vec<f64>,
    pub noise_scales: Vec<f64>,
}

/// The fixed, high-capacity mapping from raw features to gallery
/// embeddings. It is generated once per world and never trained.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenGalleryNetwork {
    params: QueryModelParams,
}

impl FrozenGalleryNetwork {
    /// Two-layer tanh network with a hidden width of twice the output
    /// dimension and log-uniform per-row output gains.
    pub fn generate(raw_dim: usize, gallery_dim: usize, seed: u64) -> Result<Self, ModelError> {
        let hidden = 2 * gallery_dim;
        let mut params = QueryModelParams::init(&[raw_dim, hidden, gallery_dim], seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5_5A5A_C3C3_3C3C);
        let log_span = GAIN_SPAN.ln();
        let out_w = &mut params.weights_mut()[1];
        for j in 0..gallery_dim {
            let gain = rng.random_range(-log_span..=log_span).exp();
            for x in &mut out_w[j * hidden..(j + 1) * hidden] {
                *x *= gain;
            }
        }
        Ok(Self { params })
    }

    pub fn from_params(params: QueryModelParams) -> Self {
        Self { params }
    }

    pub fn params(&self) -> &QueryModelParams {
        &self.params
    }

    pub fn input_dim(&self) -> usize {
        self.params.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.params.output_dim()
    }

    /// Unit-norm embedding of one raw feature vector.
    pub fn embed(&self, raw: &[f64]) -> Result<Vec<f64>, ModelError> {
        self.params.forward(raw)
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        self.params.save(path)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        Ok(Self { params: QueryModelParams::load(path)? })
    }
}

/// A fully generated world: gallery records with raw features and frozen
/// embeddings, held-out query records with raw features only, and the
/// network that produced the embeddings.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub config: WorldConfig,
    pub places: Vec<PlaceSpec>,
    pub gallery_records: Vec<ImageRecord>,
    pub gallery_raw: EmbeddingMatrix,
    pub gallery_embeddings: EmbeddingMatrix,
    pub query_records: Vec<ImageRecord>,
    pub query_raw: EmbeddingMatrix,
    pub network: FrozenGalleryNetwork,
}

impl SynthWorld {
    /// Gallery records, frozen embeddings, and raw features as one set.
    pub fn gallery_set(&self) -> Result<GallerySet, GalleryError> {
        GallerySet::new(self.gallery_records.clone(), self.gallery_embeddings.clone())?
            .with_raw_features(self.gallery_raw.clone())
    }
}

fn place_coordinates(cfg: &WorldConfig, rng: &mut ChaCha8Rng) -> Result<Vec<(f64, f64)>, SynthError> {
    let mut coords: Vec<(f64, f64)> = Vec::with_capacity(cfg.num_places);
    for p in 0..cfg.num_places {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let lat = rng.random_range(cfg.lat_range.0..=cfg.lat_range.1);
            let lon = rng.random_range(cfg.lon_range.0..=cfg.lon_range.1);
            let ok = coords
                .iter()
                .all(|&(plat, plon)| haversine(lat, lon, plat, plon) >= cfg.place_min_separation_m);
            if ok {
                coords.push((lat, lon));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(SynthError::SeparationInfeasible {
                failed_at: p,
                requested: cfg.num_places,
                min_separation_m: cfg.place_min_separation_m,
                attempts: PLACEMENT_ATTEMPTS,
            });
        }
    }
    Ok(coords)
}

fn noisy_view(place: &PlaceSpec, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    place
        .latent
        .iter()
        .zip(&place.noise_scales)
        .map(|(&mu, &s)| {
            let z: f64 = rng.sample(StandardNormal);
            mu + scale * s * z
        })
        .collect()
}

/// Generates the full world from the config seed. Sub-generators are
/// seeded in a fixed order, so outputs are reproducible bit for bit.
pub fn gen_world(cfg: &WorldConfig) -> Result<SynthWorld, SynthError> {
    cfg.validate()?;
    let mut root = ChaCha8Rng::seed_from_u64(cfg.seed);
    // One draw per concern, in a frozen order.
    let coords_seed: u64 = root.random();
    let latent_seed: u64 = root.random();
    let scales_seed: u64 = root.random();
    let gallery_view_seed: u64 = root.random();
    let query_view_seed: u64 = root.random();
    let network_seed: u64 = root.random();

    let coords = place_coordinates(cfg, &mut ChaCha8Rng::seed_from_u64(coords_seed))?;

    let mut latent_rng = ChaCha8Rng::seed_from_u64(latent_seed);
    let mut scales_rng = ChaCha8Rng::seed_from_u64(scales_seed);
    let id_width = cfg.num_places.max(1).to_string().len();
    let places: Vec<PlaceSpec> = coords
        .into_iter()
        .enumerate()
        .map(|(p, (lat, lon))| PlaceSpec {
            place_id: format!("p-{p:0id_width$}"),
            lat,
            lon,
            latent: (0..cfg.raw_dim).map(|_| latent_rng.sample(StandardNormal)).collect(),
            noise_scales: (0..cfg.raw_dim)
                .map(|_| scales_rng.random_range(cfg.anisotropy_range.0..=cfg.anisotropy_range.1))
                .collect(),
        })
        .collect();

    let network = FrozenGalleryNetwork::generate(cfg.raw_dim, cfg.gallery_dim, network_seed)?;

    let mut gallery_records = Vec::with_capacity(cfg.num_places * cfg.images_per_place);
    let mut gallery_raw_rows = Vec::with_capacity(gallery_records.capacity());
    let mut gallery_emb_rows = Vec::with_capacity(gallery_records.capacity());
    let mut view_rng = ChaCha8Rng::seed_from_u64(gallery_view_seed);
    for (p, place) in places.iter().enumerate() {
        for i in 0..cfg.images_per_place {
            let raw = noisy_view(place, cfg.view_noise_scale, &mut view_rng);
            let emb = network.embed(&raw)?;
            let row = gallery_records.len();
            gallery_records.push(ImageRecord {
                id: format!("g-{p:0id_width$}-{i:03}"),
                place_id: place.place_id.clone(),
                row,
                geotag: crate::manifest::GeoTag::new(Some((place.lat, place.lon)), Some(row as u64))?,
            });
            gallery_raw_rows.push(raw);
            gallery_emb_rows.push(emb);
        }
    }

    let mut query_records = Vec::with_capacity(cfg.num_places * cfg.held_out_queries_per_place);
    let mut query_raw_rows = Vec::with_capacity(query_records.capacity());
    let mut query_rng = ChaCha8Rng::seed_from_u64(query_view_seed);
    for (p, place) in places.iter().enumerate() {
        // Frame index at the middle of this place's gallery block, so
        // frame-window ground truth stays within the same place.
        let mid_frame = (p * cfg.images_per_place + cfg.images_per_place / 2) as u64;
        for i in 0..cfg.held_out_queries_per_place {
            let raw = noisy_view(place, cfg.view_noise_scale, &mut query_rng);
            let row = query_records.len();
            query_records.push(ImageRecord {
                id: format!("q-{p:0id_width$}-{i:03}"),
                place_id: place.place_id.clone(),
                row,
                geotag: crate::manifest::GeoTag::new(Some((place.lat, place.lon)), Some(mid_frame))?,
            });
            query_raw_rows.push(raw);
        }
    }

    let gallery_raw = EmbeddingMatrix::from_rows(&gallery_raw_rows, false)?;
    let gallery_embeddings = EmbeddingMatrix::from_rows(&gallery_emb_rows, true)?;
    let query_raw = if query_raw_rows.is_empty() {
        EmbeddingMatrix::empty(cfg.raw_dim, false)?
    } else {
        EmbeddingMatrix::from_rows(&query_raw_rows, false)?
    };

    Ok(SynthWorld {
        config: cfg.clone(),
        places,
        gallery_records,
        gallery_raw,
        gallery_embeddings,
        query_records,
        query_raw,
        network,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::l2_norm;
    use crate::membank::build_bank;

    fn small_config() -> WorldConfig {
        WorldConfig {
            num_places: 20,
            images_per_place: 10,
            held_out_queries_per_place: 2,
            raw_dim: 16,
            gallery_dim: 24,
            seed: 5,
            ..WorldConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let cfg = small_config();
        let a = gen_world(&cfg).unwrap();
        let b = gen_world(&cfg).unwrap();
        assert_eq!(a.gallery_embeddings.data(), b.gallery_embeddings.data());
        assert_eq!(a.query_raw.data(), b.query_raw.data());
        assert_eq!(a.gallery_records, b.gallery_records);
        assert_eq!(a.places, b.places);

        let c = gen_world(&WorldConfig { seed: 6, ..cfg }).unwrap();
        assert_ne!(a.gallery_embeddings.data(), c.gallery_embeddings.data());
    }

    #[test]
    fn places_respect_minimum_separation() {
        let world = gen_world(&small_config()).unwrap();
        for i in 0..world.places.len() {
            for j in 0..i {
                let a = &world.places[i];
                let b = &world.places[j];
                let d = haversine(a.lat, a.lon, b.lat, b.lon);
                assert!(
                    d >= world.config.place_min_separation_m,
                    "places {i} and {j} are {d} m apart"
                );
            }
        }
    }

    #[test]
    fn infeasible_separation_is_reported() {
        let cfg = WorldConfig {
            num_places: 50,
            lat_range: (37.0, 37.0001),
            lon_range: (-122.0001, -122.0),
            place_min_separation_m: 500.0,
            ..small_config()
        };
        assert!(matches!(gen_world(&cfg), Err(SynthError::SeparationInfeasible { .. })));
    }

    #[test]
    fn gallery_embeddings_are_unit_norm() {
        let world = gen_world(&small_config()).unwrap();
        for r in 0..world.gallery_embeddings.count() {
            let norm = l2_norm(world.gallery_embeddings.row(r));
            assert!((norm - 1.0).abs() < 1e-12, "row {r} has norm {norm}");
        }
    }

    #[test]
    fn embeddings_match_straight_line_network_evaluation() {
        let world = gen_world(&small_config()).unwrap();
        let params = world.network.params();
        let raw = world.gallery_raw.row(3);

        // Recompute by hand: tanh(W1 x + b1), then W2 h + b2, then normalize.
        let dims = params.dims();
        let (w1, w2) = (&params.weights()[0], &params.weights()[1]);
        let (b1, b2) = (&params.biases()[0], &params.biases()[1]);
        let hidden: Vec<f64> = (0..dims[1])
            .map(|j| {
                let row = &w1[j * dims[0]..(j + 1) * dims[0]];
                (row.iter().zip(raw).map(|(w, x)| w * x).sum::<f64>() + b1[j]).tanh()
            })
            .collect();
        let pre: Vec<f64> = (0..dims[2])
            .map(|j| {
                let row = &w2[j * dims[1]..(j + 1) * dims[1]];
                row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>() + b2[j]
            })
            .collect();
        let norm = l2_norm(&pre);
        let stored = world.gallery_embeddings.row(3);
        for (i, (&s, p)) in stored.iter().zip(&pre).enumerate() {
            assert!((s - p / norm).abs() < 1e-12, "component {i}: stored {s}, recomputed {}", p / norm);
        }
    }

    #[test]
    fn per_place_variance_stays_anisotropic_in_embedding_space() {
        let world = gen_world(&small_config()).unwrap();
        let gallery = world.gallery_set().unwrap();
        let bank = build_bank(&gallery, false).unwrap();
        let mut spread_count = 0;
        for entry in bank.entries() {
            let max = entry.diag_cov.iter().cloned().fold(f64::MIN, f64::max);
            let min = entry.diag_cov.iter().cloned().fold(f64::MAX, f64::min);
            if max / min > 5.0 {
                spread_count += 1;
            }
        }
        let fraction = spread_count as f64 / bank.len() as f64;
        assert!(
            fraction >= 0.9,
            "only {fraction:.0?} of places kept a >5x variance spread across embedding dimensions"
        );
    }

    #[test]
    fn world_shapes_and_ids_are_consistent() {
        let cfg = small_config();
        let world = gen_world(&cfg).unwrap();
        assert_eq!(world.gallery_records.len(), cfg.num_places * cfg.images_per_place);
        assert_eq!(world.query_records.len(), cfg.num_places * cfg.held_out_queries_per_place);
        assert_eq!(world.gallery_raw.count(), world.gallery_records.len());
        assert_eq!(world.gallery_embeddings.count(), world.gallery_records.len());
        assert_eq!(world.query_raw.count(), world.query_records.len());
        assert_eq!(world.gallery_raw.dim(), cfg.raw_dim);
        assert_eq!(world.gallery_embeddings.dim(), cfg.gallery_dim);

        let gallery = world.gallery_set().unwrap();
        let groups = gallery.place_groups();
        assert_eq!(groups.len(), cfg.num_places);
        assert!(groups.iter().all(|(_, members)| members.len() == cfg.images_per_place));

        // Queries carry their place's coordinates and a frame in the middle
        // of the place's gallery block.
        let q = &world.query_records[0];
        let place = &world.places[0];
        assert_eq!(q.geotag.coords(), Some((place.lat, place.lon)));
        assert_eq!(q.geotag.frame(), Some((cfg.images_per_place / 2) as u64));
    }

    #[test]
    fn config_validation_rejects_nonsense() {
        let good = small_config();
        assert!(good.validate().is_ok());
        assert!(WorldConfig { num_places: 0, ..good.clone() }.validate().is_err());
        assert!(WorldConfig { raw_dim: 0, ..good.clone() }.validate().is_err());
        assert!(WorldConfig { lat_range: (37.1, 37.0), ..good.clone() }.validate().is_err());
        assert!(WorldConfig { lat_range: (-91.0, 37.0), ..good.clone() }.validate().is_err());
        assert!(WorldConfig { anisotropy_range: (0.0, 1.0), ..good.clone() }.validate().is_err());
        assert!(WorldConfig { anisotropy_range: (2.0, 1.0), ..good.clone() }.validate().is_err());
        assert!(WorldConfig { view_noise_scale: -0.1, ..good }.validate().is_err());
    }

    #[test]
    fn network_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("network.bin");
        let net = FrozenGalleryNetwork::generate(16, 24, 3).unwrap();
        net.save(&path).unwrap();
        let loaded = FrozenGalleryNetwork::load(&path).unwrap();
        assert_eq!(loaded.params(), net.params());
        let raw: Vec<f64> = (0..16).map(|i| (i as f64) * 0.1 - 0.8).collect();
        assert_eq!(net.embed(&raw).unwrap(), loaded.embed(&raw).unwrap());
    }
}
