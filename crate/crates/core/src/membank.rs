//! Geographical memory bank: per-place centroid and diagonal variance of
//! the gallery embeddings, built in one pass over the gallery.
//!
//! Centroids are arithmetic means and are not re-normalized; variances are
//! population variances (divide by member count). Statistics are computed
//! over unit-normalized member embeddings when `normalize_inputs` is set,
//! which is the intended default for cosine-style retrieval.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{l2_normalize, EmbeddingError};
use crate::eval::haversine;
use crate::gallery::GallerySet;
use crate::store::{get_f64s, get_u32, put_f64s};

pub const BANK_MAGIC: [u8; 4] = *b"AGB1";
pub const BANK_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("gallery has no records")]
    EmptyGallery,
    #[error("bank file has no entries")]
    EmptyBank,
    #[error("unknown place `{0}`")]
    UnknownPlace(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:02x?}, expected \"AGB1\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported bank version {found}, expected {BANK_VERSION}")]
    VersionUnsupported { found: u32 },
    #[error("bank file truncated: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error("bad bank index: {0}")]
    BadIndex(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

/// Summary statistics of one place's member embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaceStats {
    pub place_id: String,
    pub centroid: Vec<f64>,
    pub diag_cov: Vec<f64>,
    pub count: usize,
}

/// All place summaries for one gallery, in first-appearance order.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    dim: usize,
    entries: Vec<PlaceStats>,
    index: HashMap<String, usize>,
}

impl MemoryBank {
    fn from_entries(dim: usize, entries: Vec<PlaceStats>) -> Result<Self, BankError> {
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.centroid.len() != dim {
                return Err(BankError::DimensionMismatch { expected: dim, got: e.centroid.len() });
            }
            if e.diag_cov.len() != dim {
                return Err(BankError::DimensionMismatch { expected: dim, got: e.diag_cov.len() });
            }
            if index.insert(e.place_id.clone(), i).is_some() {
                return Err(BankError::BadIndex(format!("duplicate place `{}`", e.place_id)));
            }
        }
        Ok(Self { dim, entries, index })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[PlaceStats] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &PlaceStats {
        &self.entries[index]
    }

    pub fn place_index(&self, place_id: &str) -> Option<usize> {
        self.index.get(place_id).copied()
    }

    pub fn stats_of(&self, place_id: &str) -> Result<&PlaceStats, BankError> {
        self.place_index(place_id)
            .map(|i| &self.entries[i])
            .ok_or_else(|| BankError::UnknownPlace(place_id.to_string()))
    }

    /// Indices of every entry except the query's own place.
    pub fn negative_set(&self, place_id: &str) -> Result<Vec<usize>, BankError> {
        let own = self.place_index(place_id).ok_or_else(|| BankError::UnknownPlace(place_id.to_string()))?;
        Ok((0..self.entries.len()).filter(|&i| i != own).collect())
    }

    /// Like [`Self::negative_set`], additionally dropping entries whose
    /// coordinates lie within `exclusion_radius_m` meters of the query
    /// place. Entries without coordinates in `place_coords` are kept.
    pub fn negative_set_within(
        &self,
        place_id: &str,
        exclusion_radius_m: f64,
        place_coords: &BTreeMap<String, (f64, f64)>,
    ) -> Result<Vec<usize>, BankError> {
        let own = self.place_index(place_id).ok_or_else(|| BankError::UnknownPlace(place_id.to_string()))?;
        let own_coords = place_coords.get(place_id).copied();
        Ok((0..self.entries.len())
            .filter(|&i| {
                if i == own {
                    return false;
                }
                match (own_coords, place_coords.get(&self.entries[i].place_id)) {
                    (Some((qlat, qlon)), Some(&(lat, lon))) => {
                        haversine(qlat, qlon, lat, lon) > exclusion_radius_m
                    }
                    _ => true,
                }
            })
            .collect())
    }

    /// Replaces every centroid with its unit-normalized version.
    pub fn renormalize_centroids(&mut self) -> Result<(), BankError> {
        for e in &mut self.entries {
            e.centroid = l2_normalize(&e.centroid)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), BankError> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, BankError> {
        Self::decode(&fs::read(path)?)
    }

    pub fn encode(&self) -> Vec<u8> {
        let index = BankIndex {
            dim: self.dim,
            place_ids: self.entries.iter().map(|e| e.place_id.clone()).collect(),
            counts: self.entries.iter().map(|e| e.count).collect(),
        };
        let index_json = serde_json::to_vec(&index).expect("bank index serializes");
        let mut buf = Vec::new();
        buf.extend_from_slice(&BANK_MAGIC);
        buf.extend_from_slice(&BANK_VERSION.to_le_bytes());
        buf.extend_from_slice(&(index_json.len() as u32).to_le_bytes());
        buf.extend_from_slice(&index_json);
        for e in &self.entries {
            put_f64s(&mut buf, &e.centroid);
        }
        for e in &self.entries {
            put_f64s(&mut buf, &e.diag_cov);
        }
        buf
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, BankError> {
        if bytes.len() < 12 {
            return Err(BankError::TruncatedPayload { expected: 12, found: bytes.len() });
        }
        if bytes[..4] != BANK_MAGIC {
            return Err(BankError::BadMagic { found: bytes[..4].try_into().unwrap() });
        }
        let version = get_u32(bytes, 4);
        if version != BANK_VERSION {
            return Err(BankError::VersionUnsupported { found: version });
        }
        let index_len = get_u32(bytes, 8) as usize;
        if bytes.len() < 12 + index_len {
            return Err(BankError::TruncatedPayload { expected: 12 + index_len, found: bytes.len() });
        }
        let index: BankIndex =
            serde_json::from_slice(&bytes[12..12 + index_len]).map_err(|e| BankError::BadIndex(e.to_string()))?;
        if index.place_ids.len() != index.counts.len() {
            return Err(BankError::BadIndex(format!(
                "{} place_ids but {} counts",
                index.place_ids.len(),
                index.counts.len()
            )));
        }
        let m = index.place_ids.len();
        if m == 0 {
            return Err(BankError::EmptyBank);
        }
        if index.dim == 0 {
            return Err(BankError::BadIndex("dim must be at least 1".to_string()));
        }
        let expected = 12 + index_len + 2 * m * index.dim * 8;
        if bytes.len() < expected {
            return Err(BankError::TruncatedPayload { expected, found: bytes.len() });
        }
        if bytes.len() > expected {
            return Err(BankError::BadIndex(format!("{} trailing bytes", bytes.len() - expected)));
        }
        let values = get_f64s(&bytes[12 + index_len..], 2 * m * index.dim);
        let entries = index
            .place_ids
            .into_iter()
            .zip(index.counts)
            .enumerate()
            .map(|(i, (place_id, count))| PlaceStats {
                place_id,
                centroid: values[i * index.dim..(i + 1) * index.dim].to_vec(),
                diag_cov: values[(m + i) * index.dim..(m + i + 1) * index.dim].to_vec(),
                count,
            })
            .collect();
        Self::from_entries(index.dim, entries)
    }
}

#[derive(Serialize, Deserialize)]
struct BankIndex {
    dim: usize,
    place_ids: Vec<String>,
    counts: Vec<usize>,
}

/// Builds per-place statistics in a single pass: O(N*d) time, O(M*d) memory.
pub fn build_bank(gallery: &GallerySet, normalize_inputs: bool) -> Result<MemoryBank, BankError> {
    if gallery.is_empty() {
        return Err(BankError::EmptyGallery);
    }
    let dim = gallery.embeddings().dim();
    let mut entries = Vec::new();
    for (place_id, members) in gallery.place_groups() {
        let mut mean = vec![0.0; dim];
        let mut m2 = vec![0.0; dim];
        for (k, &record_idx) in members.iter().enumerate() {
            let row = gallery.embedding_of(record_idx);
            let x: Vec<f64>;
            let row = if normalize_inputs {
                x = l2_normalize(row)?;
                &x[..]
            } else {
                row
            };
            let n = (k + 1) as f64;
            for i in 0..dim {
                let delta = row[i] - mean[i];
                mean[i] += delta / n;
                m2[i] += delta * (row[i] - mean[i]);
            }
        }
        let n = members.len() as f64;
        let diag_cov = m2.iter().map(|v| v / n).collect();
        entries.push(PlaceStats { place_id: place_id.to_string(), centroid: mean, diag_cov, count: members.len() });
    }
    MemoryBank::from_entries(dim, entries)
}
