//! A gallery set binds manifest records to their embedding store, and
//! optionally to a raw-feature store indexed by the same rows.

use std::collections::{BTreeMap, HashSet};

use thiserror::Error;

use crate::embedding::EmbeddingMatrix;
use crate::manifest::ImageRecord;

#[derive(Debug, Error)]
pub enum GalleryError {
    #[error("record `{id}` row {row} is out of range for a store of {count} embeddings")]
    RowOutOfRange { id: String, row: usize, count: usize },
    #[error("{records} records paired with {embeddings} embeddings")]
    CountMismatch { records: usize, embeddings: usize },
    #[error("duplicate id `{0}`")]
    DuplicateId(String),
}

#[derive(Debug, Clone)]
pub struct GallerySet {
    records: Vec<ImageRecord>,
    embeddings: EmbeddingMatrix,
    raw_features: Option<EmbeddingMatrix>,
}

impl GallerySet {
    /// Record count must equal embedding count; ids must be unique; every
    /// `row` must index into the store.
    pub fn new(records: Vec<ImageRecord>, embeddings: EmbeddingMatrix) -> Result<Self, GalleryError> {
        if records.len() != embeddings.count() {
            return Err(GalleryError::CountMismatch { records: records.len(), embeddings: embeddings.count() });
        }
        let mut seen = HashSet::new();
        for rec in &records {
            if !seen.insert(rec.id.as_str()) {
                return Err(GalleryError::DuplicateId(rec.id.clone()));
            }
            if rec.row >= embeddings.count() {
                return Err(GalleryError::RowOutOfRange { id: rec.id.clone(), row: rec.row, count: embeddings.count() });
            }
        }
        Ok(Self { records, embeddings, raw_features: None })
    }

    /// Attaches a raw-feature store addressed by the same record rows.
    pub fn with_raw_features(mut self, raw: EmbeddingMatrix) -> Result<Self, GalleryError> {
        if raw.count() != self.records.len() {
            return Err(GalleryError::CountMismatch { records: self.records.len(), embeddings: raw.count() });
        }
        self.raw_features = Some(raw);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn raw_features(&self) -> Option<&EmbeddingMatrix> {
        self.raw_features.as_ref()
    }

    pub fn embedding_of(&self, record_index: usize) -> &[f64] {
        self.embeddings.row(self.records[record_index].row)
    }

    pub fn raw_of(&self, record_index: usize) -> Option<&[f64]> {
        self.raw_features.as_ref().map(|m| m.row(self.records[record_index].row))
    }

    /// Record indices grouped by place, in first-appearance order of the place ids.
    pub fn place_groups(&self) -> Vec<(&str, Vec<usize>)> {
        let mut order: Vec<&str> = Vec::new();
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, rec) in self.records.iter().enumerate() {
            let entry = groups.entry(rec.place_id.as_str()).or_insert_with(|| {
                order.push(rec.place_id.as_str());
                Vec::new()
            });
            entry.push(i);
        }
        order.into_iter().map(|p| (p, groups.remove(p).unwrap())).collect()
    }

    /// First recorded coordinates per place, for geographic negative exclusion.
    pub fn place_coords(&self) -> BTreeMap<String, (f64, f64)> {
        let mut coords = BTreeMap::new();
        for rec in &self.records {
            if let Some(c) = rec.geotag.coords() {
                coords.entry(rec.place_id.clone()).or_insert(c);
            }
        }
        coords
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::GeoTag;

    fn rec(id: &str, place: &str, row: usize) -> ImageRecord {
        ImageRecord { id: id.into(), place_id: place.into(), row, geotag: GeoTag::from_frame(row as u64) }
    }

    fn embs(n: usize, d: usize) -> EmbeddingMatrix {
        EmbeddingMatrix::new(d, false, (0..n * d).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn row_out_of_range_is_rejected() {
        let records = vec![rec("a", "p", 0), rec("b", "p", 2)];
        match GallerySet::new(records, embs(2, 3)) {
            Err(GalleryError::RowOutOfRange { row: 2, count: 2, .. }) => {}
            other => panic!("expected RowOutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let records = vec![rec("a", "p", 0)];
        assert!(matches!(
            GallerySet::new(records, embs(2, 3)),
            Err(GalleryError::CountMismatch { records: 1, embeddings: 2 })
        ));
    }

    #[test]
    fn duplicate_id_is_rejected() {
        let records = vec![rec("a", "p", 0), rec("a", "p", 1)];
        assert!(matches!(GallerySet::new(records, embs(2, 3)), Err(GalleryError::DuplicateId(_))));
    }

    #[test]
    fn rows_indirect_into_the_store() {
        // Records listed in reverse row order still resolve to their own rows.
        let records = vec![rec("a", "p", 1), rec("b", "p", 0)];
        let set = GallerySet::new(records, embs(2, 2)).unwrap();
        assert_eq!(set.embedding_of(0), &[2.0, 3.0]);
        assert_eq!(set.embedding_of(1), &[0.0, 1.0]);
    }

    #[test]
    fn raw_features_require_matching_count() {
        let set = GallerySet::new(vec![rec("a", "p", 0)], embs(1, 2)).unwrap();
        assert!(set.raw_of(0).is_none());
        let set = set.with_raw_features(embs(1, 5)).unwrap();
        assert_eq!(set.raw_of(0).unwrap().len(), 5);
        let set2 = GallerySet::new(vec![rec("a", "p", 0)], embs(1, 2)).unwrap();
        assert!(set2.with_raw_features(embs(2, 5)).is_err());
    }

    #[test]
    fn place_groups_keep_first_appearance_order() {
        let records = vec![rec("a", "z", 0), rec("b", "m", 1), rec("c", "z", 2)];
        let set = GallerySet::new(records, embs(3, 1)).unwrap();
        let groups = set.place_groups();
        assert_eq!(groups[0], ("z", vec![0, 2]));
        assert_eq!(groups[1], ("m", vec![1]));
    }
}
