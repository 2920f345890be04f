//! JSON Lines image manifests.
//!
//! One record per line: required `id`, `place_id`, `row` (index into the
//! paired embedding store), plus an optional geotag given as `lat`/`lon`
//! (always together) and/or `frame`. Every record must carry at least one
//! of the two geotag forms.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GeoTagError {
    #[error("latitude {0} outside [-90, 90]")]
    LatOutOfRange(f64),
    #[error("longitude {0} outside [-180, 180]")]
    LonOutOfRange(f64),
    #[error("coordinate is not finite")]
    NonFiniteCoordinate,
    #[error("geotag needs coordinates or a frame index")]
    Empty,
}

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: missing field `{field}`")]
    MissingField { line: usize, field: &'static str },
    #[error("line {line}: duplicate id `{id}`")]
    DuplicateId { line: usize, id: String },
    #[error("line {line}: {source}")]
    BadGeoTag { line: usize, source: GeoTagError },
}

/// Spatial identity of an image: WGS84 degrees and/or a sequence frame index.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoTag {
    coords: Option<(f64, f64)>,
    frame: Option<u64>,
}

impl GeoTag {
    pub fn new(coords: Option<(f64, f64)>, frame: Option<u64>) -> Result<Self, GeoTagError> {
        if coords.is_none() && frame.is_none() {
            return Err(GeoTagError::Empty);
        }
        if let Some((lat, lon)) = coords {
            if !lat.is_finite() || !lon.is_finite() {
                return Err(GeoTagError::NonFiniteCoordinate);
            }
            if !(-90.0..=90.0).contains(&lat) {
                return Err(GeoTagError::LatOutOfRange(lat));
            }
            if !(-180.0..=180.0).contains(&lon) {
                return Err(GeoTagError::LonOutOfRange(lon));
            }
        }
        Ok(Self { coords, frame })
    }

    pub fn from_coords(lat: f64, lon: f64) -> Result<Self, GeoTagError> {
        Self::new(Some((lat, lon)), None)
    }

    pub fn from_frame(frame: u64) -> Self {
        Self { coords: None, frame: Some(frame) }
    }

    pub fn coords(&self) -> Option<(f64, f64)> {
        self.coords
    }

    pub fn frame(&self) -> Option<u64> {
        self.frame
    }
}

/// One gallery or query image: identity, place grouping, store row, geotag.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub place_id: String,
    /// Row index into the paired embedding store (and raw-feature store, when present).
    pub row: usize,
    pub geotag: GeoTag,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: Option<String>,
    place_id: Option<String>,
    row: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lat: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    frame: Option<u64>,
}

fn record_from_raw(raw: RawRecord, line: usize) -> Result<ImageRecord, ManifestError> {
    let id = raw.id.ok_or(ManifestError::MissingField { line, field: "id" })?;
    let place_id = raw.place_id.ok_or(ManifestError::MissingField { line, field: "place_id" })?;
    let row = raw.row.ok_or(ManifestError::MissingField { line, field: "row" })? as usize;
    let coords = match (raw.lat, raw.lon) {
        (Some(lat), Some(lon)) => Some((lat, lon)),
        (Some(_), None) => return Err(ManifestError::MissingField { line, field: "lon" }),
        (None, Some(_)) => return Err(ManifestError::MissingField { line, field: "lat" }),
        (None, None) => None,
    };
    let geotag = GeoTag::new(coords, raw.frame).map_err(|source| ManifestError::BadGeoTag { line, source })?;
    Ok(ImageRecord { id, place_id, row, geotag })
}

/// Reads a manifest, preserving record order. Blank lines are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<ImageRecord>, ManifestError> {
    parse_manifest(&fs::read_to_string(path)?)
}

pub fn parse_manifest(text: &str) -> Result<Vec<ImageRecord>, ManifestError> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(raw_line)
            .map_err(|e| ManifestError::Parse { line, message: e.to_string() })?;
        let record = record_from_raw(raw, line)?;
        if !seen.insert(record.id.clone()) {
            return Err(ManifestError::DuplicateId { line, id: record.id });
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_manifest(path: &Path, records: &[ImageRecord]) -> Result<(), ManifestError> {
    let mut out = Vec::new();
    for rec in records {
        let raw = RawRecord {
            id: Some(rec.id.clone()),
            place_id: Some(rec.place_id.clone()),
            row: Some(rec.row as u64),
            lat: rec.geotag.coords().map(|c| c.0),
            lon: rec.geotag.coords().map(|c| c.1),
            frame: rec.geotag.frame(),
        };
        serde_json::to_writer(&mut out, &raw).expect("manifest record serializes");
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = r#"{"id":"a0","place_id":"p1","row":0,"lat":37.5,"lon":127.0}
{"id":"a1","place_id":"p1","row":1,"lat":37.5,"lon":127.0}
{"id":"a2","place_id":"p1","row":2,"lat":37.5,"lon":127.0}
{"id":"b0","place_id":"p2","row":3,"frame":10}
{"id":"b1","place_id":"p2","row":4,"frame":11}
"#;

    #[test]
    fn fixture_parses_in_order_with_two_places() {
        let records = parse_manifest(FIXTURE).unwrap();
        assert_eq!(records.len(), 5);
        assert_eq!(records[0].id, "a0");
        assert_eq!(records[4].id, "b1");
        let p1 = records.iter().filter(|r| r.place_id == "p1").count();
        let p2 = records.iter().filter(|r| r.place_id == "p2").count();
        assert_eq!((p1, p2), (3, 2));
        assert_eq!(records[3].geotag.frame(), Some(10));
        assert_eq!(records[0].geotag.coords(), Some((37.5, 127.0)));
    }

    #[test]
    fn duplicate_id_is_rejected_with_line() {
        let text = r#"{"id":"a","place_id":"p","row":0,"frame":0}
{"id":"a","place_id":"p","row":1,"frame":1}
"#;
        match parse_manifest(text) {
            Err(ManifestError::DuplicateId { line: 2, id }) => assert_eq!(id, "a"),
            other => panic!("expected DuplicateId, got {other:?}"),
        }
    }

    #[test]
    fn missing_required_field_names_the_field() {
        let text = r#"{"id":"a","row":0,"frame":0}"#;
        match parse_manifest(text) {
            Err(ManifestError::MissingField { line: 1, field: "place_id" }) => {}
            other => panic!("expected MissingField place_id, got {other:?}"),
        }
    }

    #[test]
    fn lat_without_lon_is_rejected() {
        let text = r#"{"id":"a","place_id":"p","row":0,"lat":37.0}"#;
        assert!(matches!(
            parse_manifest(text),
            Err(ManifestError::MissingField { field: "lon", .. })
        ));
    }

    #[test]
    fn record_without_any_geotag_is_rejected() {
        let text = r#"{"id":"a","place_id":"p","row":0}"#;
        match parse_manifest(text) {
            Err(ManifestError::BadGeoTag { line: 1, source: GeoTagError::Empty }) => {}
            other => panic!("expected BadGeoTag/Empty, got {other:?}"),
        }
    }

    #[test]
    fn out_of_range_coordinates_are_rejected() {
        let text = r#"{"id":"a","place_id":"p","row":0,"lat":91.0,"lon":0.0}"#;
        assert!(matches!(
            parse_manifest(text),
            Err(ManifestError::BadGeoTag { source: GeoTagError::LatOutOfRange(_), .. })
        ));
        let text = r#"{"id":"a","place_id":"p","row":0,"lat":0.0,"lon":-181.0}"#;
        assert!(matches!(
            parse_manifest(text),
            Err(ManifestError::BadGeoTag { source: GeoTagError::LonOutOfRange(_), .. })
        ));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let text = r#"{"id":"a","place_id":"p","row":0,"frame":0,"color":"red"}"#;
        assert!(matches!(parse_manifest(text), Err(ManifestError::Parse { line: 1, .. })));
    }

    #[test]
    fn malformed_json_reports_line() {
        let text = "{\"id\":\"a\",\"place_id\":\"p\",\"row\":0,\"frame\":0}\nnot json\n";
        assert!(matches!(parse_manifest(text), Err(ManifestError::Parse { line: 2, .. })));
    }

    #[test]
    fn write_read_round_trip_preserves_records() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        let records = parse_manifest(FIXTURE).unwrap();
        write_manifest(&path, &records).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back, records);
    }

    #[test]
    fn blank_lines_are_skipped() {
        let text = "\n{\"id\":\"a\",\"place_id\":\"p\",\"row\":0,\"frame\":0}\n\n";
        assert_eq!(parse_manifest(text).unwrap().len(), 1);
    }
}
