//! Binary embedding store.
//!
//! Layout: magic `"AEB1"`, version (u32 LE), count (u32 LE), dim (u32 LE),
//! normalized flag (u8), three reserved zero bytes, then `count * dim`
//! `f32` values little-endian in row-major order. Values are widened to
//! `f64` on read; writing narrows back to `f32`, so read-then-write
//! reproduces a valid file byte for byte.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::embedding::{EmbeddingError, EmbeddingMatrix};

pub const STORE_MAGIC: [u8; 4] = *b"AEB1";
pub const STORE_VERSION: u32 = 1;
/// Fixed byte length of the header fields listed above.
pub const STORE_HEADER_LEN: usize = 20;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic {found:02x?}, expected \"AEB1\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported store version {found}, expected {STORE_VERSION}")]
    VersionUnsupported { found: u32 },
    #[error("invalid header: {reason}")]
    InvalidHeader { reason: String },
    #[error("payload truncated: expected {expected} bytes after the header, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
}

pub(crate) fn get_u32(bytes: &[u8], offset: usize) -> u32 {
    u32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap())
}

pub(crate) fn get_f64s(bytes: &[u8], count: usize) -> Vec<f64> {
    bytes[..count * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub(crate) fn put_f64s(buf: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn read_store(path: &Path) -> Result<EmbeddingMatrix, StoreError> {
    let bytes = fs::read(path)?;
    parse_store(&bytes)
}

pub fn parse_store(bytes: &[u8]) -> Result<EmbeddingMatrix, StoreError> {
    if bytes.len() < STORE_HEADER_LEN {
        if bytes.len() < 4 {
            let mut found = [0u8; 4];
            found[..bytes.len()].copy_from_slice(bytes);
            return Err(StoreError::BadMagic { found });
        }
        if bytes[..4] != STORE_MAGIC {
            return Err(StoreError::BadMagic { found: bytes[..4].try_into().unwrap() });
        }
        return Err(StoreError::InvalidHeader {
            reason: format!("header needs {STORE_HEADER_LEN} bytes, file has {}", bytes.len()),
        });
    }
    if bytes[..4] != STORE_MAGIC {
        return Err(StoreError::BadMagic { found: bytes[..4].try_into().unwrap() });
    }
    let version = get_u32(bytes, 4);
    if version != STORE_VERSION {
        return Err(StoreError::VersionUnsupported { found: version });
    }
    let count = get_u32(bytes, 8) as usize;
    let dim = get_u32(bytes, 12) as usize;
    let flag = bytes[16];
    if flag > 1 {
        return Err(StoreError::InvalidHeader { reason: format!("normalized flag must be 0 or 1, got {flag}") });
    }
    if bytes[17..20] != [0, 0, 0] {
        return Err(StoreError::InvalidHeader { reason: "reserved bytes must be zero".to_string() });
    }
    if dim == 0 {
        return Err(StoreError::InvalidHeader { reason: "dim must be at least 1".to_string() });
    }
    let expected = count * dim * 4;
    let found = bytes.len() - STORE_HEADER_LEN;
    if found < expected {
        return Err(StoreError::TruncatedPayload { expected, found });
    }
    if found > expected {
        return Err(StoreError::InvalidHeader {
            reason: format!("{} trailing bytes after a {expected}-byte payload", found - expected),
        });
    }
    let payload = &bytes[STORE_HEADER_LEN..];
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(EmbeddingMatrix::new(dim, flag == 1, data)?)
}

pub fn write_store(path: &Path, matrix: &EmbeddingMatrix) -> Result<(), StoreError> {
    fs::write(path, encode_store(matrix)?)?;
    Ok(())
}

pub fn encode_store(matrix: &EmbeddingMatrix) -> Result<Vec<u8>, StoreError> {
    let count = matrix.count();
    let dim = matrix.dim();
    if count > u32::MAX as usize || dim > u32::MAX as usize {
        return Err(StoreError::InvalidHeader { reason: "count or dim exceeds u32 range".to_string() });
    }
    let mut buf = Vec::with_capacity(STORE_HEADER_LEN + count * dim * 4);
    buf.extend_from_slice(&STORE_MAGIC);
    buf.extend_from_slice(&STORE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.push(u8::from(matrix.normalized()));
    buf.extend_from_slice(&[0, 0, 0]);
    for v in matrix.data() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(buf)
}
