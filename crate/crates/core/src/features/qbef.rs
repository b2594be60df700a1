//! QBEF binary feature files.
//!
//! Layout (little-endian): magic `QBEF`, u32 version (1), u32 frame count,
//! u32 feature dim, f64 frame period in seconds, then `T * d` f32 values in
//! row-major order.

use std::fs;
use std::path::Path;

use super::FeatureSequence;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"QBEF";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 4 + 8;

pub fn encode(seq: &FeatureSequence) -> Result<Vec<u8>> {
    seq.validate()?;
    let t = u32::try_from(seq.len())
        .map_err(|_| Error::Validation(format!("{}: too many frames", seq.id())))?;
    let d = u32::try_from(seq.dim())
        .map_err(|_| Error::Validation(format!("{}: feature dim too large", seq.id())))?;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * seq.as_slice().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&t.to_le_bytes());
    out.extend_from_slice(&d.to_le_bytes());
    out.extend_from_slice(&seq.frame_period().to_le_bytes());
    for v in seq.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(id: &str, bytes: &[u8]) -> Result<FeatureSequence> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("{id}: bad magic, expected QBEF")));
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated(format!("{id}: header is {} bytes", bytes.len())));
    }
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != VERSION {
        return Err(Error::Format(format!("{id}: unsupported version {version}")));
    }
    let t = u32_at(8) as usize;
    let d = u32_at(12) as usize;
    let frame_period = f64::from_le_bytes(bytes[16..24].try_into().unwrap());
    let expected = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::Format(format!("{id}: header dims overflow")))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(Error::Truncated(format!(
            "{id}: header declares {t}x{d} values but payload holds {}",
            payload.len() / 4
        )));
    }
    if payload.len() > expected {
        return Err(Error::Format(format!(
            "{id}: {} trailing bytes after payload",
            payload.len() - expected
        )));
    }
    let frames = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    FeatureSequence::new(id, frames, d, frame_period)
}

/// Reads a QBEF file. The sequence id is the file stem.
pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    decode(&id, &bytes)
}

/// Reads a QBEF file and checks its feature dim against `expected_dim`.
pub fn load_features_with_dim(path: impl AsRef<Path>, expected_dim: usize) -> Result<FeatureSequence> {
    let path = path.as_ref();
    let seq = load_features(path)?;
    if seq.dim() != expected_dim {
        return Err(Error::Validation(format!(
            "{}: feature dim {} does not match manifest dim {expected_dim}",
            path.display(),
            seq.dim()
        )));
    }
    Ok(seq)
}

pub fn write_features(seq: &FeatureSequence, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(seq)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
