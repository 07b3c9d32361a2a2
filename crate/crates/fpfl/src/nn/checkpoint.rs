//! Model checkpoint file format.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset  size          field
//! 0       4             magic "FPNN"
//! 4       4             format version, u32 (currently 1)
//! 8       4             header length H, u32
//! 12      H             header: architecture descriptor as UTF-8 JSON
//! 12+H    8             parameter count P, u64
//! 20+H    8*P           parameters, f64 little-endian
//! ```
//!
//! The parameter count must equal the count implied by the architecture and
//! the file must end exactly after the last parameter.

use std::fs;
use std::path::Path;

use super::{ArchitectureSpec, ModelParams};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FPNN";
pub const VERSION: u32 = 1;

const MAX_HEADER_LEN: u32 = 1 << 20;

pub fn encode(model: &ModelParams) -> Vec<u8> {
    let header = serde_json::to_vec(&model.arch).expect("arch serializes");
    let mut out = Vec::with_capacity(20 + header.len() + 8 * model.weights.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(model.weights.len() as u64).to_le_bytes());
    for w in &model.weights {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ModelParams> {
    let take = |at: usize, len: usize| -> Result<&[u8]> {
        bytes
            .get(at..at + len)
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))
    };
    if take(0, 4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let version = u32::from_le_bytes(take(4, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let header_len = u32::from_le_bytes(take(8, 4)?.try_into().unwrap());
    if header_len > MAX_HEADER_LEN {
        return Err(Error::Format(format!("header length {header_len} too large")));
    }
    let header = take(12, header_len as usize)?;
    let arch: ArchitectureSpec = serde_json::from_slice(header)
        .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
    arch.validate()
        .map_err(|e| Error::Format(format!("checkpoint architecture: {e}")))?;

    let at = 12 + header_len as usize;
    let count = u64::from_le_bytes(take(at, 8)?.try_into().unwrap());
    if count != arch.param_count() as u64 {
        return Err(Error::Format(format!(
            "parameter count {count} does not match architecture ({})",
            arch.param_count()
        )));
    }
    let at = at + 8;
    let body_len = (count as usize)
        .checked_mul(8)
        .ok_or_else(|| Error::Format("parameter count overflow".into()))?;
    if bytes.len() != at + body_len {
        return Err(Error::Format(format!(
            "checkpoint length {} does not match expected {}",
            bytes.len(),
            at + body_len
        )));
    }
    let mut weights = Vec::with_capacity(count as usize);
    for chunk in bytes[at..].chunks_exact(8) {
        let w = f64::from_le_bytes(chunk.try_into().unwrap());
        if !w.is_finite() {
            return Err(Error::Format("non-finite parameter in checkpoint".into()));
        }
        weights.push(w);
    }
    Ok(ModelParams { arch, weights })
}

pub fn save(model: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, encode(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let bytes = fs::read(path)?;
    decode(&bytes)
}
