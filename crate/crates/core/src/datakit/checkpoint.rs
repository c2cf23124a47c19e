//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"MTVF" | version: u32 | header_len: u64 | header JSON | f32 payload | crc64: u64
//! ```
//!
//! The header lists every parameter (path, group, shape) in payload order plus
//! the dtype and a free-form config snapshot. The trailing CRC-64/ECMA-182
//! covers every preceding byte.

use std::path::Path;

use crc::{Crc, CRC_64_ECMA_182};
use serde::{Deserialize, Serialize};

use crate::diffcore::{ModelParams, ParamGroup, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"MTVF";
pub const CHECKPOINT_VERSION: u32 = 1;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

#[derive(Serialize, Deserialize)]
struct Entry {
    path: String,
    group: ParamGroup,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    dtype: String,
    params: Vec<Entry>,
    config: serde_json::Value,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub config: serde_json::Value,
}

pub fn save_checkpoint(path: &Path, params: &ModelParams<f32>, config: &serde_json::Value) -> Result<()> {
    let header = Header {
        dtype: "f32".into(),
        params: params
            .iter()
            .map(|(p, prm)| Entry { path: p.to_owned(), group: prm.group, shape: prm.tensor.shape().to_vec() })
            .collect(),
        config: config.clone(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 4 * params.count(None) + 8);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, prm) in params.iter() {
        for v in prm.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = CRC64.checksum(&buf);
    buf.extend_from_slice(&sum.to_le_bytes());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 24 {
        return Err(Error::Checkpoint(format!(
            "{}: checksum mismatch (file truncated to {} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
    if CRC64.checksum(body) != stored {
        return Err(Error::Checkpoint(format!("{}: checksum mismatch", path.display())));
    }
    if &body[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unknown version {version} (supported: {CHECKPOINT_VERSION})")));
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().expect("8 bytes")) as usize;
    let json = body.get(16..16 + hlen).ok_or_else(|| Error::Checkpoint("header overruns file".into()))?;
    let header: Header = serde_json::from_slice(json)?;
    if header.dtype != "f32" {
        return Err(Error::Checkpoint(format!("unsupported dtype {}", header.dtype)));
    }
    let payload = &body[16 + hlen..];
    let declared: usize = header.params.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    if payload.len() != 4 * declared {
        return Err(Error::Checkpoint(format!(
            "payload holds {} values but header declares {declared}",
            payload.len() / 4
        )));
    }
    let mut params = ModelParams::new();
    let mut floats = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    for e in header.params {
        let n: usize = e.shape.iter().product();
        let data: Vec<f32> = floats.by_ref().take(n).collect();
        params.insert(e.path, e.group, Tensor::new(&e.shape, data)?)?;
    }
    Ok(Checkpoint { params, config: header.config })
}

/// Loads a checkpoint into an existing parameter set; the error names the
/// first path whose presence, shape or group disagrees.
pub fn load_into(path: &Path, params: &mut ModelParams<f32>) -> Result<serde_json::Value> {
    let ck = load_checkpoint(path)?;
    params.assign_from(&ck.params)?;
    Ok(ck.config)
}
