//! `TDNM` model checkpoints.
//!
//! Layout, all little-endian:
//!
//! ```text
//! offset  size  field
//! 0       4     magic "TDNM"
//! 4       4     u32 format version (1)
//! 8       4     u32 m
//! 12      4     u32 K (heads)
//! 16      4     u32 L (layers)
//! 20      4     u32 C (labels)
//! 24      4     u32 activation (0 relu, 1 tanh, 2 sigmoid, 3 identity)
//! 28      8     f64 eps_deg
//! 36      8     f64 eps_ln
//! 44      ...   f64 parameters, tensors in `TdnParams::named_tensors` order,
//!               each tensor row-major
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Result, TdnError};
use crate::linalg::Activation;
use crate::model::{TdnConfig, TdnModel, TdnParams};

pub const MAGIC: &[u8; 4] = b"TDNM";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 44;

pub fn encode(model: &TdnModel) -> Result<Vec<u8>> {
    model.validate()?;
    let cfg = &model.config;
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * model.params.count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [cfg.m, cfg.heads, cfg.layers, cfg.labels] {
        let v = u32::try_from(v).map_err(|_| TdnError::validation(format!("dimension {v} exceeds u32")))?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&cfg.activation.code().to_le_bytes());
    out.extend_from_slice(&cfg.eps_deg.to_le_bytes());
    out.extend_from_slice(&cfg.eps_ln.to_le_bytes());
    for t in model.params.tensors() {
        for v in t.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

fn read_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| TdnError::format(offset, "truncated header"))
}

fn read_f64(bytes: &[u8], offset: usize) -> Result<f64> {
    bytes
        .get(offset..offset + 8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .ok_or_else(|| TdnError::format(offset, "truncated header"))
}

pub fn decode(bytes: &[u8]) -> Result<TdnModel> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(TdnError::format(0, "missing TDNM magic"));
    }
    let version = read_u32(bytes, 4)?;
    if version != VERSION {
        return Err(TdnError::format(4, format!("unsupported checkpoint version {version}")));
    }
    let m = read_u32(bytes, 8)? as usize;
    let heads = read_u32(bytes, 12)? as usize;
    let layers = read_u32(bytes, 16)? as usize;
    let labels = read_u32(bytes, 20)? as usize;
    let code = read_u32(bytes, 24)?;
    let activation = Activation::from_code(code)
        .ok_or_else(|| TdnError::format(24, format!("unknown activation code {code}")))?;
    let config = TdnConfig {
        m,
        heads,
        layers,
        labels,
        eps_deg: read_f64(bytes, 28)?,
        eps_ln: read_f64(bytes, 36)?,
        activation,
    };
    config
        .validate()
        .map_err(|e| TdnError::format(8, format!("invalid configuration: {e}")))?;

    let mut params = TdnParams::zeros(&config)?;
    let expected = HEADER_LEN + 8 * params.count();
    if bytes.len() != expected {
        return Err(TdnError::format(
            bytes.len().min(expected),
            format!("checkpoint is {} bytes, expected {expected}", bytes.len()),
        ));
    }
    let mut offset = HEADER_LEN;
    for t in params.tensors_mut() {
        for v in t.as_mut_slice() {
            *v = f64::from_le_bytes(bytes[offset..offset + 8].try_into().expect("8 bytes"));
            offset += 8;
        }
    }
    let model = TdnModel { config, params };
    model
        .validate()
        .map_err(|e| TdnError::format(HEADER_LEN, e.to_string()))?;
    Ok(model)
}

pub fn save(model: &TdnModel, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<TdnModel> {
    decode(&fs::read(path)?)
}
