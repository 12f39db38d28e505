//! `PRMV` parameter checkpoints: magic, version u32, P u64, then P f64 values,
//! all little-endian.

use std::fs;
use std::path::Path;

use super::ParamVector;
use crate::binfmt::Reader;
use crate::error::{Error, ParseError, Result};

pub const PARAMS_MAGIC: [u8; 4] = *b"PRMV";
pub const PARAMS_VERSION: u32 = 1;

pub fn encode_params(theta: &ParamVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * theta.len());
    out.extend_from_slice(&PARAMS_MAGIC);
    out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    out.extend_from_slice(&(theta.len() as u64).to_le_bytes());
    for v in theta.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_params(bytes: &[u8]) -> std::result::Result<ParamVector, ParseError> {
    let mut r = Reader::new(bytes);
    r.magic(PARAMS_MAGIC)?;
    let version_at = r.offset();
    let version = r.u32()?;
    if version != PARAMS_VERSION {
        return Err(ParseError::VersionMismatch {
            offset: version_at,
            expected: PARAMS_VERSION,
            found: version,
        });
    }
    let len_at = r.offset();
    let len = r.u64()?;
    let byte_len = len
        .checked_mul(8)
        .and_then(|b| usize::try_from(b).ok())
        .ok_or(ParseError::DimOverflow {
            offset: len_at,
            what: format!("parameter count {len}"),
        })?;
    let data_at = r.offset();
    let raw = r.take(byte_len)?;
    let values: Vec<f64> = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(k) = values.iter().position(|v| !v.is_finite()) {
        return Err(ParseError::InvalidValue {
            offset: data_at + 8 * k as u64,
            what: "non-finite parameter".into(),
        });
    }
    r.finish()?;
    Ok(ParamVector(values))
}

pub fn save_params(theta: &ParamVector, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_params(theta)).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: impl AsRef<Path>) -> Result<ParamVector> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_params(&bytes)?)
}
