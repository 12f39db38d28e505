//! `EEGD` binary dataset format, little-endian throughout:
//!
//! ```text
//! magic "EEGD" | version u32 = 1 | n_trials u32 | n_channels u32
//! | n_timepoints u32 | n_classes u32 | has_noise_mask u8
//! per trial: subject_id u32 | label u32 | f32 × (n_channels · n_timepoints), channel-major
//! if has_noise_mask: n_trials bytes of 0/1
//! ```

use std::fs;
use std::path::Path;

use super::{Dataset, Trial};
use crate::binfmt::Reader;
use crate::error::{Error, ParseError, Result};

pub const DATASET_MAGIC: [u8; 4] = *b"EEGD";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: u64 = 25;

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit in u32")))
}

pub fn encode_dataset(d: &Dataset) -> Result<Vec<u8>> {
    d.validate()?;
    let per_trial = 8 + 4 * d.input_dim();
    let mut out = Vec::with_capacity(HEADER_LEN as usize + d.len() * (per_trial + 1));
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(d.len(), "n_trials")?.to_le_bytes());
    out.extend_from_slice(&to_u32(d.n_channels, "n_channels")?.to_le_bytes());
    out.extend_from_slice(&to_u32(d.n_timepoints, "n_timepoints")?.to_le_bytes());
    out.extend_from_slice(&to_u32(d.n_classes, "n_classes")?.to_le_bytes());
    out.push(d.noise_mask.is_some() as u8);
    for t in &d.trials {
        out.extend_from_slice(&t.subject_id.to_le_bytes());
        out.extend_from_slice(&to_u32(t.label, "label")?.to_le_bytes());
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(mask) = &d.noise_mask {
        out.extend(mask.iter().map(|&m| m as u8));
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> std::result::Result<Dataset, ParseError> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let version_at = r.offset();
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(ParseError::VersionMismatch {
            offset: version_at,
            expected: DATASET_VERSION,
            found: version,
        });
    }
    let n_trials = r.u32()? as u64;
    let channels_at = r.offset();
    let n_channels = r.u32()? as u64;
    let n_timepoints = r.u32()? as u64;
    let classes_at = r.offset();
    let n_classes = r.u32()?;
    let mask_flag_at = r.offset();
    let has_mask = match r.u8()? {
        0 => false,
        1 => true,
        other => {
            return Err(ParseError::InvalidValue {
                offset: mask_flag_at,
                what: format!("has_noise_mask must be 0 or 1, got {other}"),
            })
        }
    };
    if n_channels == 0 || n_timepoints == 0 {
        return Err(ParseError::InvalidValue {
            offset: channels_at,
            what: format!("zero trial dimension {n_channels}x{n_timepoints}"),
        });
    }
    if n_classes == 0 {
        return Err(ParseError::InvalidValue {
            offset: classes_at,
            what: "n_classes must be positive".into(),
        });
    }

    // Size arithmetic in u64 with overflow checks; a 32-bit host additionally
    // has to fit the total in usize.
    let overflow = |what: &str| ParseError::DimOverflow {
        offset: channels_at,
        what: what.to_string(),
    };
    let samples = n_channels
        .checked_mul(n_timepoints)
        .ok_or_else(|| overflow("n_channels * n_timepoints"))?;
    let trial_bytes = samples
        .checked_mul(4)
        .and_then(|b| b.checked_add(8))
        .ok_or_else(|| overflow("trial byte size"))?;
    let payload = trial_bytes
        .checked_mul(n_trials)
        .and_then(|b| b.checked_add(if has_mask { n_trials } else { 0 }))
        .ok_or_else(|| overflow("payload byte size"))?;
    let samples = usize::try_from(samples).map_err(|_| overflow("trial size exceeds address space"))?;
    if usize::try_from(payload).is_err() {
        return Err(overflow("payload exceeds address space"));
    }
    if (r.remaining() as u64) < payload {
        // Walk to the first incomplete item so the offset is meaningful.
        let complete = r.remaining() as u64 / trial_bytes;
        let at = if complete < n_trials {
            r.offset() + complete * trial_bytes
        } else {
            r.offset() + n_trials * trial_bytes
        };
        return Err(ParseError::Truncated {
            offset: at,
            needed: payload - r.remaining() as u64,
        });
    }

    let n_channels = n_channels as usize;
    let n_timepoints = n_timepoints as usize;
    let mut trials = Vec::with_capacity(n_trials as usize);
    for _ in 0..n_trials {
        let subject_id = r.u32()?;
        let label_at = r.offset();
        let label = r.u32()?;
        if label >= n_classes {
            return Err(ParseError::InvalidValue {
                offset: label_at,
                what: format!("label {label} >= n_classes {n_classes}"),
            });
        }
        let data_at = r.offset();
        let raw = r.take(samples * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(ParseError::InvalidValue {
                offset: data_at + 4 * k as u64,
                what: "non-finite sample".into(),
            });
        }
        trials.push(Trial {
            data,
            n_channels,
            n_timepoints,
            label: label as usize,
            subject_id,
        });
    }
    let noise_mask = if has_mask {
        let at = r.offset();
        let raw = r.take(n_trials as usize)?;
        let mut mask = Vec::with_capacity(raw.len());
        for (i, &b) in raw.iter().enumerate() {
            match b {
                0 => mask.push(false),
                1 => mask.push(true),
                other => {
                    return Err(ParseError::InvalidValue {
                        offset: at + i as u64,
                        what: format!("noise mask byte must be 0 or 1, got {other}"),
                    })
                }
            }
        }
        Some(mask)
    } else {
        None
    };
    r.finish()?;
    Ok(Dataset {
        n_channels,
        n_timepoints,
        n_classes: n_classes as usize,
        trials,
        noise_mask,
    })
}

pub fn save_dataset(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_dataset(d)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_dataset(&bytes)?)
}
