//! Best-checkpoint container: named parameter tensors in a small binary file
//! plus a JSON sidecar.
//!
//! ```text
//! "XPRM" | version u16 | tensor count u32
//! per tensor: name len u16 | name utf-8 | ndim u8 | dims u64 * ndim | dtype u8 | values LE
//! CRC32 (u32) of every byte after the 10-byte header
//! ```
//! All integers little-endian; dtype 1 = f32, 2 = f64.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ParameterSet};
use crate::tensor::{Scalar, Tensor};

const MAGIC: &[u8; 4] = b"XPRM";
const VERSION: u16 = 1;
const HEADER_LEN: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub seed: u64,
    pub step: u64,
    pub best_val_mse: f64,
}

fn dtype_code<T: Scalar>() -> u8 {
    if T::NAME == "f64" {
        2
    } else {
        1
    }
}

/// Writes `<path>` (binary) and `<path>.json` (metadata).
pub fn save_checkpoint<T: Scalar>(
    params: &ParameterSet<T>,
    meta: &CheckpointMeta,
    path: &Path,
) -> Result<(), ModelError> {
    let named = params.named();
    let mut body = Vec::new();
    for (name, _, t) in &named {
        body.extend_from_slice(&(name.len() as u16).to_le_bytes());
        body.extend_from_slice(name.as_bytes());
        body.push(t.shape().len() as u8);
        for &d in t.shape() {
            body.extend_from_slice(&(d as u64).to_le_bytes());
        }
        body.push(dtype_code::<T>());
        for v in t.data() {
            if dtype_code::<T>() == 2 {
                body.extend_from_slice(&v.to_f64().to_le_bytes());
            } else {
                body.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
            }
        }
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + body.len() + 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(named.len() as u32).to_le_bytes());
    buf.extend_from_slice(&body);
    buf.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    fs::write(path, buf)?;
    let mut side = path.as_os_str().to_owned();
    side.push(".json");
    fs::write(side, serde_json::to_string_pretty(meta)? + "\n")?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| ModelError::Checkpoint("truncated tensor data".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelError> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

pub fn load_checkpoint<T: Scalar>(
    path: &Path,
) -> Result<(ParameterSet<T>, CheckpointMeta), ModelError> {
    let mut side = path.as_os_str().to_owned();
    side.push(".json");
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(side)?)?;

    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_LEN + 4 || &bytes[..4] != MAGIC {
        return Err(ModelError::Checkpoint("bad magic".into()));
    }
    if u16::from_le_bytes([bytes[4], bytes[5]]) != VERSION {
        return Err(ModelError::Checkpoint("unsupported version".into()));
    }
    let count = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let body = &bytes[HEADER_LEN..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(ModelError::Checkpoint("checksum mismatch".into()));
    }

    let mut params = ParameterSet::<T>::zeros(&meta.config)?;
    let mut slots = params.named_mut();
    if slots.len() != count {
        return Err(ModelError::Checkpoint(format!(
            "{count} tensors stored, config needs {}",
            slots.len()
        )));
    }
    let mut r = Reader { bytes: body, at: 0 };
    for (name, _, slot) in slots.iter_mut() {
        let len = r.u16()? as usize;
        let stored_name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| ModelError::Checkpoint("tensor name is not utf-8".into()))?;
        if stored_name != name {
            return Err(ModelError::Checkpoint(format!(
                "expected tensor {name}, found {stored_name}"
            )));
        }
        let ndim = r.u8()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        if shape != slot.shape() {
            return Err(ModelError::Checkpoint(format!(
                "{name}: stored shape {shape:?}, expected {:?}",
                slot.shape()
            )));
        }
        let n: usize = shape.iter().product();
        let data = match r.u8()? {
            1 => r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|b| T::from_f64(f64::from(f32::from_le_bytes(b.try_into().expect("4")))))
                .collect(),
            2 => r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|b| T::from_f64(f64::from_le_bytes(b.try_into().expect("8"))))
                .collect(),
            code => {
                return Err(ModelError::Checkpoint(format!("unknown dtype {code}")));
            }
        };
        **slot = Tensor::new(shape, data)?;
    }
    drop(slots);
    Ok((params, meta))
}
