//! XMAT container.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "XMAT"
//! 4       2     version (u16 LE) = 1
//! 6       8     n_cells (u64 LE)
//! 14      8     n_genes (u64 LE)
//! 22      1     dtype code (1 = f32)
//! 23      1     stage code (0 = raw counts, 1 = normalized log1p)
//! 24      4*N   values, row-major f32 LE
//! 24+4N   4     CRC32 of the value bytes (u32 LE)
//! ```
//!
//! Metadata lives in a JSON sidecar next to the file (`<path>.json`).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CorpusError, ExpressionMatrix, Result, SplitAssignment, SplitTag, Stage};

pub const MAGIC: &[u8; 4] = b"XMAT";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 24;
pub const TRAILER_LEN: usize = 4;
const DTYPE_F32: u8 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Sidecar {
    gene_names: Vec<String>,
    cell_labels: Option<Vec<String>>,
    split: Option<Vec<SplitTag>>,
    seed: Option<u64>,
    provenance: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn save_matrix(m: &ExpressionMatrix, path: &Path) -> Result<()> {
    let mut payload = Vec::with_capacity(m.values().len() * 4);
    for v in m.values() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    let mut buf = Vec::with_capacity(HEADER_LEN + payload.len() + TRAILER_LEN);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(m.n_cells() as u64).to_le_bytes());
    buf.extend_from_slice(&(m.n_genes() as u64).to_le_bytes());
    buf.push(DTYPE_F32);
    buf.push(m.stage().code());
    buf.extend_from_slice(&payload);
    buf.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    fs::write(path, buf)?;

    let sidecar = Sidecar {
        gene_names: m.gene_names().to_vec(),
        cell_labels: m.cell_labels().map(<[String]>::to_vec),
        split: m.split().map(|s| s.tags().to_vec()),
        seed: m.split().map(SplitAssignment::seed),
        provenance: m.provenance().to_string(),
    };
    fs::write(
        sidecar_path(path),
        serde_json::to_string_pretty(&sidecar)? + "\n",
    )?;
    Ok(())
}

fn read_u64(bytes: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(bytes[at..at + 8].try_into().expect("8-byte slice"))
}

pub fn load_matrix(path: &Path) -> Result<ExpressionMatrix> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_LEN + TRAILER_LEN {
        return Err(CorpusError::Format(format!(
            "{} bytes is shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[0..4] != MAGIC {
        return Err(CorpusError::Format(format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(CorpusError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let n_cells = read_u64(&bytes, 6) as usize;
    let n_genes = read_u64(&bytes, 14) as usize;
    if bytes[22] != DTYPE_F32 {
        return Err(CorpusError::Format(format!(
            "unsupported dtype code {}",
            bytes[22]
        )));
    }
    let stage = Stage::from_code(bytes[23])
        .ok_or_else(|| CorpusError::Format(format!("unknown stage code {}", bytes[23])))?;
    let n_values = n_cells
        .checked_mul(n_genes)
        .ok_or_else(|| CorpusError::Format("dimension overflow".into()))?;
    let expected = HEADER_LEN + n_values * 4 + TRAILER_LEN;
    if bytes.len() != expected {
        return Err(CorpusError::Format(format!(
            "expected {expected} bytes for {n_cells} x {n_genes}, found {}",
            bytes.len()
        )));
    }
    let payload = &bytes[HEADER_LEN..HEADER_LEN + n_values * 4];
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().expect("4-byte slice"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CorpusError::Checksum { stored, computed });
    }
    let values = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4-byte chunk")))
        .collect();

    let sidecar: Sidecar = serde_json::from_str(&fs::read_to_string(sidecar_path(path))?)?;
    let mut m = ExpressionMatrix::new(n_cells, n_genes, values, sidecar.gene_names, stage)?
        .with_provenance(sidecar.provenance);
    if let Some(labels) = sidecar.cell_labels {
        m = m.with_cell_labels(labels)?;
    }
    if let Some(tags) = sidecar.split {
        let seed = sidecar
            .seed
            .ok_or_else(|| CorpusError::Format("split tags without a seed".into()))?;
        m = m.with_split(SplitAssignment::new(tags, seed))?;
    }
    Ok(m)
}
