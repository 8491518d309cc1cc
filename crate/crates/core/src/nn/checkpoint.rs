//! Parameter checkpoints: JSON header + raw little-endian f64 values.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::model::{DataShape, DynamicsModelConfig, ModelKind, ModelStructure, ParameterSet};

const MAGIC: &[u8; 8] = b"ASLCKPT1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub config: DynamicsModelConfig,
    pub shape: DataShape,
    pub kind: ModelKind,
    pub step: usize,
    pub stats_fingerprint: String,
    pub n_params: usize,
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParameterSet,
    step: usize,
    stats_fingerprint: &str,
) -> Result<()> {
    let header = CheckpointHeader {
        config: params.structure.config.clone(),
        shape: params.structure.shape,
        kind: params.structure.kind,
        step,
        stats_fingerprint: stats_fingerprint.to_string(),
        n_params: params.n_params(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for v in &params.values {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParameterSet, CheckpointHeader)> {
    let corrupt = |detail: &str| Error::CorruptResult {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)?;

    let structure = ModelStructure::new(header.config.clone(), header.shape, header.kind)?;
    if structure.n_params() != header.n_params {
        return Err(corrupt("parameter count does not match the declared architecture"));
    }
    let mut values = vec![0.0f64; header.n_params];
    let mut buf = [0u8; 8];
    for v in &mut values {
        r.read_exact(&mut buf)?;
        *v = f64::from_le_bytes(buf);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(corrupt("non-finite parameter value"));
    }
    Ok((ParameterSet { structure, values }, header))
}
