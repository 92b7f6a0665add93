//! Binary checkpoints.
//!
//! Layout: the magic `IPGPCKPT`, a little-endian `u64` header length, the
//! JSON header, then every parameter as little-endian `f64` in row-major
//! order at the offsets (in values, not bytes) listed in the header.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::params::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::ingest::TimeBins;

const MAGIC: &[u8; 8] = b"IPGPCKPT";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    bins: TimeBins,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Everything needed to score slides with a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub bins: TimeBins,
    /// Free-form training metadata (fold, validation score, ...).
    pub meta: serde_json::Value,
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let mut tensors = Vec::with_capacity(ckpt.params.values.len());
    let mut offset = 0;
    for (name, v) in ckpt.params.names.iter().zip(&ckpt.params.values) {
        tensors.push(TensorEntry {
            name: name.clone(),
            rows: v.nrows(),
            cols: v.ncols(),
            offset,
        });
        offset += v.len();
    }
    let header = Header {
        config: ckpt.params.config.clone(),
        bins: ckpt.bins.clone(),
        tensors,
        meta: ckpt.meta.clone(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Invalid(e.to_string()))?;
    let mut buf = Vec::with_capacity(16 + header.len() + 8 * offset);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in &ckpt.params.values {
        for x in v.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |m: &str| Error::format(path, m);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body_start = 16usize
        .checked_add(header_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..body_start]).map_err(|e| bad(&format!("bad header: {e}")))?;
    let body = &bytes[body_start..];
    let mut named = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n = t.rows * t.cols;
        let (start, end) = (8 * t.offset, 8 * (t.offset + n));
        if end > body.len() {
            return Err(bad(&format!("tensor {} runs past the end of the file", t.name)));
        }
        let data: Vec<f64> = body[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let value = Array2::from_shape_vec((t.rows, t.cols), data).expect("sized above");
        if value.iter().any(|x| !x.is_finite()) {
            return Err(bad(&format!("tensor {} holds non-finite values", t.name)));
        }
        named.push((t.name.clone(), value));
    }
    let params = ModelParams::from_named(&header.config, named)?;
    Ok(Checkpoint {
        params,
        bins: header.bins,
        meta: header.meta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let cfg = ModelConfig {
            d_in: 5,
            hidden: 3,
            n_blocks: 1,
            ..ModelConfig::default()
        };
        let ckpt = Checkpoint {
            params: ModelParams::init(&cfg, 11).unwrap(),
            bins: TimeBins { edges: vec![1.5, 2.5] },
            meta: serde_json::json!({"fold": 2}),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &ckpt).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        fs::write(&path, b"hello").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
