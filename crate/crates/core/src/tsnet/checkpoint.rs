//! Checkpoint layout: the 8-byte magic `TSSEPCK1`, a little-endian `u64`
//! header length, a JSON header, then every tensor as little-endian `f64`
//! in header order (row-major).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{HeadKind, TsNetDims, TsNetParams, PARAM_NAMES};
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"TSSEPCK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub step: usize,
    /// 1 for the VAD stage, 2 for separation; derived from the head when absent.
    pub stage: Option<u8>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    dims: TsNetDims,
    head: HeadKind,
    stage: u8,
    seed: u64,
    step: usize,
    tensors: Vec<TensorInfo>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorInfo {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(path: &Path, p: &TsNetParams, meta: &CheckpointMeta) -> Result<()> {
    let header = Header {
        dims: p.dims,
        head: p.head_kind,
        stage: meta.stage.unwrap_or(match p.head_kind {
            HeadKind::Vad => 1,
            HeadKind::Mask => 2,
        }),
        seed: meta.seed,
        step: meta.step,
        tensors: PARAM_NAMES
            .iter()
            .zip(p.shapes())
            .map(|(n, s)| TensorInfo {
                name: n.to_string(),
                shape: s,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + 8 * p.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in p.tensors() {
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    // write-then-rename so a crash never leaves a truncated checkpoint
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)?.write_all(&out)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(TsNetParams, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let bad = |why: &str| Error::Checkpoint(format!("{}: {why}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&format!("header: {e}")))?;
    header.dims.validate()?;
    let mut p = TsNetParams::zeros(header.dims, header.head);
    let shapes = p.shapes();
    if header.tensors.len() != PARAM_NAMES.len()
        || header
            .tensors
            .iter()
            .zip(PARAM_NAMES.iter().zip(&shapes))
            .any(|(t, (n, s))| t.name != *n || &t.shape != s)
    {
        return Err(bad("tensor table does not match the declared dimensions"));
    }
    let mut data = &bytes[16 + len..];
    if data.len() != 8 * p.num_params() {
        return Err(bad("tensor data has the wrong length"));
    }
    for t in p.tensors_mut() {
        for v in t.iter_mut() {
            *v = f64::from_le_bytes(data[..8].try_into().expect("8 bytes"));
            data = &data[8..];
        }
    }
    if !p.is_finite() {
        return Err(bad("non-finite parameters"));
    }
    Ok((
        p,
        CheckpointMeta {
            seed: header.seed,
            step: header.step,
            stage: Some(header.stage),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::super::tests::tiny_dims;
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let p = super::super::init_stage2(&TsNetParams::random(tiny_dims(), HeadKind::Vad, 5).unwrap()).unwrap();
        save_checkpoint(&path, &p, &CheckpointMeta { seed: 5, step: 17, stage: None }).unwrap();
        let (q, meta) = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
        assert_eq!(meta, CheckpointMeta { seed: 5, step: 17, stage: Some(2) });
    }

    #[test]
    fn rejects_missing_and_corrupt_files() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_checkpoint(&dir.path().join("nope")), Err(Error::Checkpoint(_))));
        let path = dir.path().join("b.ckpt");
        let p = TsNetParams::random(tiny_dims(), HeadKind::Vad, 5).unwrap();
        save_checkpoint(&path, &p, &CheckpointMeta { seed: 0, step: 0, stage: None }).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
        fs::write(&path, b"garbage").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
