//! Binary checkpoint container:
//!
//! ```text
//! magic (8 bytes) | version u32 LE | header length u64 LE | header JSON |
//! tensor values as f64 LE, in header order
//! ```
//!
//! The header carries the network configuration, the map specification,
//! the skeleton fingerprint and each tensor's name and shape.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelParams, NetworkConfig, ParamTensor};
use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::heatmap::MapSpec;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"KPOSENET";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub map_spec: MapSpec,
    pub skeleton_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    network: NetworkConfig,
    map_spec: MapSpec,
    skeleton_fingerprint: String,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        network: ckpt.params.config.clone(),
        map_spec: ckpt.map_spec,
        skeleton_fingerprint: ckpt.skeleton_fingerprint.clone(),
        tensors: ckpt
            .params
            .tensors
            .iter()
            .map(|t| TensorEntry {
                name: t.name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * ckpt.params.parameter_count());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in &ckpt.params.tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 || bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
    if body.len() < header_len {
        return Err(bad("truncated header"));
    }
    let header: Header = serde_json::from_slice(&body[..header_len])?;
    header
        .network
        .validate()
        .map_err(|e| Error::Checkpoint(format!("invalid network config: {e}")))?;
    let plan = header.network.conv_plan();
    if header.tensors.len() != 2 * plan.len() {
        return Err(bad("tensor list does not match the network config"));
    }
    let mut data = &body[header_len..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for (j, entry) in header.tensors.into_iter().enumerate() {
        let (_, cin, cout, k) = &plan[j / 2];
        let want = if j % 2 == 0 { vec![*cout, *cin, *k, *k] } else { vec![*cout] };
        if entry.shape != want {
            return Err(Error::Checkpoint(format!("tensor {} has shape {:?}, expected {want:?}", entry.name, entry.shape)));
        }
        let n: usize = entry.shape.iter().product();
        if data.len() < 8 * n {
            return Err(bad("truncated tensor data"));
        }
        let values = data[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        data = &data[8 * n..];
        tensors.push(ParamTensor {
            name: entry.name,
            shape: entry.shape,
            data: values,
        });
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(Checkpoint {
        params: ModelParams {
            config: header.network,
            tensors,
        },
        map_spec: header.map_spec,
        skeleton_fingerprint: header.skeleton_fingerprint,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt)?)
}

/// Loads a checkpoint, refusing one trained against a different skeleton.
pub fn load_checkpoint(path: &Path, skeleton_fingerprint: &str) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = decode_checkpoint(&bytes)?;
    if ckpt.skeleton_fingerprint != skeleton_fingerprint {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained for skeleton {} but the dataset uses {}",
            short(&ckpt.skeleton_fingerprint),
            short(skeleton_fingerprint)
        )));
    }
    Ok(ckpt)
}

fn short(fingerprint: &str) -> &str {
    &fingerprint[..fingerprint.len().min(12)]
}
