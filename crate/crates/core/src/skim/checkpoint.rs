//! Single-file checkpoint format shared by every model in the crate.
//!
//! Layout: LE u32 header length, JSON header (config value + tensor table
//! with per-tensor byte offsets), then the tensor blobs back to back.
//! Offsets are relative to the start of the blob section so the header can
//! be rewritten without touching payloads.

use std::io::{Read as _, Write as _};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::numerics::{blob_len, read_blob, write_blob, Tensor};

use super::{Result, SkimError};

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

pub fn save(path: &Path, config: serde_json::Value, named: &[(String, Tensor)]) -> Result<()> {
    let mut entries = Vec::with_capacity(named.len());
    let mut blobs = Vec::new();
    for (name, t) in named {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blobs.len(),
        });
        write_blob(t, &mut blobs);
    }
    let header = serde_json::to_vec(&Header {
        config,
        tensors: entries,
    })
    .expect("header serializes");
    let mut file = std::fs::File::create(path)?;
    file.write_all(&(header.len() as u32).to_le_bytes())?;
    file.write_all(&header)?;
    file.write_all(&blobs)?;
    Ok(())
}

/// Read back the config value and every named tensor.
pub fn load(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 4 {
        return Err(SkimError::Checkpoint("file too short for header".into()));
    }
    let header_len = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let blob_base = 4 + header_len;
    if bytes.len() < blob_base {
        return Err(SkimError::Checkpoint(format!(
            "declared header of {header_len} bytes exceeds file"
        )));
    }
    let header: Header = serde_json::from_slice(&bytes[4..blob_base])
        .map_err(|e| SkimError::Checkpoint(format!("bad header json: {e}")))?;
    let blobs = &bytes[blob_base..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for entry in header.tensors {
        let (t, end) = read_blob(blobs, entry.offset)
            .map_err(|e| SkimError::Checkpoint(format!("tensor {}: {e}", entry.name)))?;
        if t.shape() != entry.shape.as_slice() {
            return Err(SkimError::Checkpoint(format!(
                "tensor {}: header shape {:?} != blob shape {:?}",
                entry.name,
                entry.shape,
                t.shape()
            )));
        }
        debug_assert_eq!(end - entry.offset, blob_len(t.shape()));
        tensors.push((entry.name, t));
    }
    Ok((header.config, tensors))
}

/// Copy loaded values into a freshly built model's parameters, matching by
/// name. Every parameter must be present exactly once with the right shape.
pub fn restore(params: &[(String, Tensor)], loaded: &[(String, Tensor)]) -> Result<()> {
    if params.len() != loaded.len() {
        return Err(SkimError::Checkpoint(format!(
            "parameter count mismatch: model has {}, checkpoint has {}",
            params.len(),
            loaded.len()
        )));
    }
    let by_name: std::collections::HashMap<&str, &Tensor> =
        loaded.iter().map(|(n, t)| (n.as_str(), t)).collect();
    for (name, target) in params {
        let source = by_name
            .get(name.as_str())
            .ok_or_else(|| SkimError::Checkpoint(format!("missing tensor {name}")))?;
        if source.shape() != target.shape() {
            return Err(SkimError::Checkpoint(format!(
                "tensor {name}: checkpoint shape {:?} != model shape {:?}",
                source.shape(),
                target.shape()
            )));
        }
        target.set_data(&source.to_vec())?;
    }
    Ok(())
}
