//! Checkpoints: a JSON manifest naming every tensor with its shape and byte
//! offset, plus a raw little-endian `f32` blob next to it.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{PcConfig, PcNet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: &str = "pcnet-checkpoint/1";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorKind {
    Param,
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
    pub kind: TensorKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub config: PcConfig,
    /// Free-form record of how the weights were produced (seeds, stage, epochs).
    pub provenance: serde_json::Value,
    pub blob: String,
    pub blob_bytes: u64,
    pub tensors: Vec<TensorEntry>,
}

fn blob_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

/// Writes `<path>` (manifest) and `<path>.bin` (blob, extension replaced).
pub fn save_checkpoint(model: &PcNet, path: &Path, provenance: serde_json::Value) -> Result<CheckpointManifest> {
    let blob_file = blob_path(path);
    let mut bytes = Vec::new();
    let mut tensors = Vec::new();
    let items = model
        .params()
        .into_iter()
        .map(|(n, t)| (n, t, TensorKind::Param))
        .chain(model.buffers().into_iter().map(|(n, t)| (n, t, TensorKind::Buffer)));
    for (name, t, kind) in items {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: bytes.len() as u64,
            kind,
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT.into(),
        config: model.config.clone(),
        provenance,
        blob: blob_file
            .file_name()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Input(format!("bad checkpoint path {}", path.display())))?
            .to_string(),
        blob_bytes: bytes.len() as u64,
        tensors,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    fs::write(&blob_file, &bytes).map_err(|e| Error::io(format!("writing {}", blob_file.display()), e))?;
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    let text = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let manifest: CheckpointManifest = serde_json::from_slice(&text)?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("unsupported checkpoint format {:?}", manifest.format)));
    }
    Ok(manifest)
}

/// Loads a checkpoint written by [`save_checkpoint`]. Every tensor the
/// manifest's architecture implies must be present with a matching shape.
pub fn load_checkpoint(path: &Path) -> Result<(PcNet, CheckpointManifest)> {
    let manifest = read_manifest(path)?;
    let blob_file = path.with_file_name(&manifest.blob);
    let bytes = fs::read(&blob_file).map_err(|e| Error::io(format!("reading {}", blob_file.display()), e))?;
    if bytes.len() as u64 != manifest.blob_bytes {
        return Err(Error::Length {
            what: blob_file.display().to_string(),
            expected: manifest.blob_bytes,
            actual: bytes.len() as u64,
        });
    }
    let mut model = PcNet::build(manifest.config.clone(), 0)?;
    let mut seen = 0usize;
    {
        let mut slots: Vec<(String, &mut Tensor)> = model.params_mut();
        let mut buffers = Vec::new();
        // buffers_mut borrows the head again, so fill params first.
        for entry in &manifest.tensors {
            if entry.kind == TensorKind::Buffer {
                buffers.push(entry);
                continue;
            }
            let slot = slots
                .iter_mut()
                .find(|(n, _)| *n == entry.name)
                .ok_or_else(|| Error::Format(format!("unexpected tensor {}", entry.name)))?;
            fill(slot.1, entry, &bytes)?;
            seen += 1;
        }
        let expected = slots.len();
        drop(slots);
        if seen != expected {
            return Err(Error::Format(format!("checkpoint holds {seen} of {expected} parameters")));
        }
        let mut bslots = model.buffers_mut();
        for entry in buffers {
            let slot = bslots
                .iter_mut()
                .find(|(n, _)| *n == entry.name)
                .ok_or_else(|| Error::Format(format!("unexpected buffer {}", entry.name)))?;
            fill(slot.1, entry, &bytes)?;
        }
    }
    Ok((model, manifest))
}

fn fill(dst: &mut Tensor, entry: &TensorEntry, bytes: &[u8]) -> Result<()> {
    if dst.shape() != entry.shape.as_slice() {
        return Err(Error::Format(format!(
            "{}: shape {:?} in checkpoint, model expects {:?}",
            entry.name,
            entry.shape,
            dst.shape()
        )));
    }
    let start = entry.offset as usize;
    let end = start + 4 * dst.len();
    let src = bytes
        .get(start..end)
        .ok_or_else(|| Error::Format(format!("{}: byte range {start}..{end} past end of blob", entry.name)))?;
    for (v, chunk) in dst.data_mut().iter_mut().zip(src.chunks_exact(4)) {
        *v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
    }
    Ok(())
}
