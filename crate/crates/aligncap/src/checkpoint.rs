//! Checkpoints: a JSON manifest (config snapshot + per-buffer metadata and
//! SHA-256) next to a flat little-endian f64 payload.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainingConfig;
use crate::error::{Error, Result};
use crate::model::AlignCapModel;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the payload file.
    pub offset: usize,
    pub sha256: String,
    pub trainable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: TrainingConfig,
    /// Payload file name, relative to the manifest's directory.
    pub payload: String,
    pub entries: Vec<ManifestEntry>,
}

fn sha_hex(data: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in data {
        h.update(v.to_le_bytes());
    }
    format!("{:x}", h.finalize())
}

pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const PAYLOAD_FILE: &str = "checkpoint.bin";

/// Writes `checkpoint.json` + `checkpoint.bin` into `dir` and returns the
/// manifest path. Every parameter is recorded, frozen ones included, so a
/// load rebuilds the model bit for bit.
pub fn save_checkpoint(model: &AlignCapModel, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    model.for_each(&mut |p| {
        entries.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.tensor.shape.clone(),
            dtype: "f64".into(),
            offset: payload.len(),
            sha256: sha_hex(&p.tensor.data),
            trainable: p.trainable,
        });
        for v in &p.tensor.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    });
    let manifest = Manifest {
        config: model.config.clone(),
        payload: PAYLOAD_FILE.into(),
        entries,
    };
    std::fs::write(dir.join(PAYLOAD_FILE), &payload)?;
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(path)
}

/// Rebuilds the model from the manifest's config snapshot, overwrites every
/// parameter from the payload, and verifies shapes and digests.
pub fn load_checkpoint(manifest_path: &Path) -> Result<AlignCapModel> {
    let text = std::fs::read_to_string(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: manifest_path.display().to_string(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let payload_path = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.payload);
    let payload = std::fs::read(&payload_path)?;

    let mut model = AlignCapModel::new(&manifest.config)?;
    let mut by_name = std::collections::HashMap::new();
    for e in &manifest.entries {
        if e.dtype != "f64" {
            return Err(Error::Incompatible(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        if by_name.insert(e.name.as_str(), e).is_some() {
            return Err(Error::Incompatible(format!("duplicate manifest entry {}", e.name)));
        }
    }

    let mut missing = Vec::new();
    let mut failure: Option<Error> = None;
    model.for_each_mut(&mut |p| {
        if failure.is_some() {
            return;
        }
        let Some(entry) = by_name.remove(p.name.as_str()) else {
            missing.push(p.name.clone());
            return;
        };
        if entry.shape != p.tensor.shape {
            failure = Some(Error::Incompatible(format!(
                "{}: checkpoint shape {:?} vs model shape {:?}",
                p.name, entry.shape, p.tensor.shape
            )));
            return;
        }
        let n = p.tensor.data.len();
        let end = entry.offset + 8 * n;
        if end > payload.len() {
            failure = Some(Error::Incompatible(format!(
                "{}: payload ends at {} but entry needs {end} bytes",
                p.name,
                payload.len()
            )));
            return;
        }
        for (i, chunk) in payload[entry.offset..end].chunks_exact(8).enumerate() {
            p.tensor.data[i] = f64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
        }
        if sha_hex(&p.tensor.data) != entry.sha256 {
            failure = Some(Error::Incompatible(format!("{}: payload digest mismatch", p.name)));
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if !missing.is_empty() {
        return Err(Error::Incompatible(format!(
            "checkpoint lacks parameters: {}",
            missing.join(", ")
        )));
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Incompatible(format!("checkpoint has unknown parameter {extra}")));
    }
    Ok(model)
}
