//! Checkpoints: a JSON manifest (config, segments, epoch, metrics, parameter
//! table) beside a flat little-endian f64 blob.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use netseg_core::labels::Segment;
use serde::{Deserialize, Serialize};

use crate::network::{layout, Network, NetworkConfig, Param};
use crate::predictor::SegmentationModel;
use crate::NeuralError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in f64 values from the start of the blob.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: NetworkConfig,
    pub segments: Vec<Segment>,
    pub epoch: usize,
    pub metrics: BTreeMap<String, f64>,
    pub blob: String,
    pub params: Vec<ParamEntry>,
}

fn blob_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

/// Writes `<path>` (manifest, conventionally `.json`) and `<path>.bin`.
pub fn save_checkpoint(
    path: &Path,
    model: &SegmentationModel,
    epoch: usize,
    metrics: BTreeMap<String, f64>,
) -> Result<Checkpoint, NeuralError> {
    let mut offset = 0;
    let mut entries = Vec::with_capacity(model.network.params.len());
    let mut bytes = Vec::with_capacity(model.network.parameter_count() * 8);
    for p in &model.network.params {
        entries.push(ParamEntry { name: p.spec.name.clone(), shape: p.spec.shape.clone(), offset });
        offset += p.data.len();
        for v in &p.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let blob = blob_path(path);
    let ck = Checkpoint {
        format_version: FORMAT_VERSION,
        config: model.network.config.clone(),
        segments: model.segments.clone(),
        epoch,
        metrics,
        blob: blob.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string(),
        params: entries,
    };
    fs::write(&blob, bytes)?;
    fs::write(path, serde_json::to_string_pretty(&ck)? + "\n")?;
    Ok(ck)
}

pub fn load_checkpoint(path: &Path) -> Result<(SegmentationModel, Checkpoint), NeuralError> {
    let ck: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
    if ck.format_version != FORMAT_VERSION {
        return Err(NeuralError::Checkpoint(format!("unsupported format version {}", ck.format_version)));
    }
    let (specs, _) = layout(&ck.config)?;
    if specs.len() != ck.params.len() {
        return Err(NeuralError::Checkpoint(format!(
            "manifest lists {} tensors, configuration needs {}",
            ck.params.len(),
            specs.len()
        )));
    }
    let dir = path.parent().unwrap_or(Path::new("."));
    let bytes = fs::read(dir.join(&ck.blob))?;
    let total: usize = specs.iter().map(|s| s.len()).sum();
    if bytes.len() != total * 8 {
        return Err(NeuralError::Checkpoint(format!("blob holds {} bytes, expected {}", bytes.len(), total * 8)));
    }
    let mut params = Vec::with_capacity(specs.len());
    for (spec, entry) in specs.into_iter().zip(&ck.params) {
        if spec.name != entry.name || spec.shape != entry.shape {
            return Err(NeuralError::Checkpoint(format!(
                "tensor {} {:?} does not match layout {} {:?}",
                entry.name, entry.shape, spec.name, spec.shape
            )));
        }
        let end = entry.offset + spec.len();
        if end > total {
            return Err(NeuralError::Checkpoint(format!("tensor {} runs past the blob", entry.name)));
        }
        let data = bytes[entry.offset * 8..end * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        params.push(Param { spec, data });
    }
    if ck.segments.len() != ck.config.out_segments {
        return Err(NeuralError::Checkpoint("segment list does not match output channels".into()));
    }
    let model =
        SegmentationModel { network: Network { config: ck.config.clone(), params }, segments: ck.segments.clone() };
    Ok((model, ck))
}
