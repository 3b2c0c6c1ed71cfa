//! Single-file model checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset  size  content
//! 0       4     magic "QEF1"
//! 4       8     u64 length N of the metadata block
//! 12      N     UTF-8 JSON metadata (config, vocabulary, scaler, manifest, training info)
//! 12+N    ...   f32 weight blob, tensors back to back in manifest order
//! ```
//!
//! Manifest offsets are byte offsets into the blob. Saving the same model
//! twice yields identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, Pooling};
use crate::error::{Error, Result};
use crate::model::{Architecture, LabelScaler, ModelConfig, QEModel, TrainingMeta};
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

pub const MAGIC: &[u8; 4] = b"QEF1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 12;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Metadata {
    format_version: u32,
    architecture: Architecture,
    pooling: Pooling,
    encoder_config: EncoderConfig,
    label_scaler: LabelScaler,
    training: TrainingMeta,
    manifest: Vec<ManifestEntry>,
    vocabulary: Vocabulary,
}

pub fn to_bytes(model: &QEModel) -> Result<Vec<u8>> {
    let mut manifest = Vec::new();
    let mut offset = 0;
    for ((name, _), t) in model.config.weight_shapes().into_iter().zip(model.tensors()) {
        manifest.push(ManifestEntry { name, shape: t.shape().to_vec(), offset });
        offset += 4 * t.len();
    }
    let meta = Metadata {
        format_version: FORMAT_VERSION,
        architecture: model.config.architecture,
        pooling: model.config.pooling,
        encoder_config: model.config.encoder,
        label_scaler: model.scaler,
        training: model.meta.clone(),
        manifest,
        vocabulary: model.vocab.clone(),
    };
    let json = serde_json::to_vec(&meta)?;
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.tensors() {
        for x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<QEModel> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(Error::Format("missing QEF1 magic".into()));
    }
    let json_len = u64::from_le_bytes(bytes[4..12].try_into().expect("8 bytes")) as usize;
    let json_end = HEADER_LEN
        .checked_add(json_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Format(format!("metadata block of {json_len} bytes overruns the file")))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes[HEADER_LEN..json_end])?;
    // Check the version before the rest so that future layouts fail with a
    // version error rather than a parse error.
    let found = value.get("format_version").and_then(serde_json::Value::as_u64);
    match found {
        Some(v) if v == u64::from(FORMAT_VERSION) => {}
        Some(v) => return Err(Error::Version { found: u32::try_from(v).unwrap_or(u32::MAX), expected: FORMAT_VERSION }),
        None => return Err(Error::Format("metadata has no format_version".into())),
    }
    let meta: Metadata = serde_json::from_value(value)?;
    let config = ModelConfig { architecture: meta.architecture, pooling: meta.pooling, encoder: meta.encoder_config };
    config.encoder.validate()?;
    let expected = config.weight_shapes();
    if meta.manifest.len() != expected.len() {
        return Err(Error::Format(format!(
            "manifest lists {} tensors, config requires {}",
            meta.manifest.len(),
            expected.len()
        )));
    }
    let mut offset = 0;
    for (entry, (name, shape)) in meta.manifest.iter().zip(&expected) {
        if &entry.name != name {
            return Err(Error::Format(format!("manifest has `{}` where `{name}` was expected", entry.name)));
        }
        if &entry.shape != shape {
            return Err(Error::ShapeMismatch { name: name.clone(), expected: shape.clone(), found: entry.shape.clone() });
        }
        if entry.offset != offset {
            return Err(Error::Format(format!("tensor `{name}` at offset {} (expected {offset})", entry.offset)));
        }
        offset += 4 * shape.iter().product::<usize>();
    }
    let blob = &bytes[json_end..];
    if blob.len() < offset {
        return Err(Error::Truncated { expected: offset, found: blob.len() });
    }
    if blob.len() > offset {
        return Err(Error::Format(format!("{} trailing bytes after the weight blob", blob.len() - offset)));
    }
    let tensors = meta
        .manifest
        .iter()
        .map(|e| {
            let n: usize = e.shape.iter().product();
            let data = blob[e.offset..e.offset + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::new(e.shape.clone(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    QEModel::from_parts(config, meta.vocabulary, tensors, meta.label_scaler, meta.training)
}

pub fn save_checkpoint(model: &QEModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<QEModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
