//! Model checkpoint format.
//!
//! Layout:
//! ```text
//! "ATNC"        magic, 4 bytes
//! u16           format version (1), little-endian
//! u32           header length in bytes, little-endian
//! header        UTF-8 JSON: config, creation seed, manifest
//! blob          concatenated tensor-file blocks, one per manifest entry
//! ```
//! Manifest offsets are relative to the blob start; every entry is a complete
//! tensor-file block, so each parameter carries its own checksum.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::vit::{LayerParams, LinearHead, ViTConfig, ViTParams, DENSE_CLASSES};

use super::{atomic_write, tensor_from_bytes, tensor_to_bytes, ByteReader, PersistError};

pub const MAGIC: [u8; 4] = *b"ATNC";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u16,
    creation_seed: u64,
    config: ViTConfig,
    manifest: Vec<ManifestEntry>,
}

/// A loaded checkpoint: config, parameters, and the seed they were created
/// from.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ViTConfig,
    pub params: ViTParams,
    pub creation_seed: u64,
}

pub fn write_checkpoint(
    path: impl AsRef<Path>,
    config: &ViTConfig,
    params: &ViTParams,
    creation_seed: u64,
) -> Result<(), PersistError> {
    let mut blob = Vec::new();
    let mut manifest = Vec::new();
    for (name, tensor) in params.named_tensors() {
        let block = tensor_to_bytes(tensor)?;
        manifest.push(ManifestEntry {
            name,
            shape: tensor.shape().to_vec(),
            offset: blob.len() as u64,
            length: block.len() as u64,
        });
        blob.extend_from_slice(&block);
    }
    let header = Header {
        format_version: VERSION,
        creation_seed,
        config: config.clone(),
        manifest,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| PersistError::HeaderInvalid(e.to_string()))?;

    let mut out = Vec::with_capacity(4 + 2 + 4 + header_json.len() + blob.len());
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&blob);
    atomic_write(path.as_ref(), &out)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, PersistError> {
    let bytes = std::fs::read(path)?;
    let mut r = ByteReader::new(&bytes);
    let found: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if found != MAGIC {
        return Err(PersistError::BadMagic {
            expected: MAGIC,
            found,
        });
    }
    let version = r.u16_le()?;
    if version != VERSION {
        return Err(PersistError::UnsupportedVersion(version));
    }
    let header_len = r.u32_le()? as usize;
    let header_bytes = r.take(header_len)?;
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| PersistError::HeaderInvalid(e.to_string()))?;
    header
        .config
        .validate()
        .map_err(|e| PersistError::ConfigMismatch(e.to_string()))?;

    let blob_len = r.remaining();
    let blob = r.take(blob_len)?;
    let mut tensors: BTreeMap<String, Tensor> = BTreeMap::new();
    for entry in &header.manifest {
        if tensors.contains_key(&entry.name) {
            return Err(PersistError::ManifestMismatch(format!(
                "parameter `{}` listed twice",
                entry.name
            )));
        }
        let start = entry.offset as usize;
        let end = start + entry.length as usize;
        if end > blob.len() {
            return Err(PersistError::Truncated {
                needed: end,
                got: blob.len(),
            });
        }
        let tensor = tensor_from_bytes(&blob[start..end])?;
        if tensor.shape() != entry.shape.as_slice() {
            return Err(PersistError::ManifestMismatch(format!(
                "parameter `{}`: manifest shape {:?} but payload shape {:?}",
                entry.name,
                entry.shape,
                tensor.shape()
            )));
        }
        tensors.insert(entry.name.clone(), tensor);
    }

    let params = assemble_params(&header.config, &mut tensors)?;
    if let Some(extra) = tensors.keys().next() {
        return Err(PersistError::ManifestMismatch(format!(
            "unexpected parameter `{extra}` in manifest"
        )));
    }
    Ok(Checkpoint {
        config: header.config,
        params,
        creation_seed: header.creation_seed,
    })
}

fn take_tensor(
    tensors: &mut BTreeMap<String, Tensor>,
    name: &str,
    shape: &[usize],
) -> Result<Tensor, PersistError> {
    let tensor = tensors.remove(name).ok_or_else(|| {
        PersistError::ManifestMismatch(format!("missing parameter `{name}`"))
    })?;
    if tensor.shape() != shape {
        return Err(PersistError::ManifestMismatch(format!(
            "parameter `{name}`: expected shape {shape:?} for this config, found {:?}",
            tensor.shape()
        )));
    }
    Ok(tensor)
}

fn assemble_params(
    cfg: &ViTConfig,
    tensors: &mut BTreeMap<String, Tensor>,
) -> Result<ViTParams, PersistError> {
    let d = cfg.embed_dim;
    let hidden = d * cfg.mlp_ratio;
    let patch_weight = take_tensor(tensors, "patch_embed.weight", &[cfg.patch_dim(), d])?;
    let patch_bias = take_tensor(tensors, "patch_embed.bias", &[d])?;
    let pos_embed = take_tensor(tensors, "pos_embed", &[cfg.num_tokens(), d])?;
    let cls_token = take_tensor(tensors, "cls_token", &[d])?;

    let mut layers = Vec::with_capacity(cfg.num_layers);
    for i in 0..cfg.num_layers {
        layers.push(LayerParams {
            ln1_gain: take_tensor(tensors, &format!("layers.{i}.ln1.gain"), &[d])?,
            ln1_bias: take_tensor(tensors, &format!("layers.{i}.ln1.bias"), &[d])?,
            wq: take_tensor(tensors, &format!("layers.{i}.attn_q.weight"), &[d, d])?,
            bq: take_tensor(tensors, &format!("layers.{i}.attn_q.bias"), &[d])?,
            wk: take_tensor(tensors, &format!("layers.{i}.attn_k.weight"), &[d, d])?,
            bk: take_tensor(tensors, &format!("layers.{i}.attn_k.bias"), &[d])?,
            wv: take_tensor(tensors, &format!("layers.{i}.attn_v.weight"), &[d, d])?,
            bv: take_tensor(tensors, &format!("layers.{i}.attn_v.bias"), &[d])?,
            wo: take_tensor(tensors, &format!("layers.{i}.attn_out.weight"), &[d, d])?,
            bo: take_tensor(tensors, &format!("layers.{i}.attn_out.bias"), &[d])?,
            ln2_gain: take_tensor(tensors, &format!("layers.{i}.ln2.gain"), &[d])?,
            ln2_bias: take_tensor(tensors, &format!("layers.{i}.ln2.bias"), &[d])?,
            mlp_w1: take_tensor(tensors, &format!("layers.{i}.mlp_fc1.weight"), &[d, hidden])?,
            mlp_b1: take_tensor(tensors, &format!("layers.{i}.mlp_fc1.bias"), &[hidden])?,
            mlp_w2: take_tensor(tensors, &format!("layers.{i}.mlp_fc2.weight"), &[hidden, d])?,
            mlp_b2: take_tensor(tensors, &format!("layers.{i}.mlp_fc2.bias"), &[d])?,
        });
    }

    let final_gain = take_tensor(tensors, "final_ln.gain", &[d])?;
    let final_bias = take_tensor(tensors, "final_ln.bias", &[d])?;

    let classifier = match cfg.num_classes {
        Some(classes) => Some(LinearHead {
            weight: take_tensor(tensors, "classifier.weight", &[d, classes])?,
            bias: take_tensor(tensors, "classifier.bias", &[classes])?,
        }),
        None => None,
    };
    let dense = if tensors.contains_key("dense.weight") {
        Some(LinearHead {
            weight: take_tensor(tensors, "dense.weight", &[d, DENSE_CLASSES])?,
            bias: take_tensor(tensors, "dense.bias", &[DENSE_CLASSES])?,
        })
    } else {
        None
    };

    Ok(ViTParams {
        patch_weight,
        patch_bias,
        pos_embed,
        cls_token,
        layers,
        final_gain,
        final_bias,
        classifier,
        dense,
    })
}

/// Distinct parameter groups in a manifest: entry names with the trailing
/// `.weight` / `.bias` / `.gain` component stripped.
pub fn manifest_groups(manifest: &[ManifestEntry]) -> Vec<String> {
    let mut groups: Vec<String> = manifest
        .iter()
        .map(|e| {
            e.name
                .rsplit_once('.')
                .filter(|(_, part)| matches!(*part, "weight" | "bias" | "gain"))
                .map(|(group, _)| group.to_string())
                .unwrap_or_else(|| e.name.clone())
        })
        .collect();
    groups.dedup();
    groups
}

/// Header manifest of a checkpoint file, without assembling the parameters.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>, PersistError> {
    let bytes = std::fs::read(path)?;
    let mut r = ByteReader::new(&bytes);
    let found: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
    if found != MAGIC {
        return Err(PersistError::BadMagic {
            expected: MAGIC,
            found,
        });
    }
    let version = r.u16_le()?;
    if version != VERSION {
        return Err(PersistError::UnsupportedVersion(version));
    }
    let header_len = r.u32_le()? as usize;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| PersistError::HeaderInvalid(e.to_string()))?;
    Ok(header.manifest)
}
