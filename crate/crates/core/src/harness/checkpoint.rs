//! Single-file checkpoint archive.
//!
//! Layout: 8-byte magic `PSCKPT01`, u64 LE manifest length, 32-byte SHA-256
//! of the manifest, the JSON manifest, then every tensor as little-endian
//! f64 at the offset recorded in the manifest (relative to the data start).
//! Each tensor entry carries its own SHA-256.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::optim::{AdamW, AdamWConfig};
use crate::error::{Error, Result};
use crate::model::{hex_digest, FrozenEncoders, ModelConfig, PartSegModel, PatchEncoder, ToyTextEncoder, Trainable};

const MAGIC: &[u8; 8] = b"PSCKPT01";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    length: u64,
    sha256: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    step: usize,
    config_hash: String,
    model: ModelConfig,
    text_salt: u64,
    frozen_checksum: String,
    optimizer: Option<OptimizerMeta>,
    tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct OptimizerMeta {
    config: AdamWConfig,
    t: u64,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: usize,
    pub config_hash: String,
    pub model: PartSegModel,
    pub optimizer: Option<AdamW>,
}

fn sha_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    hex_digest(h)
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    model: &PartSegModel,
    optimizer: Option<&AdamW>,
    step: usize,
    config_hash: &str,
) -> Result<()> {
    let mut tensors: Vec<(String, ArrayD<f64>)> = vec![
        ("frozen.image.weight".into(), model.frozen.image.weight.clone().into_dyn()),
        ("frozen.image.bias".into(), model.frozen.image.bias.clone().into_dyn()),
    ];
    let mut push = |prefix: &str, p: &Trainable| {
        for (name, t) in p.named() {
            tensors.push((format!("{prefix}{name}"), t.to_owned()));
        }
    };
    push("params.", &model.params);
    if let Some(opt) = optimizer {
        push("adam.m.", &opt.m);
        push("adam.v.", &opt.v);
    }

    let mut data = Vec::new();
    let mut entries = Vec::with_capacity(tensors.len());
    for (name, t) in &tensors {
        let start = data.len();
        for v in t.iter() {
            data.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f64".into(),
            offset: start as u64,
            length: (data.len() - start) as u64,
            sha256: sha_hex(&data[start..]),
        });
    }
    let manifest = Manifest {
        step,
        config_hash: config_hash.to_string(),
        model: model.config,
        text_salt: model.frozen.text.salt,
        frozen_checksum: model.frozen.checksum(),
        optimizer: optimizer.map(|o| OptimizerMeta { config: o.config, t: o.t }),
        tensors: entries,
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut bytes = Vec::with_capacity(8 + 8 + 32 + json.len() + data.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    let mut h = Sha256::new();
    h.update(&json);
    bytes.extend_from_slice(&h.finalize());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&data);
    let path = path.as_ref();
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptArchive(msg.into())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| Error::CheckpointRead { path: path.to_path_buf(), source })?;
    if bytes.len() < 48 || &bytes[..8] != MAGIC {
        return Err(corrupt("missing header"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json_end = 48usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| corrupt("truncated manifest"))?;
    let json = &bytes[48..json_end];
    let mut h = Sha256::new();
    h.update(json);
    if h.finalize().as_slice() != &bytes[16..48] {
        return Err(corrupt("manifest checksum mismatch"));
    }
    let manifest: Manifest = serde_json::from_slice(json).map_err(|e| corrupt(format!("manifest: {e}")))?;
    let data = &bytes[json_end..];

    let mut read = std::collections::HashMap::new();
    for e in &manifest.tensors {
        if e.dtype != "f64" {
            return Err(corrupt(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let (start, len) = (e.offset as usize, e.length as usize);
        let n: usize = e.shape.iter().product();
        if len != n * 8 {
            return Err(corrupt(format!("{}: length does not match shape", e.name)));
        }
        let chunk = start
            .checked_add(len)
            .filter(|&end| end <= data.len())
            .map(|end| &data[start..end])
            .ok_or_else(|| corrupt(format!("{}: truncated data", e.name)))?;
        if sha_hex(chunk) != e.sha256 {
            return Err(corrupt(format!("{}: checksum mismatch", e.name)));
        }
        let values: Vec<f64> =
            chunk.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&e.shape), values).map_err(|err| corrupt(err.to_string()))?;
        read.insert(e.name.clone(), arr);
    }

    let mut take = |name: &str| read.remove(name).ok_or_else(|| corrupt(format!("missing tensor {name}")));
    let spec = manifest.model.image;
    let weight = take("frozen.image.weight")?.into_dimensionality().map_err(|e| corrupt(e.to_string()))?;
    let bias = take("frozen.image.bias")?.into_dimensionality().map_err(|e| corrupt(e.to_string()))?;
    let frozen = FrozenEncoders {
        text: ToyTextEncoder { dim: spec.embed_dim, salt: manifest.text_salt },
        image: PatchEncoder { spec, weight, bias },
    };
    if frozen.checksum() != manifest.frozen_checksum {
        return Err(corrupt("frozen encoder checksum mismatch"));
    }
    let template = Trainable::init(spec.embed_dim, manifest.model.hidden_dim, manifest.model.num_blocks, 0);
    let mut fill = |prefix: &str| -> Result<Trainable> {
        let mut p = template.clone();
        for (name, mut t) in p.named_mut() {
            let src = take(&format!("{prefix}{name}"))?;
            if src.shape() != t.shape() {
                return Err(corrupt(format!("{prefix}{name}: shape {:?} expected {:?}", src.shape(), t.shape())));
            }
            t.assign(&src);
        }
        Ok(p)
    };
    let params = fill("params.")?;
    let optimizer = match &manifest.optimizer {
        Some(meta) => Some(AdamW { config: meta.config, m: fill("adam.m.")?, v: fill("adam.v.")?, t: meta.t }),
        None => None,
    };
    Ok(Checkpoint {
        step: manifest.step,
        config_hash: manifest.config_hash,
        model: PartSegModel::from_parts(manifest.model, frozen, params),
        optimizer,
    })
}

/// Resuming under a different configuration needs `allow_mismatch`; the
/// mismatch is then logged as a warning.
pub fn check_config_hash(checkpoint: &Checkpoint, expected: &str, allow_mismatch: bool) -> Result<()> {
    if checkpoint.config_hash == expected {
        return Ok(());
    }
    if allow_mismatch {
        log::warn!("checkpoint config hash {} differs from current {}; continuing", checkpoint.config_hash, expected);
        return Ok(());
    }
    Err(Error::ConfigHashMismatch { expected: expected.to_string(), found: checkpoint.config_hash.clone() })
}
