//! Checkpoint container: a JSON header followed by raw little-endian
//! parameter blobs, one per named tensor, plus the per-layer optimizer
//! shard blobs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use grass_core::element::Element;
use grass_core::model::{ModelConfig, TinyTransformer, UnitId};
use grass_core::optimizer::{deserialize_shard, serialize_shard, OptimizerShard};
use grass_core::rng::Rng;

use crate::error::{HarnessError, Result};

const MAGIC: &[u8; 8] = b"GRSSCKP1";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ShardEntry {
    key: String,
    offset: u64,
    bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    precision: String,
    step: u64,
    seed: u64,
    model: ModelConfig,
    tensors: Vec<TensorEntry>,
    shards: Vec<ShardEntry>,
}

pub struct Checkpoint<E: Element> {
    pub model: TinyTransformer<E>,
    pub shards: Vec<OptimizerShard<E>>,
    pub step: u64,
    pub seed: u64,
}

pub fn save_checkpoint<E: Element>(
    path: &Path,
    model: &TinyTransformer<E>,
    shards: &[OptimizerShard<E>],
    step: u64,
    seed: u64,
) -> Result<()> {
    let mut payload: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    for (name, tensor) in model.named_tensors() {
        let offset = payload.len() as u64;
        for &x in tensor.data() {
            x.write_le(&mut payload);
        }
        tensors.push(TensorEntry {
            name,
            shape: tensor.shape().to_vec(),
            offset,
            bytes: (tensor.numel() * E::BYTES) as u64,
        });
    }
    let mut shard_entries = Vec::new();
    for shard in shards {
        let blob = serialize_shard(shard);
        shard_entries.push(ShardEntry {
            key: shard.unit.key(),
            offset: payload.len() as u64,
            bytes: blob.len() as u64,
        });
        payload.extend_from_slice(&blob);
    }
    let header = Header {
        version: 1,
        precision: E::NAME.to_string(),
        step,
        seed,
        model: model.config().clone(),
        tensors,
        shards: shard_entries,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| HarnessError::Report(e.to_string()))?;

    let mut out = Vec::with_capacity(16 + header_json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&payload);
    fs::write(path, out).map_err(|e| HarnessError::io(path.display().to_string(), e))
}

pub fn load_checkpoint<E: Element>(path: &Path) -> Result<Checkpoint<E>> {
    let bytes = fs::read(path).map_err(|e| HarnessError::io(path.display().to_string(), e))?;
    let corrupt = |msg: &str| HarnessError::Report(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(corrupt("not a checkpoint container"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_bytes = bytes
        .get(16..16 + header_len)
        .ok_or_else(|| corrupt("truncated header"))?;
    let header: Header =
        serde_json::from_slice(header_bytes).map_err(|e| corrupt(&e.to_string()))?;
    if header.precision != E::NAME {
        return Err(corrupt(&format!(
            "precision mismatch: file holds {}, caller wants {}",
            header.precision,
            E::NAME
        )));
    }
    let payload = &bytes[16 + header_len..];

    // Materialize the architecture, then overwrite every tensor.
    let mut model = TinyTransformer::<E>::init(header.model.clone(), &mut Rng::new(0))
        .map_err(HarnessError::Core)?;
    for entry in &header.tensors {
        let blob = payload
            .get(entry.offset as usize..(entry.offset + entry.bytes) as usize)
            .ok_or_else(|| corrupt(&format!("tensor {} out of bounds", entry.name)))?;
        if blob.len() % E::BYTES != 0 {
            return Err(corrupt(&format!("tensor {} has ragged bytes", entry.name)));
        }
        let data: Vec<E> = blob
            .chunks_exact(E::BYTES)
            .map(|c| E::read_le(c))
            .collect();
        model
            .set_named_tensor(&entry.name, &data)
            .map_err(HarnessError::Core)?;
    }
    let mut shards = Vec::new();
    for entry in &header.shards {
        let blob = payload
            .get(entry.offset as usize..(entry.offset + entry.bytes) as usize)
            .ok_or_else(|| corrupt(&format!("shard {} out of bounds", entry.key)))?;
        shards.push(deserialize_shard::<E>(blob).map_err(HarnessError::Core)?);
    }
    Ok(Checkpoint {
        model,
        shards,
        step: header.step,
        seed: header.seed,
    })
}

/// Byte-exact digest of the model parameters, for whole-run equality
/// checks between training configurations.
pub fn param_fingerprint<E: Element>(model: &TinyTransformer<E>) -> Vec<u8> {
    let mut out = Vec::new();
    for (_, tensor) in model.named_tensors() {
        for &x in tensor.data() {
            x.write_le(&mut out);
        }
    }
    out
}

/// Like `param_fingerprint` but for a single unit.
pub fn unit_fingerprint<E: Element>(model: &TinyTransformer<E>, unit: UnitId) -> Vec<u8> {
    let mut out = Vec::new();
    for x in model.unit_params_flat(unit) {
        x.write_le(&mut out);
    }
    out
}
