//! Checkpoint format: an 8-byte little-endian manifest length, a JSON
//! manifest, then every tensor as little-endian `f64` in manifest order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::RunConfig;
use crate::encoder::Vocab;
use crate::model::{Model, ModelConfig};
use crate::numeric::Tensor;

pub const FORMAT_VERSION: u32 = 1;
const PHASE_A_PREFIX: &str = "phase_a/";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("malformed checkpoint: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the body.
    pub offset: u64,
    /// Byte length in the body.
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: RunConfig,
    pub model: ModelConfig,
    pub vocab: Vec<String>,
    pub tensors: Vec<TensorEntry>,
}

fn entries(model: &Model) -> Vec<(String, &Tensor)> {
    let mut out: Vec<(String, &Tensor)> = model.store.iter().map(|(_, p)| (p.name.clone(), &p.value)).collect();
    for (id, t) in &model.phase_a {
        out.push((format!("{PHASE_A_PREFIX}{}", model.store.get(*id).name), t));
    }
    out
}

pub fn save<W: Write>(model: &Model, config: &RunConfig, mut out: W) -> Result<(), CheckpointError> {
    let tensors = entries(model);
    let mut table = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in &tensors {
        let length = (t.len() * 8) as u64;
        table.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), offset, length });
        offset += length;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed: config.seed,
        config: config.clone(),
        model: model.config.clone(),
        vocab: model.vocab.tokens().to_vec(),
        tensors: table,
    };
    let header = serde_json::to_vec(&manifest).map_err(|e| CheckpointError::Format(e.to_string()))?;
    out.write_all(&(header.len() as u64).to_le_bytes())?;
    out.write_all(&header)?;
    for (_, t) in &tensors {
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest(bytes: &[u8]) -> Result<(Manifest, &[u8]), CheckpointError> {
    if bytes.len() < 8 {
        return Err(CheckpointError::Format("file shorter than its length prefix".into()));
    }
    let n = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let header = bytes.get(8..8 + n).ok_or_else(|| CheckpointError::Format("truncated manifest".into()))?;
    let value: serde_json::Value =
        serde_json::from_slice(header).map_err(|e| CheckpointError::Format(format!("manifest: {e}")))?;
    let found = value.get("format_version").and_then(|v| v.as_u64()).unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(CheckpointError::Version { found, expected: FORMAT_VERSION });
    }
    let manifest: Manifest =
        serde_json::from_value(value).map_err(|e| CheckpointError::Format(format!("manifest: {e}")))?;
    Ok((manifest, &bytes[8 + n..]))
}

pub fn load<R: Read>(mut input: R) -> Result<(Model, RunConfig), CheckpointError> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let (manifest, body) = read_manifest(&bytes)?;
    let mut model = Model::new(manifest.model.clone(), Vocab::from_tokens(manifest.vocab.clone()), manifest.seed)
        .map_err(|e| CheckpointError::Format(e.to_string()))?;
    let mut expected_offset = 0u64;
    let mut phase_a = Vec::new();
    for entry in &manifest.tensors {
        if entry.offset != expected_offset {
            return Err(CheckpointError::Format(format!("tensor {} is out of order", entry.name)));
        }
        let count: usize = entry.shape.iter().product();
        if entry.length != (count * 8) as u64 {
            return Err(CheckpointError::Format(format!("tensor {} length disagrees with its shape", entry.name)));
        }
        let start = entry.offset as usize;
        let raw = body
            .get(start..start + entry.length as usize)
            .ok_or_else(|| CheckpointError::Format(format!("tensor {} runs past the body", entry.name)))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor = Tensor::new(entry.shape.clone(), data).map_err(|e| CheckpointError::Format(e.to_string()))?;
        let (base, is_phase_a) = match entry.name.strip_prefix(PHASE_A_PREFIX) {
            Some(b) => (b, true),
            None => (entry.name.as_str(), false),
        };
        let id = model
            .store
            .lookup(base)
            .ok_or_else(|| CheckpointError::Format(format!("unknown tensor {}", entry.name)))?;
        if is_phase_a {
            if model.store.value(id).shape() != tensor.shape() {
                return Err(CheckpointError::Format(format!("tensor {} has the wrong shape", entry.name)));
            }
            phase_a.push((id, tensor));
        } else {
            model.store.set_value(id, tensor).map_err(|e| CheckpointError::Format(format!("{}: {e}", entry.name)))?;
        }
        expected_offset += entry.length;
    }
    if expected_offset as usize != body.len() {
        return Err(CheckpointError::Format("trailing bytes after the last tensor".into()));
    }
    let stored = manifest.tensors.iter().filter(|e| !e.name.starts_with(PHASE_A_PREFIX)).count();
    if stored != model.store.len() {
        return Err(CheckpointError::Format(format!("{stored} tensors stored, model has {}", model.store.len())));
    }
    model.phase_a = phase_a;
    Ok((model, manifest.config))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{campaign_names, SplitMix64};

    fn model() -> (Model, RunConfig) {
        let cfg = RunConfig { d_model: 6, ff_hidden: 8, lora_rank: 2, ..RunConfig::default() };
        let vocab = Vocab::from_tokens(["[PAD]", "[UNK]", "[CLS]", "[RAT]", "a", "b"].map(String::from).to_vec());
        let mut m = Model::new(cfg.model(campaign_names()), vocab, 3).unwrap();
        let mut rng = SplitMix64::new(1);
        for id in m.store.ids().collect::<Vec<_>>() {
            let shape = m.store.value(id).shape().to_vec();
            m.store.set_value(id, Tensor::uniform(&shape, -3.0, 3.0, &mut rng)).unwrap();
        }
        m.phase_a = m.store.snapshot(&m.joint_params_all());
        (m, cfg)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (m, cfg) = model();
        let mut buf = Vec::new();
        save(&m, &cfg, &mut buf).unwrap();
        let (back, cfg2) = load(buf.as_slice()).unwrap();
        assert_eq!(cfg, cfg2);
        for ((_, a), (_, b)) in m.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
        assert_eq!(m.phase_a, back.phase_a);
        let mut again = Vec::new();
        save(&back, &cfg2, &mut again).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn offsets_are_contiguous() {
        let (m, cfg) = model();
        let mut buf = Vec::new();
        save(&m, &cfg, &mut buf).unwrap();
        let (man, body) = read_manifest(&buf).unwrap();
        let mut next = 0;
        for e in &man.tensors {
            assert_eq!(e.offset, next);
            next += e.length;
        }
        assert_eq!(next as usize, body.len());
    }

    #[test]
    fn version_mismatch_detected() {
        let (m, cfg) = model();
        let mut buf = Vec::new();
        save(&m, &cfg, &mut buf).unwrap();
        let n = u64::from_le_bytes(buf[..8].try_into().unwrap()) as usize;
        let header = String::from_utf8(buf[8..8 + n].to_vec()).unwrap();
        let patched = header.replace("\"format_version\":1", "\"format_version\":2");
        assert_eq!(patched.len(), header.len());
        buf[8..8 + n].copy_from_slice(patched.as_bytes());
        assert!(matches!(load(buf.as_slice()), Err(CheckpointError::Version { found: 2, expected: 1 })));
    }

    #[test]
    fn truncation_detected() {
        let (m, cfg) = model();
        let mut buf = Vec::new();
        save(&m, &cfg, &mut buf).unwrap();
        buf.truncate(buf.len() - 8);
        assert!(matches!(load(buf.as_slice()), Err(CheckpointError::Format(_))));
        assert!(matches!(load(&[1u8, 2][..]), Err(CheckpointError::Format(_))));
    }
}
