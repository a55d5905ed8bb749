//! GBU1 checkpoint container:
//! `"GBU1" | u32 manifest length | JSON manifest | f32 tensor data`, all little-endian.
//!
//! The manifest lists every tensor with its byte offset relative to the start
//! of the data block. Optimizer moments and the gate map ride along when present,
//! so a checkpoint is enough to resume training or to evaluate a gated model.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::gate::GateMap;
use crate::model::{ModelConfig, ModelParams, ParamSet};
use crate::numerics::Tensor;
use crate::train::{AdamState, TrainState};

pub const MAGIC: &[u8; 4] = b"GBU1";
pub const FORMAT: &str = "GBU1";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub byte_offset: usize,
}

impl TensorEntry {
    fn bytes(&self) -> usize {
        4 * self.shape.iter().product::<usize>()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResumeManifest {
    epoch: usize,
    clip: Option<f64>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    counts: BTreeMap<String, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub tool_version: String,
    pub config: ModelConfig,
    pub config_hash: String,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train_state: Option<ResumeManifest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gate_map: Option<Value>,
}

/// Model parameters plus the optional training and gating state saved with them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub adam: Option<AdamState<f32>>,
    pub epoch: usize,
    pub clip: Option<f64>,
    pub gate_map: Option<GateMap>,
}

impl Checkpoint {
    pub fn from_params(params: ModelParams) -> Self {
        Self { params, adam: None, epoch: 0, clip: None, gate_map: None }
    }

    pub fn from_state(state: &TrainState) -> Self {
        Self {
            params: state.params.clone(),
            adam: Some(state.adam.clone()),
            epoch: state.epoch,
            clip: state.clip,
            gate_map: state.gate_map.clone(),
        }
    }

    pub fn with_gate_map(mut self, map: Option<GateMap>) -> Self {
        self.gate_map = map;
        self
    }

    /// Training state to continue from, when the optimizer moments were saved.
    pub fn train_state(&self) -> Option<TrainState> {
        self.adam.as_ref().map(|adam| TrainState {
            params: self.params.clone(),
            adam: adam.clone(),
            epoch: self.epoch,
            clip: self.clip,
            gate_map: self.gate_map.clone(),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let set = &self.params.set;
        let mut tensors = Vec::new();
        let mut data: Vec<&[f32]> = Vec::new();
        let mut offset = 0;
        let mut push = |name: &str, kind, shape: &[usize], values: &'_ [f32]| {
            tensors.push(TensorEntry { name: name.into(), kind, shape: shape.to_vec(), byte_offset: offset });
            offset += 4 * values.len();
        };
        for (name, t) in &set.params {
            push(name, TensorKind::Param, t.shape(), t.data());
            data.push(t.data());
        }
        for (name, t) in &set.buffers {
            push(name, TensorKind::Buffer, t.shape(), t.data());
            data.push(t.data());
        }
        let mut resume = None;
        if let Some(adam) = &self.adam {
            for (kind, moments) in [(TensorKind::AdamM, &adam.m), (TensorKind::AdamV, &adam.v)] {
                for (name, values) in moments {
                    push(name, kind, &[values.len()], values);
                    data.push(values);
                }
            }
            resume = Some(ResumeManifest {
                epoch: self.epoch,
                clip: self.clip,
                lr: adam.lr,
                beta1: adam.beta1,
                beta2: adam.beta2,
                eps: adam.eps,
                step: adam.step,
                counts: adam.counts.clone(),
            });
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            tool_version: TOOL_VERSION.into(),
            config: self.params.config.clone(),
            config_hash: self.params.config.hash(),
            tensors,
            train_state: resume,
            gate_map: self.gate_map.as_ref().map(GateMap::to_json),
        };
        let header = serde_json::to_vec(&manifest)?;
        let header_len = u32::try_from(header.len())
            .map_err(|_| Error::Checkpoint(format!("manifest of {} bytes too large", header.len())))?;
        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&header_len.to_le_bytes());
        out.extend_from_slice(&header);
        for chunk in data {
            for v in chunk {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let (manifest, body) = split(bytes, path)?;
        let expected: usize = manifest.tensors.iter().map(TensorEntry::bytes).sum();
        if body.len() != expected {
            return Err(if body.len() < expected {
                Error::Truncated { path: path.into(), expected: bytes.len() - body.len() + expected, found: bytes.len() }
            } else {
                Error::LengthInconsistency {
                    path: path.into(),
                    detail: format!("{} trailing bytes after tensor data", body.len() - expected),
                }
            });
        }
        if manifest.config.hash() != manifest.config_hash {
            return Err(Error::HashMismatch { expected: manifest.config_hash.clone(), found: manifest.config.hash() });
        }
        let mut set = ParamSet::<f32>::default();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        let mut next = 0;
        for e in &manifest.tensors {
            if e.byte_offset != next {
                return Err(Error::LengthInconsistency {
                    path: path.into(),
                    detail: format!("tensor {} at offset {}, expected {next}", e.name, e.byte_offset),
                });
            }
            next += e.bytes();
            let values: Vec<f32> = body[e.byte_offset..next]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let dup = match e.kind {
                TensorKind::Param => set.params.insert(e.name.clone(), Tensor::new(e.shape.clone(), values)?).is_some(),
                TensorKind::Buffer => set.buffers.insert(e.name.clone(), Tensor::new(e.shape.clone(), values)?).is_some(),
                TensorKind::AdamM => m.insert(e.name.clone(), values).is_some(),
                TensorKind::AdamV => v.insert(e.name.clone(), values).is_some(),
            };
            if dup {
                return Err(Error::Checkpoint(format!("duplicate tensor {} ({:?})", e.name, e.kind)));
            }
        }
        let params = ModelParams { config: manifest.config.clone(), set };
        params.check_inventory()?;
        let (adam, epoch, clip) = match &manifest.train_state {
            Some(r) => {
                if m.keys().ne(v.keys()) || m.keys().ne(r.counts.keys()) {
                    return Err(Error::Checkpoint("optimizer moments and counters disagree".into()));
                }
                let adam = AdamState { lr: r.lr, beta1: r.beta1, beta2: r.beta2, eps: r.eps, step: r.step, m, v, counts: r.counts.clone() };
                (Some(adam), r.epoch, r.clip)
            }
            None if m.is_empty() && v.is_empty() => (None, 0, None),
            None => return Err(Error::Checkpoint("optimizer moments without training state".into())),
        };
        let gate_map = manifest.gate_map.as_ref().map(GateMap::from_json).transpose()?;
        Ok(Self { params, adam, epoch, clip, gate_map })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path)?, path)
    }
}

fn split<'a>(bytes: &'a [u8], path: &Path) -> Result<(Manifest, &'a [u8])> {
    if bytes.len() < 8 {
        return Err(Error::Truncated { path: PathBuf::from(path), expected: 8, found: bytes.len() });
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: FORMAT.into(),
            found: String::from_utf8_lossy(&bytes[..4]).into_owned(),
        });
    }
    let len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    if bytes.len() < 8 + len {
        return Err(Error::Truncated { path: path.into(), expected: 8 + len, found: bytes.len() });
    }
    let manifest: Manifest = serde_json::from_slice(&bytes[8..8 + len])
        .map_err(|e| Error::Checkpoint(format!("{}: bad manifest: {e}", path.display())))?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("{}: format {:?}", path.display(), manifest.format)));
    }
    Ok((manifest, &bytes[8 + len..]))
}

/// Reads only the manifest of a checkpoint file.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    Ok(split(&bytes, path)?.0)
}

/// Short content identifier: the first 16 hex digits of the SHA-256 of the file bytes.
pub fn checkpoint_id(bytes: &[u8]) -> String {
    hex::encode(&Sha256::digest(bytes)[..8])
}
