//! Run configuration document tying model, training, gating, data and
//! evaluation settings together. Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{split_subjects, Record};
use crate::error::{Error, Result};
use crate::eval::EvalOptions;
use crate::gate::gate_builders;
use crate::model::ModelConfig;
use crate::train::{GateOptions, TrainOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataOptions {
    /// Directory of RSP1 records; command-line paths take precedence.
    pub dir: Option<PathBuf>,
    /// Share of subjects assigned to training.
    pub split_ratio: f64,
    pub split_seed: u64,
    /// Per-night z-normalization of breathing.
    pub normalize: bool,
}

impl Default for DataOptions {
    fn default() -> Self {
        Self { dir: None, split_ratio: 0.7, split_seed: 0, normalize: true }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainOptions,
    pub gate: GateOptions,
    pub data: DataOptions,
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        gate_builders().get(&self.gate.mode)?;
        if !(0.0..=1.0).contains(&self.data.split_ratio) {
            return Err(Error::Config(format!("split_ratio {} outside [0, 1]", self.data.split_ratio)));
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    /// Short hash of the whole document; the model section has its own hash.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("plain data");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    /// Splits records by subject into (train, test) per the data section.
    pub fn split(&self, records: Vec<Record>) -> Result<(Vec<Record>, Vec<Record>)> {
        let ids: Vec<String> = records.iter().map(|r| r.subject_id.clone()).collect();
        let (train_ids, _) = split_subjects(&ids, self.data.split_ratio, self.data.split_seed)?;
        Ok(records.into_iter().partition(|r| train_ids.contains(&r.subject_id)))
    }
}
