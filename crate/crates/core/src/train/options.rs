use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Schedule {
    Constant,
    /// Cosine decay from `lr` to `min_lr` over the run.
    Cosine { min_lr: f64 },
}

/// Optimization settings. Defaults follow the reference protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainOptions {
    pub lr: f64,
    pub epochs: usize,
    /// Nights per optimizer step; only 1 is supported.
    pub batch: usize,
    pub seed: u64,
    /// Overrides the model's loss weights when set.
    pub lambda: Option<f64>,
    pub lambda_u: Option<f64>,
    /// Share of `epochs` spent pretraining the backbone in the gated pipeline.
    pub pretrain_fraction: f64,
    pub schedule: Schedule,
    /// Global gradient-norm cap; off by default.
    pub clip: Option<f64>,
    /// Cap switched on after the first non-finite loss when `clip` is off.
    pub rescue_clip: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            epochs: 500,
            batch: 1,
            seed: 0,
            lambda: None,
            lambda_u: None,
            pretrain_fraction: 0.2,
            schedule: Schedule::Constant,
            clip: None,
            rescue_clip: 10.0,
        }
    }
}

impl TrainOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} invalid", self.lr)));
        }
        if self.batch != 1 {
            return Err(Error::Config(format!("batch size {} unsupported; one night per step", self.batch)));
        }
        if !(0.0..=1.0).contains(&self.pretrain_fraction) {
            return Err(Error::Config("pretrain_fraction must lie in [0, 1]".into()));
        }
        if let Schedule::Cosine { min_lr } = self.schedule {
            if !(0.0..=self.lr).contains(&min_lr) {
                return Err(Error::Config("cosine min_lr must lie in [0, lr]".into()));
            }
        }
        if self.clip.is_some_and(|c| c <= 0.0) || self.rescue_clip <= 0.0 {
            return Err(Error::Config("clip thresholds must be positive".into()));
        }
        for w in [self.lambda, self.lambda_u].into_iter().flatten() {
            if w < 0.0 {
                return Err(Error::Config("loss weights must be non-negative".into()));
            }
        }
        Ok(())
    }

    /// Learning rate for zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Cosine { min_lr } => {
                let span = self.epochs.max(1) as f64;
                let x = (epoch as f64 / span).min(1.0);
                min_lr + 0.5 * (self.lr - min_lr) * (1.0 + (std::f64::consts::PI * x).cos())
            }
        }
    }

    /// Pretraining epochs of the gated pipeline (at least one).
    pub fn pretrain_epochs(&self) -> usize {
        ((self.epochs as f64 * self.pretrain_fraction).round() as usize).clamp(1, self.epochs.max(1))
    }
}
