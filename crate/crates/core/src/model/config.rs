use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Temporal downsampling from breathing samples to bottleneck positions.
pub const DOWNSAMPLE: usize = 240;

/// Architecture and loss hyperparameters. Defaults are the full-scale model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: String,
    /// Breathing sampling rate, Hz.
    pub fb: u32,
    /// Oxygen sampling rate, Hz.
    pub fo: u32,
    pub encoder_channels: Vec<usize>,
    pub encoder_strides: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub decoder_strides: Vec<usize>,
    /// Deconvolution widths and strides of the inaccessible-variable branch.
    pub aux_channels: Vec<usize>,
    pub aux_strides: Vec<usize>,
    pub kernel_size: usize,
    pub bert_layers: usize,
    pub bert_heads: usize,
    pub bert_hidden: usize,
    /// Per-head width; defaults to `bert_hidden / bert_heads` when that divides.
    pub bert_head_dim: Option<usize>,
    pub bert_intermediate: usize,
    pub max_positions: usize,
    pub n_gate_heads: usize,
    /// Initial bias of every regression head's output projection, on the
    /// unit oxygen scale.
    pub output_bias: f64,
    pub lambda: f64,
    pub lambda_u: f64,
    pub rrelu_bounds: [f64; 2],
    pub bn_eps: f64,
    pub bn_momentum: f64,
    pub u_classes: usize,
    pub v_states: usize,
    /// Record field used as the accessible variable.
    pub accessible_var: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// Full-scale configuration: hidden 256, 8 layers, 6 heads, intermediate
    /// 512, 2400 positions, 6 gate heads.
    pub fn full() -> Self {
        Self {
            variant: "gated".into(),
            fb: 10,
            fo: 1,
            encoder_channels: vec![32, 64, 64, 128, 128, 256, 256, 256, 256],
            encoder_strides: vec![5, 2, 1, 2, 2, 2, 3, 1, 1],
            decoder_channels: vec![256, 128, 128, 64, 64, 32, 32],
            decoder_strides: vec![3, 2, 2, 2, 1, 1, 1],
            aux_channels: vec![64, 32, 32],
            aux_strides: vec![3, 2, 4],
            kernel_size: 7,
            bert_layers: 8,
            bert_heads: 6,
            bert_hidden: 256,
            bert_head_dim: Some(43),
            bert_intermediate: 512,
            max_positions: 2400,
            n_gate_heads: 6,
            output_bias: 0.95,
            lambda: 0.2,
            lambda_u: 1.0,
            rrelu_bounds: [1.0 / 8.0, 1.0 / 3.0],
            bn_eps: 1e-5,
            bn_momentum: 0.1,
            u_classes: 3,
            v_states: 2,
            accessible_var: "gender".into(),
        }
    }

    /// Desk-scale profile used by tests and the synthetic benchmarks.
    pub fn tiny() -> Self {
        Self {
            variant: "backbone".into(),
            encoder_channels: vec![8, 8, 8, 8, 16, 16, 16, 16, 16],
            decoder_channels: vec![16, 16, 8, 8, 8, 8, 8],
            aux_channels: vec![8, 8, 8],
            bert_layers: 1,
            bert_heads: 2,
            bert_hidden: 16,
            bert_head_dim: None,
            bert_intermediate: 32,
            max_positions: 512,
            n_gate_heads: 1,
            ..Self::full()
        }
    }

    pub fn with_variant(mut self, variant: &str) -> Self {
        self.variant = variant.into();
        self
    }

    pub fn head_dim(&self) -> Result<usize> {
        match self.bert_head_dim {
            Some(0) => Err(Error::Config("bert_head_dim must be positive".into())),
            Some(d) => Ok(d),
            None if self.bert_heads > 0 && self.bert_hidden.is_multiple_of(self.bert_heads) => {
                Ok(self.bert_hidden / self.bert_heads)
            }
            None => Err(Error::Config(format!(
                "bert_hidden {} not divisible by bert_heads {}; set bert_head_dim",
                self.bert_hidden, self.bert_heads
            ))),
        }
    }

    /// Seconds of signal that map to one bottleneck position.
    pub fn quantum_s(&self) -> u32 {
        DOWNSAMPLE as u32 / self.fb
    }

    pub fn upsample(&self) -> usize {
        self.decoder_strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.fb == 0 || self.fo == 0 || !self.fb.is_multiple_of(self.fo) || !DOWNSAMPLE.is_multiple_of(self.fb as usize) {
            return bad(format!("rates fb={} fo={} unsupported", self.fb, self.fo));
        }
        for (name, ch, st) in [
            ("encoder", &self.encoder_channels, &self.encoder_strides),
            ("decoder", &self.decoder_channels, &self.decoder_strides),
            ("aux", &self.aux_channels, &self.aux_strides),
        ] {
            if ch.is_empty() || ch.len() != st.len() {
                return bad(format!("{name} needs equally many channels and strides"));
            }
            if ch.contains(&0) || st.contains(&0) {
                return bad(format!("{name} channels and strides must be positive"));
            }
        }
        let enc: usize = self.encoder_strides.iter().product();
        if enc != DOWNSAMPLE {
            return bad(format!("encoder stride product {enc} != {DOWNSAMPLE}"));
        }
        let up = DOWNSAMPLE * self.fo as usize / self.fb as usize;
        let dec = self.upsample();
        let aux: usize = self.aux_strides.iter().product();
        if dec != up || aux != up {
            return bad(format!("decoder/aux stride products {dec}/{aux} must equal {up}"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel size {} must be odd", self.kernel_size));
        }
        if self.bert_heads == 0 || self.bert_hidden == 0 || self.bert_intermediate == 0 {
            return bad("attention widths must be positive".into());
        }
        self.head_dim()?;
        if self.max_positions == 0 {
            return bad("max_positions must be positive".into());
        }
        if self.n_gate_heads == 0 {
            return bad("n_gate_heads must be at least 1".into());
        }
        if !self.output_bias.is_finite() {
            return bad("output_bias must be finite".into());
        }
        if !(self.lambda >= 0.0 && self.lambda_u >= 0.0) {
            return bad("loss weights must be non-negative".into());
        }
        let [lo, hi] = self.rrelu_bounds;
        if !(0.0 <= lo && lo <= hi && hi < 1.0) {
            return bad(format!("rrelu bounds [{lo}, {hi}] invalid"));
        }
        if !(self.bn_eps > 0.0 && (0.0..=1.0).contains(&self.bn_momentum)) {
            return bad("batch-norm eps/momentum out of range".into());
        }
        if self.u_classes == 0 || self.v_states == 0 {
            return bad("state spaces must be non-empty".into());
        }
        Ok(())
    }

    /// Stable short hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(&Sha256::digest(&json)[..8])
    }
}
