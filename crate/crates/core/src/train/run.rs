use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::GateMap;
use crate::model::{build_model, gbu_loss, main_loss, ForwardInput, Model, ModelConfig, ModelParams, ParamSet, Sample, Session};
use crate::numerics::{Mode, Tensor};
use crate::train::adam::{adam_step, clip_grad_norm, AdamState};
use crate::train::options::TrainOptions;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// One-based.
    pub epoch: usize,
    pub phase: String,
    pub loss: f64,
    pub l1: f64,
    pub corr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ce: Option<f64>,
    pub lr: f64,
    pub steps: usize,
    pub skipped: usize,
    pub wall_s: f64,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
}

impl TrainLog {
    pub fn extend(&mut self, other: TrainLog) {
        self.epochs.extend(other.epochs);
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e).expect("plain data"));
            out.push('\n');
        }
        out
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl().as_bytes())?;
        Ok(())
    }
}

/// Everything needed to continue a run bit-identically.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: AdamState<f32>,
    /// Completed epochs.
    pub epoch: usize,
    pub clip: Option<f64>,
    /// Gate map in force, for the gated phase.
    pub gate_map: Option<GateMap>,
}

impl TrainState {
    pub fn new(params: ModelParams, opts: &TrainOptions) -> Self {
        Self { params, adam: AdamState::new(opts.lr), epoch: 0, clip: opts.clip, gate_map: None }
    }
}

/// Scalar loss components of one forward pass.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepLoss {
    pub loss: f64,
    pub l1: f64,
    pub corr: f64,
    pub ce: Option<f64>,
}

pub struct StepResult {
    pub loss: StepLoss,
    pub grads: BTreeMap<String, Tensor<f32>>,
    /// Running statistics produced in train mode.
    pub buffers: BTreeMap<String, Tensor<f32>>,
}

/// Derives independent stream seeds from the run seed.
pub fn seed_mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// The variant's objective and its gradient for one night.
pub fn loss_and_grads(
    model: &Model,
    set: &ParamSet<f32>,
    sample: &Sample,
    gate_map: Option<&GateMap>,
    mode: Mode,
    seed: u64,
) -> Result<StepResult> {
    let cfg = &model.config;
    let mut s = Session::new(set, mode, seed, true);
    let out = model.forward(
        &mut s,
        &ForwardInput { x: &sample.x, v: sample.v, u: Some(&sample.u), gate_map, gate_source: None },
    )?;
    let y = s.graph.constant(Tensor::from_f64(&[sample.spo2.len()], &sample.target())?);
    let terms = match out.u_logits {
        Some(logits) => gbu_loss(&mut s.graph, out.y_hat, logits, y, &sample.u, cfg.lambda, cfg.lambda_u)?,
        None => main_loss(&mut s.graph, out.y_hat, y, cfg.lambda)?,
    };
    let loss = StepLoss {
        loss: s.graph.scalar(terms.total) as f64,
        l1: s.graph.scalar(terms.l1) as f64,
        corr: s.graph.scalar(terms.corr) as f64,
        ce: terms.ce.map(|c| s.graph.scalar(c) as f64),
    };
    if !loss.loss.is_finite() {
        return Ok(StepResult { loss, grads: BTreeMap::new(), buffers: BTreeMap::new() });
    }
    s.graph.backward(terms.total)?;
    let grads = s.grads();
    let buffers = s.take_updates();
    Ok(StepResult { loss, grads, buffers })
}

pub type EpochObserver<'a> = dyn FnMut(&EpochLog, &TrainState) -> Result<()> + 'a;

/// Runs epochs `state.epoch .. until`, one optimizer step per night.
pub fn train_epochs(
    state: &mut TrainState,
    samples: &[Sample],
    gate_map: Option<&GateMap>,
    opts: &TrainOptions,
    until: usize,
    phase: &str,
    observer: &mut EpochObserver,
) -> Result<TrainLog> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset("no training records".into()));
    }
    opts.validate()?;
    let model = Model::new(&state.params.config)?;
    let hash = state.params.config.hash();
    let mut log = TrainLog::default();
    for epoch in state.epoch..until {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed_mix(opts.seed, epoch as u64, 0)));
        state.adam.lr = opts.lr_at(epoch);
        let mut acc = StepLoss::default();
        let mut ce_sum = 0.0;
        let (mut steps, mut skipped) = (0, 0);
        for (pos, &i) in order.iter().enumerate() {
            let sample = &samples[i];
            let seed = seed_mix(opts.seed, epoch as u64, pos as u64 + 1);
            let mut r = loss_and_grads(&model, &state.params.set, sample, gate_map, Mode::Train, seed)?;
            if !r.loss.loss.is_finite() {
                if state.clip.is_none() {
                    log::error!(
                        "non-finite loss at epoch {} on {}; skipping the step and clipping gradients at {} from now on",
                        epoch + 1,
                        sample.subject_id,
                        opts.rescue_clip
                    );
                    state.clip = Some(opts.rescue_clip);
                    skipped += 1;
                    continue;
                }
                return Err(Error::NonFiniteLoss { epoch: epoch + 1, record: sample.subject_id.clone() });
            }
            if let Some(c) = state.clip {
                clip_grad_norm(&mut r.grads, c);
            }
            adam_step(&mut state.params.set.params, &r.grads, &mut state.adam)?;
            state.params.set.buffers.extend(r.buffers);
            acc.loss += r.loss.loss;
            acc.l1 += r.loss.l1;
            acc.corr += r.loss.corr;
            ce_sum += r.loss.ce.unwrap_or(0.0);
            acc.ce = acc.ce.or(r.loss.ce.map(|_| 0.0));
            steps += 1;
        }
        state.epoch = epoch + 1;
        let n = steps.max(1) as f64;
        let entry = EpochLog {
            epoch: epoch + 1,
            phase: phase.to_string(),
            loss: acc.loss / n,
            l1: acc.l1 / n,
            corr: acc.corr / n,
            ce: acc.ce.map(|_| ce_sum / n),
            lr: state.adam.lr,
            steps,
            skipped,
            wall_s: start.elapsed().as_secs_f64(),
            seed: opts.seed,
            config_hash: hash.clone(),
        };
        log::info!(
            "{phase} epoch {}: loss {:.5} l1 {:.5} corr {:.4}{}",
            entry.epoch,
            entry.loss,
            entry.l1,
            entry.corr,
            entry.ce.map(|c| format!(" ce {c:.4}")).unwrap_or_default()
        );
        observer(&entry, state)?;
        log.epochs.push(entry);
    }
    Ok(log)
}

/// Applies the option-level loss-weight overrides to a model config.
pub fn effective_config(config: &ModelConfig, opts: &TrainOptions) -> ModelConfig {
    let mut c = config.clone();
    if let Some(l) = opts.lambda {
        c.lambda = l;
    }
    if let Some(l) = opts.lambda_u {
        c.lambda_u = l;
    }
    c
}

/// Fresh initialization from `opts.seed`, then `opts.epochs` epochs.
pub fn train(
    config: &ModelConfig,
    samples: &[Sample],
    gate_map: Option<&GateMap>,
    opts: &TrainOptions,
) -> Result<(ModelParams, TrainLog)> {
    let (state, log) = train_with(config, samples, gate_map, opts, &mut |_, _| Ok(()))?;
    Ok((state.params, log))
}

pub fn train_with(
    config: &ModelConfig,
    samples: &[Sample],
    gate_map: Option<&GateMap>,
    opts: &TrainOptions,
    observer: &mut EpochObserver,
) -> Result<(TrainState, TrainLog)> {
    opts.validate()?;
    let cfg = effective_config(config, opts);
    let params = build_model(&cfg, opts.seed)?;
    let mut state = TrainState::new(params, opts);
    let phase = cfg.variant.clone();
    let log = train_epochs(&mut state, samples, gate_map, opts, opts.epochs, &phase, observer)?;
    Ok((state, log))
}
