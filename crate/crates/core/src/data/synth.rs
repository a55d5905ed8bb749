//! Seeded generator of breathing/SpO2 nights with a known ground-truth mapping.
//!
//! Breathing is an amplitude-modulated sinusoid whose rate and depth depend on
//! the sleep stage. SpO2 is a saturating response to a trailing moving average
//! of the amplitude envelope, shifted and scaled per (gender, stage) group.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Record, STAGE_CLASSES};
use crate::error::{Error, Result};

/// Response parameters for one group. `None` matches any value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupResponse {
    #[serde(default)]
    pub gender: Option<u8>,
    #[serde(default)]
    pub stage: Option<u8>,
    /// Additive shift in percentage points.
    #[serde(default)]
    pub offset: f64,
    /// Multiplier on the envelope response.
    #[serde(default = "one")]
    pub slope: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthProfile {
    pub seed: u64,
    pub nights: usize,
    pub nights_per_subject: usize,
    pub night_s: u32,
    pub fb: u32,
    pub fo: u32,
    pub dataset_id: String,
    /// Per-night base breathing rate, breaths per minute, drawn uniformly.
    pub breathing_rate_bpm: [f64; 2],
    /// Rate multiplier per stage (awake, REM, non-REM).
    pub stage_rate_factor: [f64; 3],
    /// Depth multiplier per stage.
    pub stage_amplitude_factor: [f64; 3],
    /// Relative per-second rate jitter, scaled per stage.
    pub rate_jitter: f64,
    pub stage_irregularity: [f64; 3],
    /// Time constant and stationary std-dev of the log-envelope process.
    pub envelope_tau_s: f64,
    pub envelope_sigma: f64,
    pub noise: f64,
    /// Width of the trailing window feeding the SpO2 response.
    pub lag_s: u32,
    pub base_spo2: f64,
    pub response_gain: f64,
    pub response_sharpness: f64,
    pub spo2_noise: f64,
    pub groups: Vec<GroupResponse>,
    /// Stages the chain may visit.
    pub stages: Vec<u8>,
    /// Uniform dwell-time range in seconds.
    pub dwell_s: [u32; 2],
}

impl Default for SynthProfile {
    fn default() -> Self {
        Self {
            seed: 0,
            nights: 20,
            nights_per_subject: 1,
            night_s: 960,
            fb: 10,
            fo: 1,
            dataset_id: "synth".into(),
            breathing_rate_bpm: [12.0, 18.0],
            stage_rate_factor: [1.25, 1.1, 0.9],
            stage_amplitude_factor: [1.1, 0.9, 1.0],
            rate_jitter: 0.04,
            stage_irregularity: [1.5, 2.5, 0.5],
            envelope_tau_s: 60.0,
            envelope_sigma: 0.2,
            noise: 0.1,
            lag_s: 30,
            base_spo2: 95.0,
            response_gain: 1.5,
            response_sharpness: 2.0,
            spo2_noise: 0.0,
            groups: vec![
                GroupResponse { gender: Some(0), stage: None, offset: 2.0, slope: 1.0 },
                GroupResponse { gender: Some(1), stage: None, offset: -2.0, slope: 1.0 },
            ],
            stages: vec![0, 1, 2],
            dwell_s: [60, 180],
        }
    }
}

impl SynthProfile {
    /// Short hash of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("plain data");
        hex::encode(&Sha256::digest(&json)[..8])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth profile: {m}")));
        if self.nights == 0 || self.nights_per_subject == 0 {
            return bad("nights and nights_per_subject must be positive");
        }
        if self.night_s == 0 || self.fb == 0 || self.fo == 0 || !self.fb.is_multiple_of(self.fo) {
            return bad("night length and rates must be positive with fo | fb");
        }
        let [lo, hi] = self.breathing_rate_bpm;
        if !(lo > 0.0 && hi >= lo) {
            return bad("breathing rate range must be positive and ordered");
        }
        if self.stage_rate_factor.iter().chain(&self.stage_amplitude_factor).any(|&f| f <= 0.0) {
            return bad("stage factors must be positive");
        }
        if self.envelope_tau_s <= 0.0 || self.envelope_sigma < 0.0 || self.noise < 0.0 {
            return bad("envelope and noise parameters out of range");
        }
        if self.stages.is_empty() || self.stages.iter().any(|&s| s as usize >= STAGE_CLASSES) {
            return bad("stages must be a non-empty subset of {0,1,2}");
        }
        if self.dwell_s[0] == 0 || self.dwell_s[1] < self.dwell_s[0] {
            return bad("dwell range must be positive and ordered");
        }
        if self.lag_s == 0 {
            return bad("lag must be positive");
        }
        Ok(())
    }

    /// `(offset, slope)` of the first group matching `(gender, stage)`; identity if none.
    pub fn response(&self, gender: u8, stage: u8) -> (f64, f64) {
        self.groups
            .iter()
            .find(|g| g.gender.is_none_or(|x| x == gender) && g.stage.is_none_or(|x| x == stage))
            .map_or((0.0, 1.0), |g| (g.offset, g.slope))
    }

    /// Ground-truth SpO2 for a given trailing envelope mean, before noise and clamping.
    pub fn spo2_for(&self, envelope_mean: f64, gender: u8, stage: u8) -> f64 {
        let (offset, slope) = self.response(gender, stage);
        let r = (self.response_sharpness * (envelope_mean - 1.0)).tanh();
        self.base_spo2 + offset + slope * self.response_gain * r
    }

    pub fn subject_id(&self, night: usize) -> String {
        format!("{}-s{:04}", self.dataset_id, night / self.nights_per_subject)
    }

    pub fn gender(&self, night: usize) -> u8 {
        ((night / self.nights_per_subject) % 2) as u8
    }

    fn night_seed(&self, night: usize) -> u64 {
        self.seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((night as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03))
    }

    /// Generates a single night; independent of every other night.
    pub fn generate_night(&self, night: usize) -> Result<Record> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.night_seed(night));
        let t_len = self.night_s as usize;
        let gender = self.gender(night);

        let stages = self.stage_chain(&mut rng, t_len);

        let decay = (-1.0 / self.envelope_tau_s).exp();
        let innov = self.envelope_sigma * (1.0 - decay * decay).sqrt();
        let mut log_env = self.envelope_sigma * normal(&mut rng);
        let mut envelope = Vec::with_capacity(t_len);
        for &s in &stages {
            envelope.push(log_env.exp() * self.stage_amplitude_factor[s as usize]);
            log_env = decay * log_env + innov * normal(&mut rng);
        }

        let [lo, hi] = self.breathing_rate_bpm;
        let base_rate = lo + (hi - lo) * rng.random::<f64>();
        let per_s = self.fb as usize;
        let mut breathing = Vec::with_capacity(t_len * per_s);
        let mut phase = rng.random::<f64>() * std::f64::consts::TAU;
        let mut jitter = 0.0f64;
        for (t, &s) in stages.iter().enumerate() {
            let si = s as usize;
            jitter = 0.8 * jitter + self.rate_jitter * self.stage_irregularity[si] * normal(&mut rng);
            let rate = base_rate * self.stage_rate_factor[si] * (1.0 + jitter).max(0.2);
            let step = std::f64::consts::TAU * rate / 60.0 / self.fb as f64;
            let next_amp = envelope.get(t + 1).copied().unwrap_or(envelope[t]);
            for i in 0..per_s {
                let frac = i as f64 / per_s as f64;
                let amp = envelope[t] + (next_amp - envelope[t]) * frac;
                phase += step;
                breathing.push((amp * phase.sin() + self.noise * normal(&mut rng)) as f32);
            }
        }

        let window = self.lag_s as usize;
        let mut running = 0.0;
        let mut spo2 = Vec::with_capacity(t_len);
        for t in 0..t_len {
            running += envelope[t];
            if t >= window {
                running -= envelope[t - window];
            }
            let mean = running / window.min(t + 1) as f64;
            let noise = if self.spo2_noise > 0.0 { self.spo2_noise * normal(&mut rng) } else { 0.0 };
            let v = self.spo2_for(mean, gender, stages[t]) + noise;
            spo2.push(v.clamp(0.0, 100.0) as f32);
        }

        // oxygen is stored at fo; the chain above runs at 1 Hz
        let fo = self.fo as usize;
        let spo2: Vec<f32> = spo2.iter().flat_map(|&v| std::iter::repeat_n(v, fo)).collect();
        let stages: Vec<u8> = stages.iter().flat_map(|&s| std::iter::repeat_n(s, fo)).collect();
        let record = Record {
            subject_id: self.subject_id(night),
            dataset_id: self.dataset_id.clone(),
            fb: self.fb,
            fo: self.fo,
            duration_s: self.night_s,
            breathing,
            spo2,
            stages,
            gender,
            vars: BTreeMap::from([("night".to_string(), night as i64)]),
        };
        record.validate()?;
        Ok(record)
    }

    fn stage_chain(&self, rng: &mut ChaCha8Rng, t_len: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(t_len);
        let mut current = self.stages[rng.random_range(0..self.stages.len())];
        while out.len() < t_len {
            let dwell = rng.random_range(self.dwell_s[0]..=self.dwell_s[1]) as usize;
            out.extend(std::iter::repeat_n(current, dwell.min(t_len - out.len())));
            if self.stages.len() > 1 {
                let others: Vec<u8> = self.stages.iter().copied().filter(|&s| s != current).collect();
                current = others[rng.random_range(0..others.len())];
            }
        }
        out
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// All nights of a profile, in night order.
pub fn synth_generate(profile: &SynthProfile) -> Result<Vec<Record>> {
    profile.validate()?;
    (0..profile.nights).map(|n| profile.generate_night(n)).collect()
}
