use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Record;
use crate::error::{Error, Result};

/// Variance floor below which a night is treated as flat.
pub const NORMALIZE_EPS: f64 = 1e-8;

/// Per-night z-normalization of the breathing series.
pub fn normalize_breathing(record: &Record) -> Vec<f64> {
    let x: Vec<f64> = record.breathing.iter().map(|&v| v as f64).collect();
    if x.is_empty() {
        return x;
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var < NORMALIZE_EPS {
        return vec![0.0; x.len()];
    }
    let inv = 1.0 / var.sqrt();
    x.iter().map(|v| (v - mean) * inv).collect()
}

/// Drops trailing seconds so the duration is a multiple of `quantum_s`.
pub fn crop_to_multiple(record: &Record, quantum_s: u32) -> Result<Record> {
    if quantum_s == 0 {
        return Err(Error::Contract("crop quantum must be positive".into()));
    }
    if record.duration_s < quantum_s {
        return Err(Error::RecordTooShort { duration_s: record.duration_s, quantum_s });
    }
    let keep = record.duration_s / quantum_s * quantum_s;
    let mut out = record.clone();
    out.duration_s = keep;
    out.breathing.truncate((record.fb * keep) as usize);
    out.spo2.truncate((record.fo * keep) as usize);
    out.stages.truncate((record.fo * keep) as usize);
    Ok(out)
}

/// Subject-level split: ids are de-duplicated and sorted, then shuffled by
/// `seed`; the first `round(ratio · n)` (clamped to `1..n`) go to training.
pub fn split_subjects(ids: &[String], ratio: f64, seed: u64) -> Result<(Vec<String>, Vec<String>)> {
    let mut unique: Vec<String> = ids.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    if unique.len() < 2 {
        return Err(Error::Contract(format!(
            "subject split needs at least 2 subjects, got {}",
            unique.len()
        )));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("split ratio {ratio} outside [0, 1]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    unique.shuffle(&mut rng);
    let n = unique.len();
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let test = unique.split_off(n_train);
    Ok((unique, test))
}
