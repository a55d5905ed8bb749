use std::collections::BTreeMap;

use crate::data::{crop_to_multiple, normalize_breathing, Record};
use crate::error::{Error, Result};
use crate::model::config::ModelConfig;

/// A record prepared for the network: cropped, normalized and labelled.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub subject_id: String,
    pub dataset_id: String,
    pub duration_s: u32,
    /// Normalized breathing.
    pub x: Vec<f64>,
    /// Oxygen saturation in percentage points.
    pub spo2: Vec<f64>,
    pub u: Vec<Option<usize>>,
    pub v: usize,
    /// Accessible variables, including `gender`.
    pub vars: BTreeMap<String, i64>,
}

impl Sample {
    pub fn from_record(record: &Record, cfg: &ModelConfig) -> Result<Self> {
        Self::from_record_with(record, cfg, true)
    }

    /// As [`Sample::from_record`]; `normalize = false` keeps the raw breathing amplitude.
    pub fn from_record_with(record: &Record, cfg: &ModelConfig, normalize: bool) -> Result<Self> {
        if record.fb != cfg.fb || record.fo != cfg.fo {
            return Err(Error::Config(format!(
                "{}: record sampled at {}/{} Hz, model expects {}/{} Hz",
                record.subject_id, record.fb, record.fo, cfg.fb, cfg.fo
            )));
        }
        let r = crop_to_multiple(record, cfg.quantum_s())?;
        let raw = r.accessible(&cfg.accessible_var).ok_or_else(|| Error::Unknown {
            kind: "accessible variable",
            name: cfg.accessible_var.clone(),
            known: record_vars(&r).join(", "),
        })?;
        if raw < 0 || raw as usize >= cfg.v_states {
            return Err(Error::Config(format!(
                "{}: {}={raw} outside 0..{}",
                r.subject_id, cfg.accessible_var, cfg.v_states
            )));
        }
        let u = r.stage_labels();
        if let Some((t, &Some(c))) = u.iter().enumerate().find(|(_, l)| l.is_some_and(|c| c >= cfg.u_classes)) {
            return Err(Error::Label { t, label: c, classes: cfg.u_classes });
        }
        let mut vars = r.vars.clone();
        vars.insert("gender".into(), r.gender as i64);
        Ok(Self {
            subject_id: r.subject_id.clone(),
            dataset_id: r.dataset_id.clone(),
            duration_s: r.duration_s,
            x: if normalize { normalize_breathing(&r) } else { r.breathing.iter().map(|&v| v as f64).collect() },
            spo2: r.spo2.iter().map(|&v| v as f64).collect(),
            u,
            v: raw as usize,
            vars,
        })
    }

    /// Oxygen on the unit scale used inside the model.
    pub fn target(&self) -> Vec<f64> {
        self.spo2.iter().map(|v| v / 100.0).collect()
    }
}

fn record_vars(r: &Record) -> Vec<String> {
    std::iter::once("gender".to_string()).chain(r.vars.keys().cloned()).collect()
}

pub fn prepare(records: &[Record], cfg: &ModelConfig) -> Result<Vec<Sample>> {
    prepare_with(records, cfg, true)
}

pub fn prepare_with(records: &[Record], cfg: &ModelConfig, normalize: bool) -> Result<Vec<Sample>> {
    records.iter().map(|r| Sample::from_record_with(r, cfg, normalize)).collect()
}
