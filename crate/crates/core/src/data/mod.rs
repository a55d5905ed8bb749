//! Subject-night records, the RSP1 container, preprocessing and the synthetic
//! generator used as a ground-truth oracle.

mod prep;
mod rsp1;
pub mod synth;

use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub use prep::{crop_to_multiple, normalize_breathing, split_subjects, NORMALIZE_EPS};
pub use rsp1::{read_dir, read_record, record_file_size, write_record, RECORD_EXTENSION};
pub use synth::{synth_generate, GroupResponse, SynthProfile};

pub const STAGE_AWAKE: u8 = 0;
pub const STAGE_REM: u8 = 1;
pub const STAGE_NREM: u8 = 2;
pub const STAGE_MISSING: u8 = 255;
/// Number of labelled sleep-stage classes.
pub const STAGE_CLASSES: usize = 3;

/// One subject-night.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub subject_id: String,
    pub dataset_id: String,
    pub fb: u32,
    pub fo: u32,
    pub duration_s: u32,
    pub breathing: Vec<f32>,
    /// Oxygen saturation in percentage points.
    pub spo2: Vec<f32>,
    pub stages: Vec<u8>,
    pub gender: u8,
    pub vars: BTreeMap<String, i64>,
}

impl Record {
    pub fn validate(&self) -> Result<()> {
        if self.fb == 0 || self.fo == 0 || !self.fb.is_multiple_of(self.fo) {
            return Err(Error::InvalidRecord(format!(
                "sampling rates fb={} fo={} must be positive with fo | fb",
                self.fb, self.fo
            )));
        }
        if self.duration_s == 0 {
            return Err(Error::InvalidRecord("zero duration".into()));
        }
        let nb = (self.fb * self.duration_s) as usize;
        let no = (self.fo * self.duration_s) as usize;
        if self.breathing.len() != nb || self.spo2.len() != no || self.stages.len() != no {
            return Err(Error::InvalidRecord(format!(
                "lengths breathing={} spo2={} stages={} do not match {} s at {}/{} Hz",
                self.breathing.len(),
                self.spo2.len(),
                self.stages.len(),
                self.duration_s,
                self.fb,
                self.fo
            )));
        }
        if let Some(i) = self.breathing.iter().position(|x| !x.is_finite()) {
            return Err(Error::InvalidRecord(format!("non-finite breathing sample at {i}")));
        }
        for (t, &v) in self.spo2.iter().enumerate() {
            if !(0.0..=100.0).contains(&v) {
                return Err(Error::Spo2Range { t, value: v });
            }
        }
        if let Some(t) = self
            .stages
            .iter()
            .position(|&s| s as usize >= STAGE_CLASSES && s != STAGE_MISSING)
        {
            return Err(Error::InvalidRecord(format!(
                "stage {} at t={t} not in {{0,1,2,255}}",
                self.stages[t]
            )));
        }
        if self.gender > 1 {
            return Err(Error::InvalidRecord(format!("gender {} not in {{0,1}}", self.gender)));
        }
        Ok(())
    }

    /// Breathing samples per oxygen sample.
    pub fn ratio(&self) -> usize {
        (self.fb / self.fo) as usize
    }

    /// Value of a categorical side variable: `gender` or any key of `vars`.
    pub fn accessible(&self, name: &str) -> Option<i64> {
        match name {
            "gender" => Some(self.gender as i64),
            _ => self.vars.get(name).copied(),
        }
    }

    /// Stage labels as class indices; missing seconds are `None`.
    pub fn stage_labels(&self) -> Vec<Option<usize>> {
        self.stages
            .iter()
            .map(|&s| (s != STAGE_MISSING).then_some(s as usize))
            .collect()
    }
}
