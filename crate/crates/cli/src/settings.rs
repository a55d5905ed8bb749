use std::fmt::Debug;
use std::path::{Path, PathBuf};

use gbunet::config::RunConfig;
use gbunet::data::{read_dir, Record};
use gbunet::model::ModelConfig;
use gbunet::train::effective_config;
use gbunet::{Error, Result};

use crate::{ConfigArg, Split};

pub fn load_config(arg: &ConfigArg) -> Result<RunConfig> {
    match &arg.config {
        Some(p) => {
            log::info!("config {}", p.display());
            RunConfig::load(p)
        }
        None => {
            log::info!("no config given; using defaults");
            Ok(RunConfig::default())
        }
    }
}

/// Replaces `slot` with a command-line value, logging the change.
pub fn set<T: PartialEq + Debug>(name: &str, slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        if *slot != v {
            log::info!("override {name}: {slot:?} -> {v:?}");
        }
        *slot = v;
    }
}

/// Model config as training instantiates it: loss weights and head count applied.
pub fn trained_model_config(cfg: &RunConfig) -> ModelConfig {
    let mut m = effective_config(&cfg.model, &cfg.train);
    if m.variant == "gated" {
        if let Some(n) = cfg.gate.n_heads {
            m.n_gate_heads = n;
        }
    }
    m
}

pub fn data_dir(flag: Option<&Path>, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = flag
        .map(Path::to_path_buf)
        .or_else(|| cfg.data.dir.clone())
        .ok_or_else(|| Error::Config("no data directory: pass --data or set data.dir".into()))?;
    if !dir.is_dir() {
        return Err(Error::Config(format!("data directory {} not found", dir.display())));
    }
    Ok(dir)
}

pub fn load_records(dir: &Path, cfg: &RunConfig, split: Split) -> Result<Vec<Record>> {
    let records: Vec<Record> = read_dir(dir)?.into_iter().map(|(_, r)| r).collect();
    if records.is_empty() {
        return Err(Error::EmptyDataset(format!("no RSP1 records in {}", dir.display())));
    }
    let total = records.len();
    let chosen = match split {
        Split::All => records,
        Split::Train => cfg.split(records)?.0,
        Split::Test => cfg.split(records)?.1,
    };
    if chosen.is_empty() {
        return Err(Error::EmptyDataset(format!(
            "{split:?} split of {} is empty; try --split all",
            dir.display()
        )));
    }
    log::info!("{} of {total} records ({split:?} split)", chosen.len());
    Ok(chosen)
}

/// `26821113` → `26,821,113`.
pub fn grouped(n: usize) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}
