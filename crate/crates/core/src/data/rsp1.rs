//! RSP1 little-endian record container:
//! `"RSP1" | u32 header length | JSON header | f32 breathing | f32 spo2 | u8 stages`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::Record;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RSP1";
pub const RECORD_EXTENSION: &str = "rsp";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    subject_id: String,
    dataset_id: String,
    fb: u32,
    fo: u32,
    duration_s: u32,
    gender: u8,
    #[serde(default)]
    vars: BTreeMap<String, i64>,
}

/// Exact byte size of an RSP1 file with a header of `header_len` bytes.
pub fn record_file_size(header_len: usize, fb: u32, fo: u32, duration_s: u32) -> usize {
    let nb = (fb * duration_s) as usize;
    let no = (fo * duration_s) as usize;
    8 + header_len + 4 * nb + 4 * no + no
}

pub fn encode_record(record: &Record) -> Result<Vec<u8>> {
    record.validate()?;
    let header = serde_json::to_vec(&Header {
        subject_id: record.subject_id.clone(),
        dataset_id: record.dataset_id.clone(),
        fb: record.fb,
        fo: record.fo,
        duration_s: record.duration_s,
        gender: record.gender,
        vars: record.vars.clone(),
    })?;
    let size = record_file_size(header.len(), record.fb, record.fo, record.duration_s);
    let mut out = Vec::with_capacity(size);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for v in record.breathing.iter().chain(&record.spo2) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&record.stages);
    debug_assert_eq!(out.len(), size);
    Ok(out)
}

pub fn decode_record(bytes: &[u8], path: &Path) -> Result<Record> {
    let truncated = |expected: usize| Error::Truncated {
        path: path.to_path_buf(),
        expected,
        found: bytes.len(),
    };
    if bytes.len() < 4 {
        return Err(truncated(8));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: String::from_utf8_lossy(MAGIC).into(),
            found: String::from_utf8_lossy(&bytes[..4]).into(),
        });
    }
    if bytes.len() < 8 {
        return Err(truncated(8));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + h {
        return Err(truncated(8 + h));
    }
    let header: Header = serde_json::from_slice(&bytes[8..8 + h])?;
    if header.fb == 0 || header.fo == 0 || header.duration_s == 0 {
        return Err(Error::InvalidRecord(format!(
            "{}: header has zero rate or duration",
            path.display()
        )));
    }
    let expected = record_file_size(h, header.fb, header.fo, header.duration_s);
    if bytes.len() < expected {
        return Err(truncated(expected));
    }
    if bytes.len() > expected {
        return Err(Error::LengthInconsistency {
            path: path.to_path_buf(),
            detail: format!("{} trailing bytes beyond the declared payload", bytes.len() - expected),
        });
    }
    let nb = (header.fb * header.duration_s) as usize;
    let no = (header.fo * header.duration_s) as usize;
    let floats = |start: usize, n: usize| -> Vec<f32> {
        bytes[start..start + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    };
    let base = 8 + h;
    let record = Record {
        subject_id: header.subject_id,
        dataset_id: header.dataset_id,
        fb: header.fb,
        fo: header.fo,
        duration_s: header.duration_s,
        breathing: floats(base, nb),
        spo2: floats(base + 4 * nb, no),
        stages: bytes[base + 4 * nb + 4 * no..].to_vec(),
        gender: header.gender,
        vars: header.vars,
    };
    record.validate()?;
    Ok(record)
}

pub fn write_record(record: &Record, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_record(record)?)?;
    Ok(())
}

pub fn read_record(path: impl AsRef<Path>) -> Result<Record> {
    let path = path.as_ref();
    decode_record(&fs::read(path)?, path)
}

/// Reads every `*.rsp` file in `dir`, in file-name order.
pub fn read_dir(dir: impl AsRef<Path>) -> Result<Vec<(PathBuf, Record)>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir.as_ref())?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == RECORD_EXTENSION))
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| read_record(&p).map(|r| (p, r)))
        .collect()
}
