use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SEGMENT_S: usize = 240;
/// Below this variance a series is treated as flat and its correlation as undefined.
pub const ZERO_VARIANCE: f64 = 1e-12;

/// One aligned window of prediction and ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Segment<'a> {
    pub start: usize,
    pub y_hat: &'a [f64],
    pub y: &'a [f64],
}

/// Non-overlapping consecutive windows of `seg_len` seconds; the incomplete tail is dropped.
pub fn segment<'a>(y_hat: &'a [f64], y: &'a [f64], seg_len: usize) -> Result<Vec<Segment<'a>>> {
    if y_hat.len() != y.len() {
        return Err(Error::Length(format!("prediction has {} s, ground truth {} s", y_hat.len(), y.len())));
    }
    if seg_len == 0 {
        return Err(Error::Config("segment length must be positive".into()));
    }
    let segs: Vec<Segment> = y_hat
        .chunks_exact(seg_len)
        .zip(y.chunks_exact(seg_len))
        .enumerate()
        .map(|(i, (a, b))| Segment { start: i * seg_len, y_hat: a, y: b })
        .collect();
    if segs.is_empty() {
        log::warn!("series of {} s is shorter than one {seg_len}-s segment", y.len());
    }
    Ok(segs)
}

/// Correlation, MAE and RMSE of one segment in percentage points.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetrics {
    pub corr: f64,
    /// False when either series is flat; `corr` is then 0 and left out of averages.
    pub corr_defined: bool,
    pub mae: f64,
    pub rmse: f64,
}

pub fn metrics(y_hat: &[f64], y: &[f64]) -> Result<SegmentMetrics> {
    if y_hat.len() != y.len() {
        return Err(Error::Length(format!("{} predictions for {} targets", y_hat.len(), y.len())));
    }
    if y.is_empty() {
        return Err(Error::EmptyInput("metrics of an empty segment".into()));
    }
    let n = y.len() as f64;
    let ma = y_hat.iter().sum::<f64>() / n;
    let mb = y.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb, mut abs, mut sq) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&a, &b) in y_hat.iter().zip(y) {
        let (da, db) = (a - ma, b - mb);
        sab += da * db;
        saa += da * da;
        sbb += db * db;
        abs += (a - b).abs();
        sq += (a - b) * (a - b);
    }
    let corr_defined = saa / n >= ZERO_VARIANCE && sbb / n >= ZERO_VARIANCE;
    let corr = if corr_defined { (sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0) } else { 0.0 };
    Ok(SegmentMetrics { corr, corr_defined, mae: abs / n, rmse: (sq / n).sqrt() })
}

/// Linearly interpolated quantile of sorted data at `p ∈ [0, 1]`
/// (position `(n − 1)·p` between order statistics).
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Five-number summary plus mean.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub n: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

impl Distribution {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("distribution of no values".into()));
        }
        let mut s = values.to_vec();
        s.sort_by(f64::total_cmp);
        Ok(Self {
            n: s.len(),
            min: s[0],
            q1: quantile(&s, 0.25),
            median: quantile(&s, 0.5),
            q3: quantile(&s, 0.75),
            max: s[s.len() - 1],
            mean: s.iter().sum::<f64>() / s.len() as f64,
        })
    }
}
