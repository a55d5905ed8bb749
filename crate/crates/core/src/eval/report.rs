use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::metrics::{metrics, segment, Distribution, SegmentMetrics, SEGMENT_S};
use crate::gate::GateMap;
use crate::model::{predict, ModelParams, Prediction, Sample};
use crate::parallel::par_map;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    /// Unweighted mean over all segments.
    #[default]
    Segment,
    /// Mean of per-night segment means.
    Night,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub aggregation: Aggregation,
    pub group_var: Option<String>,
}

/// Averaged metrics; `None` when nothing contributed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub corr: Option<f64>,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
}

#[derive(Default)]
struct Acc {
    corr: f64,
    n_corr: usize,
    mae: f64,
    rmse: f64,
    n: usize,
}

impl Acc {
    fn add(&mut self, m: &SegmentMetrics) {
        if m.corr_defined {
            self.corr += m.corr;
            self.n_corr += 1;
        }
        self.mae += m.mae;
        self.rmse += m.rmse;
        self.n += 1;
    }

    fn add_night(&mut self, m: &Metrics) {
        if let (Some(mae), Some(rmse)) = (m.mae, m.rmse) {
            if let Some(c) = m.corr {
                self.corr += c;
                self.n_corr += 1;
            }
            self.mae += mae;
            self.rmse += rmse;
            self.n += 1;
        }
    }

    fn finish(&self) -> Metrics {
        let avg = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
        Metrics { corr: avg(self.corr, self.n_corr), mae: avg(self.mae, self.n), rmse: avg(self.rmse, self.n) }
    }
}

/// Metrics of one aggregate (a dataset or everything).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Block {
    /// Under the report's chosen aggregation.
    pub corr: Option<f64>,
    pub mae: Option<f64>,
    pub rmse: Option<f64>,
    pub segment_mean: Metrics,
    pub night_mean: Metrics,
    pub nights: usize,
    pub segments: usize,
    /// Flat segments left out of the correlation average.
    pub excluded_segments: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NightReport {
    pub dataset_id: String,
    pub subject_id: String,
    pub duration_s: u32,
    pub segments: usize,
    pub excluded_segments: usize,
    /// Mean over this night's segments.
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub nights: usize,
    pub truth: Distribution,
    pub prediction: Distribution,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub variable: String,
    pub groups: BTreeMap<String, GroupStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tool_version: String,
    pub config_hash: String,
    pub checkpoint_id: Option<String>,
    pub variant: String,
    pub aggregation: Aggregation,
    pub segment_s: usize,
    pub overall: Block,
    pub datasets: BTreeMap<String, Block>,
    pub segment_count: usize,
    pub excluded_segments: usize,
    /// Nights shorter than one segment.
    pub short_nights: usize,
    pub nights: Vec<NightReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub groups: Option<GroupReport>,
}

impl EvalReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json_pretty() + "\n")?;
        Ok(())
    }
}

struct Night<'a> {
    sample: &'a Sample,
    segs: Vec<SegmentMetrics>,
}

impl Night<'_> {
    fn mean(&self) -> Metrics {
        let mut a = Acc::default();
        self.segs.iter().for_each(|m| a.add(m));
        a.finish()
    }

    fn excluded(&self) -> usize {
        self.segs.iter().filter(|m| !m.corr_defined).count()
    }
}

fn block(nights: &[&Night], aggregation: Aggregation) -> Block {
    let mut seg = Acc::default();
    let mut night = Acc::default();
    for n in nights {
        n.segs.iter().for_each(|m| seg.add(m));
        night.add_night(&n.mean());
    }
    let (segment_mean, night_mean) = (seg.finish(), night.finish());
    let chosen = match aggregation {
        Aggregation::Segment => segment_mean,
        Aggregation::Night => night_mean,
    };
    Block {
        corr: chosen.corr,
        mae: chosen.mae,
        rmse: chosen.rmse,
        segment_mean,
        night_mean,
        nights: nights.len(),
        segments: seg.n,
        excluded_segments: nights.iter().map(|n| n.excluded()).sum(),
    }
}

/// Eval-mode predictions for every sample, computed on up to `jobs` threads.
pub fn predict_all(
    params: &ModelParams,
    gate_map: Option<&GateMap>,
    samples: &[Sample],
    jobs: usize,
) -> Result<Vec<Prediction>> {
    par_map(samples, jobs, |s| predict(params, s, gate_map)).into_iter().collect()
}

/// Builds the report from existing predictions (in percentage points).
pub fn report(
    params: &ModelParams,
    samples: &[Sample],
    predictions: &[Prediction],
    opts: &EvalOptions,
    checkpoint_id: Option<String>,
) -> Result<EvalReport> {
    if samples.len() != predictions.len() {
        return Err(Error::Length(format!("{} samples, {} predictions", samples.len(), predictions.len())));
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset("nothing to evaluate".into()));
    }
    let mut nights = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().zip(predictions) {
        let y_hat: Vec<f64> = p.y_hat.iter().map(|&v| v as f64).collect();
        let segs = segment(&y_hat, &s.spo2, SEGMENT_S)?
            .iter()
            .map(|g| metrics(g.y_hat, g.y))
            .collect::<Result<Vec<_>>>()?;
        nights.push(Night { sample: s, segs });
    }
    // a canonical order makes every sum independent of the input order
    nights.sort_by(|a, b| {
        let key = |n: &Night| (n.sample.dataset_id.clone(), n.sample.subject_id.clone(), n.sample.duration_s);
        key(a).cmp(&key(b)).then_with(|| {
            let flat = |n: &Night| n.segs.iter().flat_map(|m| [m.corr, m.mae, m.rmse]).collect::<Vec<_>>();
            let (fa, fb) = (flat(a), flat(b));
            fa.iter().zip(&fb).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(fa.len().cmp(&fb.len()))
        })
    });
    let all: Vec<&Night> = nights.iter().collect();
    let mut by_dataset: BTreeMap<String, Vec<&Night>> = BTreeMap::new();
    for n in &nights {
        by_dataset.entry(n.sample.dataset_id.clone()).or_default().push(n);
    }
    let overall = block(&all, opts.aggregation);
    let groups = match &opts.group_var {
        Some(var) => Some(group_distribution(samples, predictions, var)?),
        None => None,
    };
    Ok(EvalReport {
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_hash: params.config.hash(),
        checkpoint_id,
        variant: params.config.variant.clone(),
        aggregation: opts.aggregation,
        segment_s: SEGMENT_S,
        segment_count: overall.segments,
        excluded_segments: overall.excluded_segments,
        short_nights: nights.iter().filter(|n| n.segs.is_empty()).count(),
        datasets: by_dataset.iter().map(|(k, v)| (k.clone(), block(v, opts.aggregation))).collect(),
        overall,
        nights: nights
            .iter()
            .map(|n| NightReport {
                dataset_id: n.sample.dataset_id.clone(),
                subject_id: n.sample.subject_id.clone(),
                duration_s: n.sample.duration_s,
                segments: n.segs.len(),
                excluded_segments: n.excluded(),
                metrics: n.mean(),
            })
            .collect(),
        groups,
    })
}

/// Predicts every sample and reports segment metrics.
pub fn evaluate(
    params: &ModelParams,
    gate_map: Option<&GateMap>,
    samples: &[Sample],
    opts: &EvalOptions,
    jobs: usize,
) -> Result<EvalReport> {
    let predictions = predict_all(params, gate_map, samples, jobs)?;
    report(params, samples, &predictions, opts, None)
}

/// Per-second oxygen distributions of ground truth and prediction for each
/// value of an accessible variable.
pub fn group_distribution(samples: &[Sample], predictions: &[Prediction], var: &str) -> Result<GroupReport> {
    let mut pooled: BTreeMap<i64, (usize, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (s, p) in samples.iter().zip(predictions) {
        let key = *s.vars.get(var).ok_or_else(|| Error::Unknown {
            kind: "grouping variable",
            name: var.into(),
            known: s.vars.keys().cloned().collect::<Vec<_>>().join(", "),
        })?;
        let e = pooled.entry(key).or_default();
        e.0 += 1;
        e.1.extend(&s.spo2);
        e.2.extend(p.y_hat.iter().map(|&v| v as f64));
    }
    let mut groups = BTreeMap::new();
    for (k, (nights, truth, pred)) in pooled {
        groups.insert(
            k.to_string(),
            GroupStats { nights, truth: Distribution::of(&truth)?, prediction: Distribution::of(&pred)? },
        );
    }
    Ok(GroupReport { variable: var.into(), groups })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthProfile};
    use crate::model::{build_model, prepare, ModelConfig};
    use crate::numerics::Tensor;

    fn pred(y_hat: Vec<f32>) -> Prediction {
        let t = y_hat.len();
        Prediction { per_head: Tensor::new(vec![1, t], y_hat.clone()).unwrap(), y_hat, u_logits: None, gate: None }
    }

    fn sample(id: &str, dataset: &str, spo2: Vec<f64>, gender: i64) -> Sample {
        Sample {
            subject_id: id.into(),
            dataset_id: dataset.into(),
            duration_s: spo2.len() as u32,
            x: vec![],
            u: vec![None; spo2.len()],
            spo2,
            v: gender as usize,
            vars: [("gender".to_string(), gender)].into(),
        }
    }

    fn wave(t: usize, phase: f64) -> Vec<f64> {
        (0..t).map(|i| 95.0 + 2.0 * ((i as f64) / 17.0 + phase).sin()).collect()
    }

    #[test]
    fn aggregates_segments_and_nights() {
        // night a: 2 segments, night b: 1 segment (flat truth) + tail, night c: too short
        let a = sample("a", "d1", wave(480, 0.0), 0);
        let b = sample("b", "d2", vec![95.0; 300], 1);
        let c = sample("c", "d1", wave(100, 0.3), 1);
        let pa = pred(wave(480, 0.4).iter().map(|&v| v as f32).collect());
        let pb = pred(vec![96.0; 300]);
        let pc = pred(vec![95.0; 100]);
        let params = build_model(&ModelConfig::tiny(), 0).unwrap();
        let samples = vec![a.clone(), b.clone(), c];
        let preds = vec![pa.clone(), pb, pc];
        let r = report(&params, &samples, &preds, &EvalOptions::default(), None).unwrap();
        assert_eq!(r.segment_count, 3);
        assert_eq!(r.excluded_segments, 1);
        assert_eq!(r.short_nights, 1);
        assert_eq!(r.datasets["d1"].segments, 2);
        assert_eq!(r.datasets["d2"].segments, 1);
        let yh: Vec<f64> = pa.y_hat.iter().map(|&v| v as f64).collect();
        let m0 = metrics(&yh[..240], &a.spo2[..240]).unwrap();
        let m1 = metrics(&yh[240..], &a.spo2[240..]).unwrap();
        let o = r.overall.segment_mean;
        assert!((o.mae.unwrap() - (m0.mae + m1.mae + 1.0) / 3.0).abs() < 1e-12);
        assert!((o.corr.unwrap() - (m0.corr + m1.corr) / 2.0).abs() < 1e-12);
        let night = r.overall.night_mean;
        assert!((night.mae.unwrap() - ((m0.mae + m1.mae) / 2.0 + 1.0) / 2.0).abs() < 1e-12);
        assert_eq!(r.overall.mae, o.mae);
        assert_eq!(r.datasets["d2"].corr, None);
        for b in std::iter::once(&r.overall).chain(r.datasets.values()) {
            if let (Some(mae), Some(rmse)) = (b.mae, b.rmse) {
                assert!(mae <= rmse);
            }
        }
        let by_night = report(
            &params,
            &samples,
            &preds,
            &EvalOptions { aggregation: Aggregation::Night, ..Default::default() },
            None,
        )
        .unwrap();
        assert_eq!(by_night.overall.mae, night.mae);
    }

    #[test]
    fn order_invariant() {
        let profile = SynthProfile { nights: 5, night_s: 480, ..Default::default() };
        let cfg = ModelConfig::tiny();
        let samples = prepare(&synth_generate(&profile).unwrap(), &cfg).unwrap();
        let params = build_model(&cfg, 2).unwrap();
        let opts = EvalOptions { group_var: Some("gender".into()), ..Default::default() };
        let r1 = evaluate(&params, None, &samples, &opts, 1).unwrap();
        let mut rev = samples.clone();
        rev.reverse();
        rev.swap(0, 2);
        let r2 = evaluate(&params, None, &rev, &opts, 3).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.segment_count, samples.iter().map(|s| s.duration_s as usize / 240).sum::<usize>());
        let json: serde_json::Value = serde_json::from_str(&r1.to_json_pretty()).unwrap();
        let keys: Vec<&String> = json.as_object().unwrap().keys().collect();
        assert_eq!(keys[..3], ["tool_version", "config_hash", "checkpoint_id"]);
        assert!(json["groups"]["groups"].as_object().unwrap().len() <= 2);
    }

    #[test]
    fn groups_pool_seconds() {
        let s = vec![
            sample("a", "d", (1..=50).map(f64::from).collect(), 0),
            sample("b", "d", (51..=100).map(f64::from).collect(), 0),
            sample("c", "d", vec![90.0; 10], 1),
        ];
        let p: Vec<Prediction> = s.iter().map(|s| pred(s.spo2.iter().map(|&v| v as f32 + 1.0).collect())).collect();
        let g = group_distribution(&s, &p, "gender").unwrap();
        let zero = &g.groups["0"];
        assert_eq!((zero.nights, zero.truth.n), (2, 100));
        assert!((zero.truth.median - 50.5).abs() < 1e-12);
        assert!((zero.prediction.q1 - 26.75).abs() < 1e-12);
        assert_eq!(g.groups["1"].truth.max, 90.0);
        assert!(matches!(group_distribution(&s, &p, "age"), Err(Error::Unknown { .. })));
    }

    #[test]
    fn mismatched_inputs_rejected() {
        let params = build_model(&ModelConfig::tiny(), 0).unwrap();
        let s = vec![sample("a", "d", vec![95.0; 240], 0)];
        assert!(report(&params, &s, &[], &EvalOptions::default(), None).is_err());
        assert!(report(&params, &[], &[], &EvalOptions::default(), None).is_err());
        assert!(report(&params, &s, &[pred(vec![95.0; 10])], &EvalOptions::default(), None).is_err());
    }
}
