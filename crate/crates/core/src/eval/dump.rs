use std::fmt::Write as _;
use std::path::Path;

use crate::data::STAGE_MISSING;
use crate::error::{Error, Result};
use crate::gate::GateMap;
use crate::model::{predict, ModelParams, Prediction, Sample};

pub const DUMP_HEADER: &str = "t\ty_true\ty_hat_raw\ty_hat_rounded\tstage\tgate_status";

/// Nearest integer with halves rounded up.
pub fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

/// Per-second TSV rows. A `#` line carrying tool version and config hash
/// precedes the header; `gate_status` is the selected head or `-` without a gate.
pub fn format_dump(sample: &Sample, prediction: &Prediction, config_hash: &str) -> Result<String> {
    let t = sample.spo2.len();
    if prediction.y_hat.len() != t {
        return Err(Error::Length(format!("{} predictions for {t} s", prediction.y_hat.len())));
    }
    let mut out = String::with_capacity(48 * (t + 2));
    let _ = writeln!(
        out,
        "# gbunet {} config_hash={config_hash} subject={} dataset={}",
        env!("CARGO_PKG_VERSION"),
        sample.subject_id,
        sample.dataset_id
    );
    out.push_str(DUMP_HEADER);
    out.push('\n');
    for i in 0..t {
        let raw = prediction.y_hat[i];
        let stage = sample.u[i].map_or(STAGE_MISSING as usize, |u| u);
        let gate = prediction.gate.as_ref().map_or("-".to_string(), |g| g[i].to_string());
        let _ = writeln!(
            out,
            "{i}\t{}\t{raw}\t{}\t{stage}\t{gate}",
            sample.spo2[i] as f32,
            round_half_up(raw as f64)
        );
    }
    Ok(out)
}

pub fn write_dump(sample: &Sample, prediction: &Prediction, config_hash: &str, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, format_dump(sample, prediction, config_hash)?)?;
    Ok(())
}

/// Predicts one sample and writes its dump.
pub fn dump_predictions(
    params: &ModelParams,
    gate_map: Option<&GateMap>,
    sample: &Sample,
    path: impl AsRef<Path>,
) -> Result<Prediction> {
    let p = predict(params, sample, gate_map)?;
    write_dump(sample, &p, &params.config.hash(), path)?;
    Ok(p)
}

/// File name for the `index`-th night: safe characters only.
pub fn dump_name(index: usize, sample: &Sample) -> String {
    let clean: String = format!("{}_{}", sample.dataset_id, sample.subject_id)
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect();
    format!("{index:04}_{clean}.tsv")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthProfile};
    use crate::eval::{evaluate, EvalOptions, SEGMENT_S};
    use crate::model::{build_model, prepare, ModelConfig};

    #[test]
    fn rounding_goes_up_at_half() {
        assert_eq!(round_half_up(94.5), 95);
        assert_eq!(round_half_up(94.49), 94);
        assert_eq!(round_half_up(-0.5), 0);
        assert_eq!(round_half_up(96.0), 96);
    }

    #[test]
    fn dump_reproduces_night_mae() {
        let cfg = ModelConfig::tiny().with_variant("gated");
        let cfg = ModelConfig { n_gate_heads: 2, ..cfg };
        let profile = SynthProfile { nights: 2, night_s: 504, ..Default::default() };
        let samples = prepare(&synth_generate(&profile).unwrap(), &cfg).unwrap();
        let params = build_model(&cfg, 4).unwrap();
        let entries = (0..6).map(|i| (crate::gate::state_label(i / 3, i % 3), 1 + i % 2)).collect();
        let map = GateMap::manual(2, 2, 3, &entries).unwrap();
        let report = evaluate(&params, Some(&map), &samples, &EvalOptions::default(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (i, s) in samples.iter().enumerate() {
            let path = dir.path().join(dump_name(i, s));
            dump_predictions(&params, Some(&map), s, &path).unwrap();
            let text = std::fs::read_to_string(&path).unwrap();
            let mut lines = text.lines();
            assert!(lines.next().unwrap().contains(&cfg.hash()));
            assert_eq!(lines.next().unwrap(), DUMP_HEADER);
            let rows: Vec<Vec<&str>> = lines.map(|l| l.split('\t').collect()).collect();
            assert_eq!(rows.len(), s.spo2.len());
            let covered = s.spo2.len() / SEGMENT_S * SEGMENT_S;
            let mae = rows[..covered]
                .iter()
                .map(|r| (r[1].parse::<f64>().unwrap() - r[2].parse::<f32>().unwrap() as f64).abs())
                .sum::<f64>()
                / covered as f64;
            let night = report.nights.iter().find(|n| n.subject_id == s.subject_id).unwrap();
            assert!((mae - night.metrics.mae.unwrap()).abs() < 1e-6);
            assert!(rows.iter().all(|r| r[5] == "1" || r[5] == "2"));
            let raw: f64 = rows[0][2].parse().unwrap();
            assert_eq!(rows[0][3].parse::<i64>().unwrap(), round_half_up(raw));
        }
    }
}
