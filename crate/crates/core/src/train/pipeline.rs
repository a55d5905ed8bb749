use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::{gate_builders, GateMap, GateRequest};
use crate::model::{build_model, ModelConfig, ModelParams, Sample};
use crate::train::options::TrainOptions;
use crate::train::run::{effective_config, train_epochs, EpochObserver, TrainLog, TrainState};

/// How the gate map is obtained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateOptions {
    /// Overrides the model's head count when set.
    pub n_heads: Option<usize>,
    /// Registered builder name: `identity`, `manual` or `grad-sim`.
    pub mode: String,
    pub manual_table: Option<BTreeMap<String, usize>>,
}

impl Default for GateOptions {
    fn default() -> Self {
        Self { n_heads: None, mode: "grad-sim".into(), manual_table: None }
    }
}

pub struct PipelineOutput {
    pub params: ModelParams,
    pub gate_map: GateMap,
    pub log: TrainLog,
    /// Pretrained backbone, absent when resuming inside the gated phase.
    pub backbone: Option<ModelParams>,
    pub state: TrainState,
}

/// Gated model whose shared layers and every head start from a trained
/// backbone; optimizer moments follow the same copy. The auxiliary branch is
/// freshly initialized.
pub fn expand_backbone(backbone: &TrainState, gated: &ModelConfig, seed: u64) -> Result<TrainState> {
    let mut params = build_model(gated, seed)?;
    let mut adam = backbone.adam.clone();
    adam.m.clear();
    adam.v.clear();
    adam.counts.clear();
    let src = &backbone.params.set;
    let copy = |dst: &mut BTreeMap<String, _>, from: &BTreeMap<String, _>, name: &str, source: &str| -> Result<()> {
        let t = from
            .get(source)
            .ok_or_else(|| Error::Contract(format!("backbone lacks {source}")))?;
        dst.insert(name.to_string(), Clone::clone(t));
        Ok(())
    };
    let names: Vec<String> = params.set.params.keys().cloned().collect();
    for name in names {
        if name.starts_with("aux.") {
            continue;
        }
        let source = match name.strip_prefix("head.") {
            Some(rest) => format!("head.0.{}", rest.split_once('.').map_or("", |(_, r)| r)),
            None => name.clone(),
        };
        copy(&mut params.set.params, &src.params, &name, &source)?;
        if let (Some(m), Some(v), Some(&c)) =
            (backbone.adam.m.get(&source), backbone.adam.v.get(&source), backbone.adam.counts.get(&source))
        {
            adam.m.insert(name.clone(), m.clone());
            adam.v.insert(name.clone(), v.clone());
            adam.counts.insert(name.clone(), c);
        }
    }
    let buffers: Vec<String> = params.set.buffers.keys().cloned().collect();
    for name in buffers {
        if name.starts_with("aux.") {
            continue;
        }
        let source = match name.strip_prefix("head.") {
            Some(rest) => format!("head.0.{}", rest.split_once('.').map_or("", |(_, r)| r)),
            None => name.clone(),
        };
        copy(&mut params.set.buffers, &src.buffers, &name, &source)?;
    }
    params.check_inventory()?;
    Ok(TrainState { params, adam, epoch: backbone.epoch, clip: backbone.clip, gate_map: None })
}

/// Pretrain a backbone, derive the gate map from it, then train the gated
/// model with label-driven gating for the remaining epochs.
pub fn train_gated_pipeline(
    config: &ModelConfig,
    samples: &[Sample],
    opts: &TrainOptions,
    gate: &GateOptions,
    jobs: usize,
    observer: &mut EpochObserver,
) -> Result<PipelineOutput> {
    resume_gated_pipeline(None, config, samples, opts, gate, jobs, observer)
}

/// Continues the pipeline from a saved state. A backbone state resumes
/// pretraining; a gated state carrying its map resumes the gated phase.
pub fn resume_gated_pipeline(
    start: Option<TrainState>,
    config: &ModelConfig,
    samples: &[Sample],
    opts: &TrainOptions,
    gate: &GateOptions,
    jobs: usize,
    observer: &mut EpochObserver,
) -> Result<PipelineOutput> {
    opts.validate()?;
    let mut gated_cfg = effective_config(config, opts);
    if let Some(n) = gate.n_heads {
        gated_cfg.n_gate_heads = n;
    }
    if gated_cfg.variant != "gated" {
        return Err(Error::Config(format!("gated pipeline needs variant 'gated', got '{}'", gated_cfg.variant)));
    }
    gated_cfg.validate()?;
    let backbone_cfg = gated_cfg.clone().with_variant("backbone");
    let builder = gate_builders().get(&gate.mode)?;
    let pre = opts.pretrain_epochs();
    let same = |state: &TrainState, cfg: &ModelConfig| -> Result<()> {
        let (expected, found) = (cfg.hash(), state.params.config.hash());
        if expected != found {
            return Err(Error::HashMismatch { expected, found });
        }
        Ok(())
    };

    let mut log = TrainLog::default();
    let mut backbone = None;
    let (mut gated, map) = match start {
        Some(state) if state.gate_map.is_some() => {
            same(&state, &gated_cfg)?;
            let map = state.gate_map.clone().expect("checked");
            (state, map)
        }
        start => {
            let mut state = match start {
                Some(s) => {
                    same(&s, &backbone_cfg)?;
                    s
                }
                None => TrainState::new(build_model(&backbone_cfg, opts.seed)?, opts),
            };
            log = train_epochs(&mut state, samples, None, opts, pre, "pretrain", observer)?;
            let map = builder.build(&GateRequest {
                v_states: gated_cfg.v_states,
                u_states: gated_cfg.u_classes,
                n_heads: gated_cfg.n_gate_heads,
                manual: gate.manual_table.as_ref(),
                backbone: Some(&state.params),
                samples,
                jobs,
            })?;
            log::info!("gate map ({}): {:?}", map.provenance.method, map.table());
            let mut gated = expand_backbone(&state, &gated_cfg, opts.seed)?;
            gated.gate_map = Some(map.clone());
            backbone = Some(state.params);
            (gated, map)
        }
    };
    let rest = train_epochs(&mut gated, samples, Some(&map), opts, opts.epochs.max(pre), "gated", observer)?;
    log.extend(rest);
    Ok(PipelineOutput { params: gated.params.clone(), gate_map: map, log, backbone, state: gated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthProfile};
    use crate::model::{prepare, Model, Session};
    use crate::numerics::Mode;
    use crate::train::run::train_with;

    fn samples() -> Vec<Sample> {
        let profile = SynthProfile { nights: 4, night_s: 96, ..Default::default() };
        prepare(&synth_generate(&profile).unwrap(), &ModelConfig::tiny()).unwrap()
    }

    #[test]
    fn expanded_heads_start_identical() {
        let s = samples();
        let cfg = ModelConfig { n_gate_heads: 3, ..ModelConfig::tiny().with_variant("gated") };
        let opts = TrainOptions { epochs: 2, lr: 1e-3, ..Default::default() };
        let (bb, _) = train_with(&cfg.clone().with_variant("backbone"), &s, None, &opts, &mut |_, _| Ok(())).unwrap();
        let st = expand_backbone(&bb, &cfg, 0).unwrap();
        assert_eq!(st.epoch, 2);
        assert_eq!(st.adam.m["head.2.out.weight"], bb.adam.m["head.0.out.weight"]);
        assert!(!st.adam.m.contains_key("aux.out.weight"));
        let model = Model::new(&cfg).unwrap();
        let mut sess = Session::new(&st.params.set, Mode::Eval, 0, false);
        let x = sess.graph.constant(model.input::<f32>(&s[0].x, 0).unwrap());
        let enc = model.encode(&mut sess, x).unwrap();
        let outs: Vec<_> = (1..=3).map(|h| model.decode_head(&mut sess, h, &enc).unwrap()).collect();
        for o in &outs[1..] {
            assert_eq!(sess.graph.value(*o), sess.graph.value(outs[0]));
        }
    }

    #[test]
    fn single_head_pipeline_continues_the_backbone() {
        let s = samples();
        let cfg = ModelConfig { n_gate_heads: 1, lambda_u: 0.0, ..ModelConfig::tiny().with_variant("gated") };
        let opts = TrainOptions { epochs: 5, lr: 1e-3, pretrain_fraction: 0.4, ..Default::default() };
        let gate = GateOptions { mode: "grad-sim".into(), ..Default::default() };
        let out = train_gated_pipeline(&cfg, &s, &opts, &gate, 1, &mut |_, _| Ok(())).unwrap();
        assert_eq!(out.gate_map.table(), &[1; 6]);
        assert_eq!(out.log.epochs.len(), 5);
        assert_eq!(out.log.epochs[1].phase, "pretrain");
        assert_eq!(out.log.epochs[2].phase, "gated");
        let (plain, _) = train_with(&cfg.clone().with_variant("backbone"), &s, None, &opts, &mut |_, _| Ok(())).unwrap();
        for (name, t) in &plain.params.set.params {
            assert_eq!(&out.params.set.params[name], t, "{name}");
        }
    }

    #[test]
    fn rejects_non_gated_config() {
        let s = samples();
        let opts = TrainOptions { epochs: 1, ..Default::default() };
        let r = train_gated_pipeline(&ModelConfig::tiny(), &s, &opts, &GateOptions::default(), 1, &mut |_, _| Ok(()));
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
