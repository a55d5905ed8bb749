//! Forward computation of every variant on the autodiff tape.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gate::{gate_lookup, GateMap};
use crate::model::arch::{Architecture, ConvLayer, Decoder};
use crate::model::config::{ModelConfig, DOWNSAMPLE};
use crate::model::params::ParamSet;
use crate::model::variant::{variants, Variant};
use crate::numerics::attention::{multi_head_self_attention, EncoderLayerVars};
use crate::numerics::{BatchNormStats, Graph, Mode, Real, Tensor, Var};

/// A graph under construction together with the parameters it reads.
///
/// Parameters become leaves on first use; batch-norm running statistics
/// computed in train mode are collected in `updates`.
pub struct Session<'p, F: Real> {
    pub graph: Graph<F>,
    set: &'p ParamSet<F>,
    bound: BTreeMap<String, Var>,
    mode: Mode,
    track: bool,
    rng: ChaCha8Rng,
    updates: BTreeMap<String, Tensor<F>>,
}

impl<'p, F: Real> Session<'p, F> {
    pub fn new(set: &'p ParamSet<F>, mode: Mode, seed: u64, track: bool) -> Self {
        Self::with_graph(Graph::new(), set, mode, seed, track)
    }

    pub fn with_graph(graph: Graph<F>, set: &'p ParamSet<F>, mode: Mode, seed: u64, track: bool) -> Self {
        Self {
            graph,
            set,
            bound: BTreeMap::new(),
            mode,
            track,
            rng: ChaCha8Rng::seed_from_u64(seed),
            updates: BTreeMap::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Uses an existing node for parameter `name`.
    pub fn bind(&mut self, name: &str, var: Var) {
        self.bound.insert(name.to_string(), var);
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self
            .set
            .params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))?;
        let v = self.graph.leaf(t.clone(), self.track);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    fn buffer(&self, name: &str) -> Result<&Tensor<F>> {
        self.set
            .buffers
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing buffer {name}")))
    }

    /// Gradient for every parameter in the set; untouched ones get zeros.
    pub fn grads(&self) -> BTreeMap<String, Tensor<F>> {
        self.set
            .params
            .iter()
            .map(|(name, t)| {
                let g = self
                    .bound
                    .get(name)
                    .and_then(|&v| self.graph.grad(v))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                (name.clone(), g)
            })
            .collect()
    }

    pub fn take_updates(&mut self) -> BTreeMap<String, Tensor<F>> {
        std::mem::take(&mut self.updates)
    }

    pub fn into_graph(self) -> Graph<F> {
        self.graph
    }
}

/// Which inaccessible-state series drives the gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateSource {
    /// Labels supplied with the input; missing seconds use the fallback class.
    Truth,
    /// Argmax of the auxiliary logits.
    Predicted,
}

pub struct ForwardInput<'a> {
    /// Normalized breathing, `fb·T` samples.
    pub x: &'a [f64],
    /// Accessible state.
    pub v: usize,
    pub u: Option<&'a [Option<usize>]>,
    pub gate_map: Option<&'a GateMap>,
    /// Defaults to `Truth` in train mode when labels are given, else `Predicted`.
    pub gate_source: Option<GateSource>,
}

pub struct Encoded {
    pub features: Var,
    /// Encoder activations keyed by layer index.
    pub skips: BTreeMap<usize, Var>,
}

pub struct Forward {
    pub y_hat: Var,
    /// `[N, T]`.
    pub per_head: Var,
    pub u_logits: Option<Var>,
    /// One-based head index per output sample when gating is active.
    pub gate: Option<Vec<usize>>,
}

/// Class used for seconds without an inaccessible-state label.
pub fn fallback_class(u_classes: usize) -> usize {
    crate::data::STAGE_NREM.min(u_classes.saturating_sub(1) as u8) as usize
}

/// Lowest-index argmax over rows for each column of `logits[K, T]`.
pub fn argmax_cols<F: Real>(logits: &Tensor<F>) -> Vec<usize> {
    let (k, t) = logits.rows_cols();
    let d = logits.data();
    (0..t)
        .map(|j| {
            let mut best = 0;
            for i in 1..k {
                if d[i * t + j] > d[best * t + j] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// A config resolved to its variant and architecture.
pub struct Model {
    pub config: ModelConfig,
    pub arch: Architecture,
    pub variant: &'static dyn Variant,
}

impl Model {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let variant = variants().get(&config.variant)?;
        let arch = variant.architecture(config)?;
        Ok(Self { config: config.clone(), arch, variant })
    }

    /// Input tensor `[C_in, fb·T]`: breathing plus any accessible-state channel.
    pub fn input<F: Real>(&self, x: &[f64], v: usize) -> Result<Tensor<F>> {
        if x.is_empty() || !x.len().is_multiple_of(DOWNSAMPLE) {
            return Err(Error::Length(format!(
                "input length {} is not a positive multiple of {DOWNSAMPLE}",
                x.len()
            )));
        }
        if v >= self.config.v_states {
            return Err(Error::Contract(format!(
                "accessible state {v} outside 0..{}",
                self.config.v_states
            )));
        }
        let c = self.arch.input_channels;
        let mut data: Vec<F> = x.iter().map(|&a| F::of(a)).collect();
        if c > 1 {
            let n = self.config.v_states;
            let code = if n > 1 { 2.0 * v as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
            for _ in 1..c {
                data.extend(std::iter::repeat_n(F::of(code), x.len()));
            }
        }
        Tensor::new(vec![c, x.len()], data)
    }

    fn block<F: Real>(&self, s: &mut Session<F>, x: Var, l: &ConvLayer) -> Result<Var> {
        let tag = if l.transpose { "deconv" } else { "conv" };
        let w = s.param(&format!("{}.{tag}.weight", l.prefix))?;
        let b = s.param(&format!("{}.{tag}.bias", l.prefix))?;
        let h = if l.transpose {
            s.graph.conv_transpose1d(x, w, b, l.stride, l.padding)?
        } else {
            s.graph.conv1d(x, w, b, l.stride, l.padding)?
        };
        let gamma = s.param(&format!("{}.bn.gamma", l.prefix))?;
        let beta = s.param(&format!("{}.bn.beta", l.prefix))?;
        let (mean_key, var_key) = (format!("{}.bn.running_mean", l.prefix), format!("{}.bn.running_var", l.prefix));
        let running = BatchNormStats {
            mean: s.buffer(&mean_key)?.data().to_vec(),
            var: s.buffer(&var_key)?.data().to_vec(),
        };
        let cfg = &self.config;
        let (h, updated) = s.graph.batch_norm1d(
            h,
            gamma,
            beta,
            &running,
            F::of(cfg.bn_eps),
            F::of(cfg.bn_momentum),
            s.mode,
        )?;
        if let Some(u) = updated {
            s.updates.insert(mean_key, Tensor::vector(u.mean));
            s.updates.insert(var_key, Tensor::vector(u.var));
        }
        let [lo, hi] = cfg.rrelu_bounds;
        s.graph.rrelu(h, F::of(lo), F::of(hi), s.mode, &mut s.rng)
    }

    fn projection<F: Real>(&self, s: &mut Session<F>, x: Var, l: &ConvLayer) -> Result<Var> {
        let w = s.param(&format!("{}.weight", l.prefix))?;
        let b = s.param(&format!("{}.bias", l.prefix))?;
        s.graph.conv1d(x, w, b, 1, 0)
    }

    pub fn encode<F: Real>(&self, s: &mut Session<F>, x: Var) -> Result<Encoded> {
        let len = s.graph.value(x).dims2()?.1;
        if len == 0 || len % DOWNSAMPLE != 0 {
            return Err(Error::Length(format!("input length {len} is not a multiple of {DOWNSAMPLE}")));
        }
        let keep: Vec<usize> = self.arch.heads.iter().flat_map(|d| d.skips.iter().flatten().copied()).collect();
        let mut skips = BTreeMap::new();
        let mut h = x;
        for (i, l) in self.arch.encoder.iter().enumerate() {
            h = self.block(s, h, l)?;
            if keep.contains(&i) {
                skips.insert(i, h);
            }
        }
        if let Some(b) = &self.arch.bottleneck {
            let mut t = s.graph.transpose(h)?;
            if b.project.is_some() {
                let w = s.param("bert.project.weight")?;
                let bias = s.param("bert.project.bias")?;
                t = s.graph.linear(t, w, bias)?;
            }
            let pos = s.param("bert.position")?;
            let mut layers = Vec::with_capacity(b.layers);
            for l in 0..b.layers {
                let p = format!("bert.layer.{l}");
                let mut get = |n: &str| s.param(&format!("{p}.{n}"));
                layers.push(EncoderLayerVars {
                    q_w: get("q.weight")?,
                    q_b: get("q.bias")?,
                    k_w: get("k.weight")?,
                    k_b: get("k.bias")?,
                    v_w: get("v.weight")?,
                    v_b: get("v.bias")?,
                    o_w: get("o.weight")?,
                    o_b: get("o.bias")?,
                    ln1_g: get("ln1.gamma")?,
                    ln1_b: get("ln1.beta")?,
                    ff1_w: get("ff1.weight")?,
                    ff1_b: get("ff1.bias")?,
                    ff2_w: get("ff2.weight")?,
                    ff2_b: get("ff2.bias")?,
                    ln2_g: get("ln2.gamma")?,
                    ln2_b: get("ln2.beta")?,
                });
            }
            let t = multi_head_self_attention(&mut s.graph, t, Some(pos), &layers, b.heads, b.head_dim)?;
            h = s.graph.transpose(t)?;
        }
        Ok(Encoded { features: h, skips })
    }

    fn decode<F: Real>(&self, s: &mut Session<F>, d: &Decoder, enc: &Encoded) -> Result<Var> {
        let mut h = enc.features;
        let attach = |s: &mut Session<F>, h: Var, stage: usize| -> Result<Var> {
            match d.skips[stage] {
                Some(j) => {
                    let skip = *enc
                        .skips
                        .get(&j)
                        .ok_or_else(|| Error::Contract(format!("encoder activation {j} was not kept")))?;
                    s.graph.concat_rows(&[h, skip])
                }
                None => Ok(h),
            }
        };
        for (stage, l) in d.layers.iter().enumerate() {
            h = attach(s, h, stage)?;
            h = self.block(s, h, l)?;
        }
        h = attach(s, h, d.layers.len())?;
        self.projection(s, h, &d.out)
    }

    /// Output of head `head` (one-based) as a vector of `fo·T` samples.
    pub fn decode_head<F: Real>(&self, s: &mut Session<F>, head: usize, enc: &Encoded) -> Result<Var> {
        let n = self.arch.heads.len();
        if head == 0 || head > n {
            return Err(Error::HeadIndex { index: head, n_heads: n });
        }
        let out = self.decode(s, &self.arch.heads[head - 1], enc)?;
        let t = s.graph.value(out).len();
        s.graph.reshape(out, &[t])
    }

    /// Auxiliary logits `[U, fo·T]`.
    pub fn predict_inaccessible<F: Real>(&self, s: &mut Session<F>, enc: &Encoded) -> Result<Var> {
        let aux = self
            .arch
            .aux
            .as_ref()
            .ok_or_else(|| Error::Contract(format!("variant {} has no auxiliary head", self.variant.name())))?;
        self.decode(s, aux, enc)
    }

    pub fn forward<F: Real>(&self, s: &mut Session<F>, input: &ForwardInput) -> Result<Forward> {
        let gated = self.variant.gated();
        if gated && input.gate_map.is_none() {
            return Err(Error::Contract("gated variant needs a gate map".into()));
        }
        let x = self.input::<F>(input.x, input.v)?;
        let x = s.graph.constant(x);
        let enc = self.encode(s, x)?;
        let mut heads = Vec::with_capacity(self.arch.heads.len());
        for h in 1..=self.arch.heads.len() {
            let y = self.decode_head(s, h, &enc)?;
            let t = s.graph.value(y).len();
            heads.push(s.graph.reshape(y, &[1, t])?);
        }
        let per_head = if heads.len() == 1 { heads[0] } else { s.graph.concat_rows(&heads)? };
        let u_logits = match self.arch.aux {
            Some(_) => Some(self.predict_inaccessible(s, &enc)?),
            None => None,
        };
        let t = s.graph.value(per_head).rows_cols().1;
        if let Some(u) = input.u {
            if u.len() != t {
                return Err(Error::Dimension(format!("{} labels for {t} outputs", u.len())));
            }
        }
        if !gated {
            let y_hat = s.graph.reshape(heads[0], &[t])?;
            return Ok(Forward { y_hat, per_head, u_logits, gate: None });
        }
        let map = input.gate_map.expect("checked above");
        if map.n_heads() != self.arch.heads.len() {
            return Err(Error::Contract(format!(
                "gate map routes to {} heads, model has {}",
                map.n_heads(),
                self.arch.heads.len()
            )));
        }
        let source = input.gate_source.unwrap_or(match (s.mode, input.u) {
            (Mode::Train, Some(_)) => GateSource::Truth,
            _ => GateSource::Predicted,
        });
        let states: Vec<usize> = match source {
            GateSource::Truth => {
                let u = input.u.ok_or_else(|| Error::Contract("truth gating needs labels".into()))?;
                let fb = fallback_class(self.config.u_classes);
                u.iter().map(|l| l.unwrap_or(fb)).collect()
            }
            GateSource::Predicted => {
                let logits = u_logits.expect("gated variant has an auxiliary head");
                argmax_cols(s.graph.value(logits))
            }
        };
        let gate = gate_lookup(map, input.v, &states)?;
        let rows: Vec<usize> = gate.iter().map(|&h| h - 1).collect();
        let y_hat = s.graph.select_per_col(per_head, &rows)?;
        Ok(Forward { y_hat, per_head, u_logits, gate: Some(gate) })
    }
}

/// `y_hat[t] = per_head[s[t], t]` with one-based `s`.
pub fn combine_heads<F: Real>(per_head: &Tensor<F>, s: &[usize]) -> Result<Tensor<F>> {
    let (n, t) = per_head.rows_cols();
    if s.len() != t {
        return Err(Error::Dimension(format!("{} gate entries for {t} samples", s.len())));
    }
    let d = per_head.data();
    let mut out = Vec::with_capacity(t);
    for (j, &h) in s.iter().enumerate() {
        if h == 0 || h > n {
            return Err(Error::HeadIndex { index: h, n_heads: n });
        }
        out.push(d[(h - 1) * t + j]);
    }
    Ok(Tensor::vector(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_model;
    use proptest::prelude::*;

    fn tiny(variant: &str) -> ModelConfig {
        ModelConfig { n_gate_heads: 2, ..ModelConfig::tiny().with_variant(variant) }
    }

    fn wave(n: usize) -> Vec<f64> {
        (0..n).map(|i| (i as f64 * 0.37).sin() + 0.1 * (i as f64 * 0.05).cos()).collect()
    }

    #[test]
    fn shape_contract() {
        let cfg = tiny("backbone");
        let p = build_model(&cfg, 1).unwrap();
        let model = Model::new(&cfg).unwrap();
        for t in [24, 48, 240, 2400] {
            let mut s = Session::new(&p.set, Mode::Eval, 0, false);
            let x = model.input::<f32>(&wave(10 * t), 0).unwrap();
            let x = s.graph.constant(x);
            let enc = model.encode(&mut s, x).unwrap();
            assert_eq!(s.graph.shape(enc.features), &[16, t / 24]);
            let y = model.decode_head(&mut s, 1, &enc).unwrap();
            assert_eq!(s.graph.shape(y), &[t]);
        }
    }

    #[test]
    fn skip_lengths_for_48_seconds() {
        let cfg = ModelConfig { variant: "backbone".into(), ..ModelConfig::full() };
        let model = Model::new(&cfg).unwrap();
        let p = build_model(&cfg, 0).unwrap();
        let mut s = Session::new(&p.set, Mode::Eval, 0, false);
        let x = s.graph.constant(model.input::<f32>(&wave(480), 0).unwrap());
        let enc = model.encode(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(enc.features), &[256, 2]);
        let mut lens: Vec<usize> = enc.skips.values().map(|&v| s.graph.shape(v)[1]).collect();
        lens.sort_unstable_by(|a, b| b.cmp(a));
        assert_eq!(lens, vec![48, 24, 12, 6]);
    }

    #[test]
    fn rejects_unaligned_input() {
        let cfg = tiny("backbone");
        let model = Model::new(&cfg).unwrap();
        assert!(matches!(model.input::<f32>(&wave(250), 0), Err(Error::Length(_))));
        assert!(model.input::<f32>(&wave(240), 2).is_err());
    }

    #[test]
    fn varaug_input_has_state_channel() {
        let model = Model::new(&tiny("varaug")).unwrap();
        let x = model.input::<f64>(&wave(240), 1).unwrap();
        assert_eq!(x.shape(), &[2, 240]);
        assert!(x.row(1).iter().all(|&c| c == 1.0));
        assert!(model.input::<f64>(&wave(240), 0).unwrap().row(1).iter().all(|&c| c == -1.0));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        for v in ["backbone", "cnn", "varaug", "gated"] {
            let cfg = tiny(v);
            let p = build_model(&cfg, 5).unwrap();
            let map = GateMap::new(2, 2, 3, vec![1, 2, 1, 2, 1, 2], Default::default()).unwrap();
            let run = || {
                let model = Model::new(&cfg).unwrap();
                let mut s = Session::new(&p.set, Mode::Eval, 9, false);
                let inp = ForwardInput { x: &wave(480), v: 1, u: None, gate_map: Some(&map), gate_source: None };
                let out = model.forward(&mut s, &inp).unwrap();
                (s.graph.value(out.y_hat).clone(), out.gate)
            };
            let (a, ga) = run();
            let (b, gb) = run();
            assert_eq!(a.shape(), &[48]);
            assert_eq!(a, b, "{v}");
            assert_eq!(ga, gb);
            assert_eq!(ga.is_some(), v == "gated");
        }
    }

    #[test]
    fn gated_needs_map_and_matching_heads() {
        let cfg = tiny("gated");
        let p = build_model(&cfg, 0).unwrap();
        let model = Model::new(&cfg).unwrap();
        let mut s = Session::new(&p.set, Mode::Eval, 0, false);
        let x = wave(240);
        let inp = ForwardInput { x: &x, v: 0, u: None, gate_map: None, gate_source: None };
        assert!(matches!(model.forward(&mut s, &inp), Err(Error::Contract(_))));
        let map = GateMap::identity(2, 3).unwrap();
        let inp = ForwardInput { gate_map: Some(&map), ..inp };
        assert!(matches!(model.forward(&mut s, &inp), Err(Error::Contract(_))));
    }

    #[test]
    fn truth_gate_agrees_with_prediction_when_labels_match() {
        let cfg = tiny("gated");
        let p = build_model(&cfg, 2).unwrap();
        let model = Model::new(&cfg).unwrap();
        let map = GateMap::new(2, 2, 3, vec![1, 2, 2, 2, 1, 1], Default::default()).unwrap();
        let x = wave(480);
        let mut s = Session::new(&p.set, Mode::Eval, 0, false);
        let inp = ForwardInput { x: &x, v: 0, u: None, gate_map: Some(&map), gate_source: None };
        let pred = model.forward(&mut s, &inp).unwrap();
        let u_hat = argmax_cols(s.graph.value(pred.u_logits.unwrap()));
        let labels: Vec<Option<usize>> = u_hat.iter().map(|&c| Some(c)).collect();
        let mut s2 = Session::new(&p.set, Mode::Eval, 0, false);
        let inp = ForwardInput { u: Some(&labels), gate_source: Some(GateSource::Truth), ..inp };
        let truth = model.forward(&mut s2, &inp).unwrap();
        assert_eq!(s.graph.value(pred.y_hat), s2.graph.value(truth.y_hat));
        assert_eq!(pred.gate, truth.gate);
    }

    #[test]
    fn identical_heads_identical_outputs() {
        let cfg = tiny("gated");
        let mut p = build_model(&cfg, 3).unwrap();
        let head0: Vec<(String, Tensor<f32>)> = p
            .set
            .params
            .iter()
            .filter(|(k, _)| k.starts_with("head.0."))
            .map(|(k, v)| (k.replacen("head.0.", "head.1.", 1), v.clone()))
            .collect();
        p.set.params.extend(head0);
        let model = Model::new(&cfg).unwrap();
        let mut s = Session::new(&p.set, Mode::Eval, 0, false);
        let x = s.graph.constant(model.input::<f32>(&wave(480), 0).unwrap());
        let enc = model.encode(&mut s, x).unwrap();
        let a = model.decode_head(&mut s, 1, &enc).unwrap();
        let b = model.decode_head(&mut s, 2, &enc).unwrap();
        assert_eq!(s.graph.value(a), s.graph.value(b));
        assert!(matches!(model.decode_head(&mut s, 3, &enc), Err(Error::HeadIndex { index: 3, n_heads: 2 })));
        assert!(matches!(model.decode_head(&mut s, 0, &enc), Err(Error::HeadIndex { .. })));
    }

    #[test]
    fn aux_logit_shape_and_tie_break() {
        let cfg = tiny("varaug");
        let p = build_model(&cfg, 0).unwrap();
        let model = Model::new(&cfg).unwrap();
        let mut s = Session::new(&p.set, Mode::Eval, 0, false);
        let x = s.graph.constant(model.input::<f32>(&wave(480), 1).unwrap());
        let enc = model.encode(&mut s, x).unwrap();
        let l = model.predict_inaccessible(&mut s, &enc).unwrap();
        assert_eq!(s.graph.shape(l), &[3, 48]);
        assert_eq!(argmax_cols(&Tensor::<f32>::zeros(&[3, 4])), vec![0; 4]);
        let t = Tensor::new(vec![3, 2], vec![0.0f32, 1.0, 2.0, 1.0, 2.0, 0.0]).unwrap();
        assert_eq!(argmax_cols(&t), vec![1, 0]);
    }

    #[test]
    fn combine_examples() {
        let ph = Tensor::new(vec![2, 3], vec![1.0f32, 2.0, 3.0, 10.0, 20.0, 30.0]).unwrap();
        assert_eq!(combine_heads(&ph, &[1, 2, 1]).unwrap().data(), &[1.0, 20.0, 3.0]);
        assert!(matches!(combine_heads(&ph, &[1, 3, 1]), Err(Error::HeadIndex { index: 3, n_heads: 2 })));
        assert!(combine_heads(&ph, &[1, 1]).is_err());
        let one = Tensor::new(vec![1, 3], vec![4.0f32, 5.0, 6.0]).unwrap();
        assert_eq!(combine_heads(&one, &[1, 1, 1]).unwrap().data(), one.data());
    }

    proptest! {
        #[test]
        fn combine_equals_one_hot_sum(
            n in 1usize..5,
            vals in proptest::collection::vec(-100.0f64..100.0, 1..30),
            seed in proptest::collection::vec(0usize..100, 1..30),
        ) {
            let t = vals.len().min(seed.len());
            let data: Vec<f64> = (0..n * t).map(|i| vals[i % t] * (1.0 + i as f64)).collect();
            let ph = Tensor::new(vec![n, t], data.clone()).unwrap();
            let s: Vec<usize> = seed[..t].iter().map(|&k| 1 + k % n).collect();
            let got = combine_heads(&ph, &s).unwrap();
            for j in 0..t {
                let mut acc = 0.0;
                for i in 0..n {
                    if s[j] == i + 1 {
                        acc += data[i * t + j];
                    }
                }
                prop_assert_eq!(got.data()[j].to_bits(), acc.to_bits());
            }
        }
    }
}
