//! Layer descriptors and the named parameter inventory derived from a config.

use crate::error::{Error, Result};
use crate::model::config::{ModelConfig, DOWNSAMPLE};

/// One convolution (or transposed convolution) layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayer {
    pub prefix: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub transpose: bool,
}

impl ConvLayer {
    fn conv(prefix: String, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        Self { prefix, c_in, c_out, kernel, stride, padding: (kernel - 1) / 2, transpose: false }
    }

    /// Transposed convolution whose output length is exactly `stride × input`.
    fn deconv(prefix: String, c_in: usize, c_out: usize, kernel: usize, stride: usize) -> Self {
        let mut k = kernel.max(stride);
        if (k - stride) % 2 == 1 {
            k += 1;
        }
        Self { prefix, c_in, c_out, kernel: k, stride, padding: (k - stride) / 2, transpose: true }
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        if self.transpose {
            vec![self.c_in, self.c_out, self.kernel]
        } else {
            vec![self.c_out, self.c_in, self.kernel]
        }
    }

    pub fn fan_in(&self) -> usize {
        if self.transpose {
            self.c_out * self.kernel
        } else {
            self.c_in * self.kernel
        }
    }
}

/// A stack of upsampling layers ending in a 1×1 projection.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub prefix: String,
    pub layers: Vec<ConvLayer>,
    /// `skips[i]` names the encoder layer concatenated onto the input of stage
    /// `i`; stage `layers.len()` is the output projection.
    pub skips: Vec<Option<usize>>,
    pub out: ConvLayer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bottleneck {
    /// Linear map from encoder channels to the hidden width when they differ.
    pub project: Option<usize>,
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub hidden: usize,
    pub intermediate: usize,
    pub max_positions: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Architecture {
    pub input_channels: usize,
    pub output_bias: f64,
    pub encoder: Vec<ConvLayer>,
    pub bottleneck: Option<Bottleneck>,
    pub heads: Vec<Decoder>,
    pub aux: Option<Decoder>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Uniform on ±1/√fan_in.
    FanIn(usize),
    Normal(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Options shared by the concrete variants.
pub struct Blueprint {
    pub extra_inputs: usize,
    pub heads: usize,
    pub aux: bool,
    pub attention: bool,
    pub skips: bool,
}

pub fn build(cfg: &ModelConfig, bp: &Blueprint) -> Result<Architecture> {
    cfg.validate()?;
    let k = cfg.kernel_size;
    let mut channels = cfg.encoder_channels.clone();
    let mut strides = cfg.encoder_strides.clone();
    if !bp.attention {
        // the attention stack is replaced by dropping the last stride-1 layer
        let Some(i) = strides.iter().rposition(|&s| s == 1) else {
            return Err(Error::Config("convolution-only variant needs a stride-1 encoder layer".into()));
        };
        channels.remove(i);
        strides.remove(i);
    }
    let mut encoder = Vec::with_capacity(channels.len());
    let mut c = 1 + bp.extra_inputs;
    for (i, (&co, &s)) in channels.iter().zip(&strides).enumerate() {
        encoder.push(ConvLayer::conv(format!("encoder.{i}"), c, co, k, s));
        c = co;
    }
    let bottleneck = bp.attention.then(|| -> Result<Bottleneck> {
        Ok(Bottleneck {
            project: (c != cfg.bert_hidden).then_some(c),
            layers: cfg.bert_layers,
            heads: cfg.bert_heads,
            head_dim: cfg.head_dim()?,
            hidden: cfg.bert_hidden,
            intermediate: cfg.bert_intermediate,
            max_positions: cfg.max_positions,
        })
    });
    let bottleneck = bottleneck.transpose()?;
    let features = bottleneck.as_ref().map_or(c, |b| b.hidden);

    let skip_plan = if bp.skips {
        plan_skips(&strides, &cfg.decoder_strides)
    } else {
        vec![None; cfg.decoder_strides.len() + 1]
    };
    let skip_width = |stage: usize| skip_plan[stage].map_or(0, |j| channels[j]);
    let mut heads = Vec::with_capacity(bp.heads);
    for h in 0..bp.heads {
        let prefix = format!("head.{h}");
        let mut layers = Vec::new();
        let mut c = features;
        for (d, (&co, &s)) in cfg.decoder_channels.iter().zip(&cfg.decoder_strides).enumerate() {
            layers.push(ConvLayer::deconv(format!("{prefix}.layer.{d}"), c + skip_width(d), co, k, s));
            c = co;
        }
        let last = layers.len();
        let out = ConvLayer::conv(format!("{prefix}.out"), c + skip_width(last), 1, 1, 1);
        heads.push(Decoder { prefix, layers, skips: skip_plan.clone(), out });
    }
    let aux = bp.aux.then(|| {
        let mut layers = Vec::new();
        let mut c = features;
        for (d, (&co, &s)) in cfg.aux_channels.iter().zip(&cfg.aux_strides).enumerate() {
            layers.push(ConvLayer::deconv(format!("aux.layer.{d}"), c, co, k, s));
            c = co;
        }
        let n = layers.len();
        Decoder {
            prefix: "aux".into(),
            layers,
            skips: vec![None; n + 1],
            out: ConvLayer::conv("aux.out".into(), c, cfg.u_classes, 1, 1),
        }
    });
    Ok(Architecture {
        input_channels: 1 + bp.extra_inputs,
        output_bias: cfg.output_bias,
        encoder,
        bottleneck,
        heads,
        aux,
    })
}

/// Pairs decoder stages with encoder layers producing the same temporal
/// length. Each scale is used once: by the first stage that reaches it, fed
/// from the deepest encoder layer at that scale. The bottleneck scale is
/// excluded.
pub fn plan_skips(enc_strides: &[usize], dec_strides: &[usize]) -> Vec<Option<usize>> {
    let mut enc_scale = Vec::with_capacity(enc_strides.len());
    let mut e = 1;
    for &s in enc_strides {
        e *= s;
        enc_scale.push(e);
    }
    let mut plan = vec![None; dec_strides.len() + 1];
    let mut used = Vec::new();
    let mut up = 1;
    for stage in 0..=dec_strides.len() {
        if stage > 0 {
            up *= dec_strides[stage - 1];
        }
        if up == 1 || !DOWNSAMPLE.is_multiple_of(up) || used.contains(&up) {
            continue;
        }
        let want = DOWNSAMPLE / up;
        if let Some(j) = enc_scale.iter().rposition(|&s| s == want) {
            plan[stage] = Some(j);
            used.push(up);
        }
    }
    plan
}

fn conv_specs(out: &mut Vec<TensorSpec>, l: &ConvLayer, norm: bool) {
    let tag = if l.transpose { "deconv" } else { "conv" };
    let p = &l.prefix;
    let (w, b) = if norm {
        (format!("{p}.{tag}.weight"), format!("{p}.{tag}.bias"))
    } else {
        (format!("{p}.weight"), format!("{p}.bias"))
    };
    out.push(TensorSpec { name: w, shape: l.weight_shape(), init: Init::FanIn(l.fan_in()) });
    out.push(TensorSpec { name: b, shape: vec![l.c_out], init: Init::Zeros });
    if norm {
        out.push(TensorSpec { name: format!("{p}.bn.gamma"), shape: vec![l.c_out], init: Init::Ones });
        out.push(TensorSpec { name: format!("{p}.bn.beta"), shape: vec![l.c_out], init: Init::Zeros });
    }
}

fn dense(out: &mut Vec<TensorSpec>, prefix: &str, n_out: usize, n_in: usize) {
    out.push(TensorSpec { name: format!("{prefix}.weight"), shape: vec![n_out, n_in], init: Init::Normal(0.02) });
    out.push(TensorSpec { name: format!("{prefix}.bias"), shape: vec![n_out], init: Init::Zeros });
}

fn layer_norm(out: &mut Vec<TensorSpec>, prefix: &str, d: usize) {
    out.push(TensorSpec { name: format!("{prefix}.gamma"), shape: vec![d], init: Init::Ones });
    out.push(TensorSpec { name: format!("{prefix}.beta"), shape: vec![d], init: Init::Zeros });
}

impl Architecture {
    /// Trainable tensors in forward order.
    pub fn param_specs(&self) -> Vec<TensorSpec> {
        let mut out = Vec::new();
        for l in &self.encoder {
            conv_specs(&mut out, l, true);
        }
        if let Some(b) = &self.bottleneck {
            if let Some(c) = b.project {
                dense(&mut out, "bert.project", b.hidden, c);
            }
            out.push(TensorSpec {
                name: "bert.position".into(),
                shape: vec![b.max_positions, b.hidden],
                init: Init::Normal(0.02),
            });
            let inner = b.heads * b.head_dim;
            for l in 0..b.layers {
                let p = format!("bert.layer.{l}");
                for q in ["q", "k", "v"] {
                    dense(&mut out, &format!("{p}.{q}"), inner, b.hidden);
                }
                dense(&mut out, &format!("{p}.o"), b.hidden, inner);
                layer_norm(&mut out, &format!("{p}.ln1"), b.hidden);
                dense(&mut out, &format!("{p}.ff1"), b.intermediate, b.hidden);
                dense(&mut out, &format!("{p}.ff2"), b.hidden, b.intermediate);
                layer_norm(&mut out, &format!("{p}.ln2"), b.hidden);
            }
        }
        for d in self.heads.iter().chain(&self.aux) {
            for l in &d.layers {
                conv_specs(&mut out, l, true);
            }
            conv_specs(&mut out, &d.out, false);
            if d.prefix.starts_with("head.") {
                out.last_mut().expect("bias spec").init = Init::Const(self.output_bias);
            }
        }
        out
    }

    /// Batch-norm running statistics.
    pub fn buffer_specs(&self) -> Vec<TensorSpec> {
        let mut out = Vec::new();
        let decoders = self.heads.iter().chain(&self.aux).flat_map(|d| &d.layers);
        for l in self.encoder.iter().chain(decoders) {
            let p = &l.prefix;
            out.push(TensorSpec { name: format!("{p}.bn.running_mean"), shape: vec![l.c_out], init: Init::Zeros });
            out.push(TensorSpec { name: format!("{p}.bn.running_var"), shape: vec![l.c_out], init: Init::Ones });
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_specs().iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_skip_plan_matches_scales() {
        let cfg = ModelConfig::full();
        let plan = plan_skips(&cfg.encoder_strides, &cfg.decoder_strides);
        // decoder stages 1..4 sit at 1/8, 1/4, 1/2 and full output resolution
        assert_eq!(plan, vec![None, Some(5), Some(4), Some(3), Some(2), None, None, None]);
    }

    #[test]
    fn skip_plan_by_brute_force() {
        // every chosen pair has matching lengths for a concrete input
        let enc = [2, 3, 1, 2, 2, 5, 2];
        let dec = [2, 1, 5, 2];
        let plan = plan_skips(&enc, &dec);
        let n = 240 * 7;
        let mut len = n;
        let enc_len: Vec<usize> = enc.iter().map(|s| { len /= s; len }).collect();
        let mut up = 1;
        for (stage, p) in plan.iter().enumerate() {
            if stage > 0 {
                up *= dec[stage - 1];
            }
            if let Some(j) = p {
                assert_eq!(enc_len[*j], n / 240 * up);
            }
        }
        assert_eq!(plan.iter().flatten().count(), 3);
    }

    #[test]
    fn deconv_geometry_yields_exact_upsampling() {
        for k in [1, 3, 5, 7] {
            for s in 1..6 {
                let l = ConvLayer::deconv("d".into(), 1, 1, k, s);
                for len in 1..5 {
                    assert_eq!((len - 1) * s + l.kernel - 2 * l.padding, len * s, "k={k} s={s}");
                }
            }
        }
    }

    #[test]
    fn cnn_blueprint_drops_a_layer_and_skips() {
        let cfg = ModelConfig::tiny();
        let bp = Blueprint { extra_inputs: 0, heads: 1, aux: false, attention: false, skips: false };
        let a = build(&cfg, &bp).unwrap();
        assert_eq!(a.encoder.len(), 8);
        assert!(a.bottleneck.is_none());
        assert!(a.heads[0].skips.iter().all(Option::is_none));
        assert_eq!(a.heads[0].layers.len(), 7);
    }

    #[test]
    fn spec_names_are_unique() {
        let cfg = ModelConfig::tiny();
        let bp = Blueprint { extra_inputs: 1, heads: 3, aux: true, attention: true, skips: true };
        let a = build(&cfg, &bp).unwrap();
        let mut names: Vec<_> = a.param_specs().into_iter().map(|s| s.name).collect();
        names.extend(a.buffer_specs().into_iter().map(|s| s.name));
        let n = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), n);
    }
}
