//! The BERT-UNet family: configuration, parameters, forward pass and losses.

mod arch;
mod config;
pub mod loss;
mod network;
mod params;
mod sample;
mod variant;

pub use arch::{plan_skips, Architecture, Blueprint, Bottleneck, ConvLayer, Decoder, Init, TensorSpec};
pub use config::{ModelConfig, DOWNSAMPLE};
pub use loss::{gbu_loss, loss_gbu, loss_main, main_loss, LossTerms, CORR_EPS};
pub use network::{
    argmax_cols, combine_heads, fallback_class, Encoded, Forward, ForwardInput, GateSource, Model, Session,
};
pub use params::{build_model, ModelParams, ParamSet};
pub use sample::{prepare, prepare_with, Sample};
pub use variant::{variants, Backbone, Cnn, Gated, VarAug, Variant};

use crate::error::Result;
use crate::gate::GateMap;
use crate::numerics::{Mode, Tensor};

/// Eval-mode outputs in percentage points.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub y_hat: Vec<f32>,
    /// `[N, T]`.
    pub per_head: Tensor<f32>,
    pub u_logits: Option<Tensor<f32>>,
    pub gate: Option<Vec<usize>>,
}

/// Runs the model in eval mode on one prepared sample.
pub fn predict(params: &ModelParams, sample: &Sample, gate_map: Option<&GateMap>) -> Result<Prediction> {
    let model = Model::new(&params.config)?;
    let mut s = Session::new(&params.set, Mode::Eval, 0, false);
    let out = model.forward(
        &mut s,
        &ForwardInput { x: &sample.x, v: sample.v, u: None, gate_map, gate_source: None },
    )?;
    let pct = |v: &Tensor<f32>| -> Tensor<f32> {
        let mut v = v.clone();
        v.data_mut().iter_mut().for_each(|x| *x *= 100.0);
        v
    };
    Ok(Prediction {
        y_hat: pct(s.graph.value(out.y_hat)).into_data(),
        per_head: pct(s.graph.value(out.per_head)),
        u_logits: out.u_logits.map(|l| s.graph.value(l).clone()),
        gate: out.gate,
    })
}
