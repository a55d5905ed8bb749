//! The model family, registered by name.

use std::sync::OnceLock;

use crate::error::Result;
use crate::model::arch::{self, Architecture, Blueprint};
use crate::model::config::ModelConfig;
use crate::registry::{Named, Registry};

pub trait Variant: Named + Send + Sync {
    fn summary(&self) -> &'static str;
    fn blueprint(&self, cfg: &ModelConfig) -> Blueprint;

    /// Whether per-second outputs are routed through a gate map.
    fn gated(&self) -> bool {
        false
    }

    fn architecture(&self, cfg: &ModelConfig) -> Result<Architecture> {
        arch::build(cfg, &self.blueprint(cfg))
    }
}

pub struct Backbone;
pub struct Cnn;
pub struct VarAug;
pub struct Gated;

impl Named for Backbone {
    fn name(&self) -> &'static str {
        "backbone"
    }
}

impl Variant for Backbone {
    fn summary(&self) -> &'static str {
        "convolutional encoder, attention bottleneck, one decoder head with skip links"
    }
    fn blueprint(&self, _: &ModelConfig) -> Blueprint {
        Blueprint { extra_inputs: 0, heads: 1, aux: false, attention: true, skips: true }
    }
}

impl Named for Cnn {
    fn name(&self) -> &'static str {
        "cnn"
    }
}

impl Variant for Cnn {
    fn summary(&self) -> &'static str {
        "eight convolutions and seven deconvolutions, no attention, no skip links"
    }
    fn blueprint(&self, _: &ModelConfig) -> Blueprint {
        Blueprint { extra_inputs: 0, heads: 1, aux: false, attention: false, skips: false }
    }
}

impl Named for VarAug {
    fn name(&self) -> &'static str {
        "varaug"
    }
}

impl Variant for VarAug {
    fn summary(&self) -> &'static str {
        "backbone with the accessible variable as an input channel and an auxiliary stage head"
    }
    fn blueprint(&self, _: &ModelConfig) -> Blueprint {
        Blueprint { extra_inputs: 1, heads: 1, aux: true, attention: true, skips: true }
    }
}

impl Named for Gated {
    fn name(&self) -> &'static str {
        "gated"
    }
}

impl Variant for Gated {
    fn summary(&self) -> &'static str {
        "backbone with N decoder heads selected per second by a gate map"
    }
    fn blueprint(&self, cfg: &ModelConfig) -> Blueprint {
        Blueprint { extra_inputs: 0, heads: cfg.n_gate_heads, aux: true, attention: true, skips: true }
    }
    fn gated(&self) -> bool {
        true
    }
}

pub fn variants() -> &'static Registry<dyn Variant> {
    static REGISTRY: OnceLock<Registry<dyn Variant>> = OnceLock::new();
    REGISTRY.get_or_init(|| {
        let mut r: Registry<dyn Variant> = Registry::new("variant");
        r.register(Box::new(Backbone));
        r.register(Box::new(Cnn));
        r.register(Box::new(VarAug));
        r.register(Box::new(Gated));
        r
    })
}
