use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::model::arch::{Architecture, Init};
use crate::model::config::ModelConfig;
use crate::model::variant::{variants, Variant};
use crate::numerics::{Real, Tensor};

/// Named trainable tensors plus non-trainable buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<F: Real = f32> {
    pub params: BTreeMap<String, Tensor<F>>,
    pub buffers: BTreeMap<String, Tensor<F>>,
}

impl<F: Real> ParamSet<F> {
    pub fn cast<G: Real>(&self) -> ParamSet<G> {
        let c = |m: &BTreeMap<String, Tensor<F>>| m.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        ParamSet { params: c(&self.params), buffers: c(&self.buffers) }
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().chain(self.buffers.values()).all(Tensor::all_finite)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub set: ParamSet<f32>,
}

impl ModelParams {
    pub fn variant(&self) -> Result<&'static dyn Variant> {
        variants().get(&self.config.variant)
    }

    pub fn architecture(&self) -> Result<Architecture> {
        self.variant()?.architecture(&self.config)
    }

    pub fn param_count(&self) -> usize {
        self.set.param_count()
    }

    /// Checks that the tensor inventory matches the config exactly.
    pub fn check_inventory(&self) -> Result<()> {
        let arch = self.architecture()?;
        for (kind, specs, have) in [
            ("parameter", arch.param_specs(), &self.set.params),
            ("buffer", arch.buffer_specs(), &self.set.buffers),
        ] {
            if specs.len() != have.len() {
                return Err(Error::Checkpoint(format!(
                    "expected {} {kind} tensors, found {}",
                    specs.len(),
                    have.len()
                )));
            }
            for s in specs {
                match have.get(&s.name) {
                    Some(t) if t.shape() == s.shape.as_slice() => {}
                    Some(t) => {
                        return Err(Error::Checkpoint(format!(
                            "{kind} {} has shape {:?}, expected {:?}",
                            s.name,
                            t.shape(),
                            s.shape
                        )))
                    }
                    None => return Err(Error::Checkpoint(format!("missing {kind} {}", s.name))),
                }
            }
        }
        Ok(())
    }
}

fn init_tensor(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    let data: Vec<f32> = match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Const(c) => vec![c as f32; n],
        Init::FanIn(fan) => {
            let bound = 1.0 / (fan.max(1) as f64).sqrt();
            let d = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            (0..n).map(|_| d.sample(rng) as f32).collect()
        }
        Init::Normal(std) => {
            let d = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| d.sample(rng) as f32).collect()
        }
    };
    Tensor::new(shape.to_vec(), data).expect("spec shapes are positive")
}

/// Deterministic initialization of every tensor the config's variant needs.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    let arch = variants().get(&config.variant)?.architecture(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::default();
    for s in arch.param_specs() {
        let t = init_tensor(&s.shape, s.init, &mut rng);
        set.params.insert(s.name, t);
    }
    for s in arch.buffer_specs() {
        let t = init_tensor(&s.shape, s.init, &mut rng);
        set.buffers.insert(s.name, t);
    }
    log::debug!("built {} model with {} parameters", config.variant, set.param_count());
    Ok(ModelParams { config: config.clone(), set })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_params() {
        let cfg = ModelConfig::tiny();
        let a = build_model(&cfg, 3).unwrap();
        let b = build_model(&cfg, 3).unwrap();
        assert_eq!(a, b);
        let c = build_model(&cfg, 4).unwrap();
        assert_ne!(a.set.params, c.set.params);
        a.check_inventory().unwrap();
    }

    #[test]
    fn count_matches_arch() {
        let cfg = ModelConfig::tiny().with_variant("gated");
        let p = build_model(&cfg, 0).unwrap();
        assert_eq!(p.param_count(), p.architecture().unwrap().param_count());
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = ModelConfig::tiny();
        cfg.encoder_strides[1] = 3;
        assert!(matches!(build_model(&cfg, 0), Err(Error::Config(_))));
        let cfg = ModelConfig::tiny().with_variant("lstm");
        assert!(matches!(build_model(&cfg, 0), Err(Error::Unknown { .. })));
    }
}
