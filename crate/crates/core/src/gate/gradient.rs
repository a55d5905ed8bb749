use crate::error::{Error, Result};
use crate::parallel::par_map;
use crate::model::{fallback_class, main_loss, ForwardInput, Model, ModelParams, Sample, Session};
use crate::numerics::{Mode, Tensor};

/// Loss gradient averaged over the records carrying one (v, u) state.
#[derive(Clone, Debug, PartialEq)]
pub struct StateGradient {
    pub v: usize,
    pub u: usize,
    /// Flattened over the model's parameters in inventory order.
    pub grad: Vec<f64>,
    /// Records that contributed.
    pub samples: usize,
}

/// Seconds of `sample` in inaccessible state `u` (missing labels count as the
/// fallback class, as in gated training).
fn state_seconds(sample: &Sample, u: usize, u_classes: usize) -> Vec<usize> {
    let fb = fallback_class(u_classes);
    sample
        .u
        .iter()
        .enumerate()
        .filter(|(_, l)| l.unwrap_or(fb) == u)
        .map(|(t, _)| t)
        .collect()
}

/// Eval-mode gradient of the main loss restricted to the seconds in state
/// `u` of records with accessible state `v`, averaged over records.
pub fn state_gradient(params: &ModelParams, samples: &[Sample], v: usize, u: usize) -> Result<StateGradient> {
    let cfg = &params.config;
    let model = Model::new(cfg)?;
    let names: Vec<String> = model.arch.param_specs().into_iter().map(|s| s.name).collect();
    let total: usize = names.iter().map(|n| params.set.params[n].len()).sum();
    let mut acc = vec![0.0f64; total];
    let mut count = 0;
    for sample in samples.iter().filter(|s| s.v == v) {
        let idx = state_seconds(sample, u, cfg.u_classes);
        if idx.len() < 2 {
            continue;
        }
        let mut s = Session::new(&params.set, Mode::Eval, 0, true);
        let out = model.forward(
            &mut s,
            &ForwardInput { x: &sample.x, v, u: Some(&sample.u), gate_map: None, gate_source: None },
        )?;
        let y = s.graph.constant(Tensor::from_f64(&[sample.spo2.len()], &sample.target())?);
        let y_sel = s.graph.gather_cols(y, &idx)?;
        let yh_sel = s.graph.gather_cols(out.y_hat, &idx)?;
        let loss = main_loss(&mut s.graph, yh_sel, y_sel, cfg.lambda)?;
        s.graph.backward(loss.total)?;
        let grads = s.grads();
        let mut k = 0;
        for n in &names {
            for &g in grads[n].data() {
                acc[k] += g as f64;
                k += 1;
            }
        }
        count += 1;
    }
    if count == 0 {
        return Err(Error::EmptySubset(format!("no record has state v={v}, u={u}")));
    }
    acc.iter_mut().for_each(|g| *g /= count as f64);
    Ok(StateGradient { v, u, grad: acc, samples: count })
}

/// Gradients for every state, computed on up to `jobs` threads. Results are
/// in state-id order regardless of scheduling.
pub fn state_gradients(params: &ModelParams, samples: &[Sample], jobs: usize) -> Vec<Result<StateGradient>> {
    let (nv, nu) = (params.config.v_states, params.config.u_classes);
    let states: Vec<(usize, usize)> = (0..nv).flat_map(|v| (0..nu).map(move |u| (v, u))).collect();
    par_map(&states, jobs, |&(v, u)| state_gradient(params, samples, v, u))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthProfile};
    use crate::model::{build_model, prepare, ModelConfig};

    fn setup() -> (ModelParams, Vec<Sample>) {
        let cfg = ModelConfig::tiny();
        let profile = SynthProfile { nights: 4, night_s: 96, stages: vec![2], ..Default::default() };
        let samples = prepare(&synth_generate(&profile).unwrap(), &cfg).unwrap();
        (build_model(&cfg, 0).unwrap(), samples)
    }

    #[test]
    fn deterministic_and_sized() {
        let (p, s) = setup();
        let a = state_gradient(&p, &s, 0, 2).unwrap();
        let b = state_gradient(&p, &s, 0, 2).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.grad.len(), p.param_count());
        assert!(a.grad.iter().any(|&g| g != 0.0));
    }

    #[test]
    fn subset_average_is_mean_of_singles() {
        let (p, s) = setup();
        let v0: Vec<Sample> = s.iter().filter(|x| x.v == 0).cloned().collect();
        assert_eq!(v0.len(), 2);
        let pair = state_gradient(&p, &v0, 0, 2).unwrap();
        let a = state_gradient(&p, &v0[..1], 0, 2).unwrap();
        let b = state_gradient(&p, &v0[1..], 0, 2).unwrap();
        assert_eq!(pair.samples, 2);
        for i in 0..pair.grad.len() {
            let mean = (a.grad[i] + b.grad[i]) / 2.0;
            assert!((pair.grad[i] - mean).abs() <= 1e-12 * mean.abs().max(1e-6));
        }
    }

    #[test]
    fn empty_subset_errors() {
        let (p, s) = setup();
        let only_v1: Vec<Sample> = s.into_iter().filter(|x| x.v == 1).collect();
        assert!(matches!(state_gradient(&p, &only_v1, 0, 0), Err(Error::EmptySubset(_))));
        assert!(matches!(state_gradient(&p, &[], 1, 1), Err(Error::EmptySubset(_))));
    }

    #[test]
    fn threaded_matches_serial() {
        let (p, s) = setup();
        let serial = state_gradients(&p, &s, 1);
        let threaded = state_gradients(&p, &s, 4);
        assert_eq!(serial.len(), 6);
        for (a, b) in serial.iter().zip(&threaded) {
            match (a, b) {
                (Ok(a), Ok(b)) => assert_eq!(a, b),
                (Err(_), Err(_)) => {}
                _ => panic!("scheduling changed the outcome"),
            }
        }
    }
}
