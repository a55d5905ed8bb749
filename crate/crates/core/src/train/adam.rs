use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Moments and step counters. Counters are kept per tensor so parameters
/// introduced mid-run get their own bias correction; for a fixed parameter
/// set they all equal `step`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F: Real = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Vec<F>>,
    pub v: BTreeMap<String, Vec<F>>,
    pub counts: BTreeMap<String, u64>,
}

impl<F: Real> AdamState<F> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            counts: BTreeMap::new(),
        }
    }

    /// Copies the moments of `from` to `to` (both keyed by tensor name).
    pub fn copy_slot(&mut self, from: &str, to: &str) {
        if let (Some(m), Some(v), Some(&c)) = (self.m.get(from), self.v.get(from), self.counts.get(from)) {
            let (m, v) = (m.clone(), v.clone());
            self.m.insert(to.to_string(), m);
            self.v.insert(to.to_string(), v);
            self.counts.insert(to.to_string(), c);
        }
    }
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step<F: Real>(
    params: &mut BTreeMap<String, Tensor<F>>,
    grads: &BTreeMap<String, Tensor<F>>,
    state: &mut AdamState<F>,
) -> Result<()> {
    let next = state.step + 1;
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::Dimension(format!(
                "{name}: gradient shape {:?} vs parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient { path: name.clone(), step: next });
        }
    }
    let (b1, b2) = (F::of(state.beta1), F::of(state.beta2));
    let (lr, eps) = (F::of(state.lr), F::of(state.eps));
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let n = p.len();
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![F::zero(); n]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![F::zero(); n]);
        let t = state.counts.entry(name.clone()).or_insert(0);
        *t += 1;
        let c1 = F::one() - b1.powi(*t as i32);
        let c2 = F::one() - b2.powi(*t as i32);
        for ((w, &gi), (mi, vi)) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut())) {
            *mi = b1 * *mi + (F::one() - b1) * gi;
            *vi = b2 * *vi + (F::one() - b2) * gi * gi;
            let mhat = *mi / c1;
            let vhat = *vi / c2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    state.step = next;
    Ok(())
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm<F: Real>(grads: &mut BTreeMap<String, Tensor<F>>, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|&x| x.as_f64() * x.as_f64())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = F::of(max_norm / norm);
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(name: &str, x: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([(name.to_string(), Tensor::vector(vec![x]))])
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = BTreeMap::from([("w".to_string(), Tensor::vector(vec![0.3f32, -2.0]))]);
        let before = p.clone();
        let g = BTreeMap::from([("w".to_string(), Tensor::vector(vec![0.0f32, 0.0]))]);
        let mut s = AdamState::new(2e-4);
        for _ in 0..3 {
            adam_step(&mut p, &g, &mut s).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(s.step, 3);
    }

    #[test]
    fn first_step_closed_form() {
        let mut p = one("w", 1.0);
        let mut s = AdamState::new(2e-4);
        adam_step(&mut p, &one("w", 1.0), &mut s).unwrap();
        // m̂ = 1, v̂ = 1 so the step is lr / (1 + eps)
        let want = 1.0 - 2e-4 / (1.0 + 1e-8);
        assert!((p["w"].data()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn quadratic_matches_scalar_oracle() {
        // f(w) = (w - 3)^2
        let mut p = one("w", 0.5);
        let mut s = AdamState::new(0.1);
        let (mut w, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=3 {
            let g = 2.0 * (p["w"].data()[0] - 3.0);
            adam_step(&mut p, &one("w", g), &mut s).unwrap();
            let go = 2.0 * (w - 3.0);
            m = 0.9 * m + 0.1 * go;
            v = 0.999 * v + 0.001 * go * go;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
            assert!((p["w"].data()[0] - w).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_rate_freezes_parameters() {
        let mut p = one("w", 0.7);
        let mut s = AdamState::new(0.0);
        adam_step(&mut p, &one("w", 5.0), &mut s).unwrap();
        assert_eq!(p["w"].data()[0], 0.7);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = one("enc.w", 0.7);
        let mut s = AdamState::new(0.1);
        let err = adam_step(&mut p, &one("enc.w", f64::NAN), &mut s).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { ref path, step: 1 } if path == "enc.w"));
        assert_eq!(p["enc.w"].data()[0], 0.7);
        assert_eq!(s.step, 0);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut g = BTreeMap::from([("a".to_string(), Tensor::vector(vec![3.0f64, 4.0]))]);
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g["a"].data()[0] - 0.6).abs() < 1e-15);
        assert_eq!(clip_grad_norm(&mut g, 10.0), 1.0);
    }
}
