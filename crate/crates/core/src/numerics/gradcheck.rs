//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{Graph, Real, Tensor, Var};

/// A scalar-valued function of some tensors, buildable in any precision.
///
/// Implementations must be deterministic: two evaluations on the same inputs
/// build identical graphs (seed any randomness inside `eval`).
pub trait Differentiable {
    fn eval<F: Real>(&self, g: &mut Graph<F>, inputs: &[Var]) -> Result<Var>;
}

impl<T: Differentiable + ?Sized> Differentiable for &T {
    fn eval<F: Real>(&self, g: &mut Graph<F>, inputs: &[Var]) -> Result<Var> {
        (**self).eval(g, inputs)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate)` of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Which coordinates of each input to probe.
#[derive(Clone, Copy, Debug)]
pub enum Coverage {
    All,
    /// At most this many coordinates per input, chosen by seed.
    Sample { per_input: usize, seed: u64 },
}

fn loss_value<D: Differentiable>(op: &D, inputs: &[Tensor<f64>]) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = op.eval(&mut g, &vars)?;
    Ok(g.scalar(out))
}

/// Error above which a coordinate is probed again with a finer step.
const RETRY_ABOVE: f64 = 1e-7;
const RETRY_DIVISORS: [f64; 2] = [10.0, 100.0];

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

fn central<D: Differentiable>(op: &D, probe: &mut [Tensor<f64>], (i, j): (usize, usize), eps: f64) -> Result<f64> {
    let orig = probe[i].data()[j];
    probe[i].data_mut()[j] = orig + eps;
    let plus = loss_value(op, probe);
    probe[i].data_mut()[j] = orig - eps;
    let minus = loss_value(op, probe);
    probe[i].data_mut()[j] = orig;
    Ok((plus? - minus?) / (2.0 * eps))
}

/// Analytic gradients in precision `F` against 64-bit central differences.
///
/// The error per coordinate is `|a − n| / max(1, |a|, |n|)`. A coordinate that
/// disagrees is probed again with steps 10× and 100× finer and keeps the best
/// agreement: a probe straddling a ReLU or L1 kink stops disagreeing once the
/// step is small enough, a wrong gradient never does.
pub fn grad_check<F: Real, D: Differentiable>(
    op: &D,
    inputs: &[Tensor<f64>],
    eps: f64,
    coverage: Coverage,
) -> Result<GradCheckReport> {
    let mut g = Graph::<F>::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.cast::<F>(), true)).collect();
    let out = op.eval(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| g.grad(v).map(|t| t.as_f64_vec()).unwrap_or_default())
        .collect();

    let mut report = GradCheckReport::default();
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match coverage {
            Coverage::All => (0..input.len()).collect(),
            Coverage::Sample { per_input, seed } if input.len() > per_input => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (i as u64).wrapping_mul(0x9E37_79B9));
                let mut c = sample(&mut rng, input.len(), per_input).into_vec();
                c.sort_unstable();
                c
            }
            Coverage::Sample { .. } => (0..input.len()).collect(),
        };
        for j in coords {
            let a = analytic[i][j];
            let mut numeric = central(op, &mut probe, (i, j), eps)?;
            let mut err = rel_error(a, numeric);
            for d in RETRY_DIVISORS {
                if err <= RETRY_ABOVE {
                    break;
                }
                let fine = central(op, &mut probe, (i, j), eps / d)?;
                if rel_error(a, fine) < err {
                    numeric = fine;
                    err = rel_error(a, fine);
                }
            }
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((i, j));
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
