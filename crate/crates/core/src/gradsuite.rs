//! Finite-difference verification of every tape operation and of the composed
//! tiny models, in 64-bit and 32-bit analytic precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::gate::{state_label, GateMap};
use crate::model::{build_model, gbu_loss, main_loss, ForwardInput, GateSource, Model, ModelConfig, ParamSet, Session};
use crate::numerics::attention::{multi_head_self_attention, EncoderLayerVars};
use crate::numerics::gradcheck::{grad_check, Coverage, Differentiable};
use crate::numerics::{BatchNormStats, Graph, Mode, Real, Tensor, Var};

pub const TOL_F64: f64 = 1e-5;
pub const TOL_F32: f64 = 1e-3;
/// Central-difference step. Small enough that a probe rarely straddles an
/// activation kink, large enough to keep roundoff far below the tolerances.
pub const FD_STEP: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CaseReport {
    pub name: String,
    pub precision: &'static str,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Worst coordinate as `input[index]`.
    pub worst: Option<String>,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct SuiteReport {
    pub cases: Vec<CaseReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseReport> {
        self.cases.iter().filter(|c| !c.passed)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Coordinates probed per input tensor of the model cases.
    pub model_coords: usize,
    /// Skip the composed-model cases.
    pub kernels_only: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { seed: 0, model_coords: 6, kernels_only: false }
    }
}

/// Fixed pseudo-random weights so reductions do not produce uniform gradients.
fn probe_weights(shape: &[usize], salt: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA5A5 ^ salt);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).expect("sized")
}

fn weighted_sum<F: Real>(g: &mut Graph<F>, y: Var, salt: u64) -> Result<Var> {
    let w = g.constant(probe_weights(g.shape(y), salt).cast());
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn constant<F: Real>(g: &mut Graph<F>, shape: &[usize], data: &[f64]) -> Result<Var> {
    Ok(g.constant(Tensor::<F>::from_f64(shape, data)?))
}

#[derive(Clone, Copy, Debug)]
enum Kernel {
    Conv1d,
    ConvTranspose1d,
    BatchNormTrain,
    BatchNormEval,
    RreluEval,
    RreluTrain,
    Relu,
    Gelu,
    Softmax,
    LayerNorm,
    Linear,
    MatmulTranspose,
    Elementwise,
    SliceConcat,
    GatherSelect,
    Attention,
    L1,
    Pearson,
    CrossEntropy,
    MainLoss,
    GbuLoss,
}

const KERNELS: [Kernel; 21] = [
    Kernel::Conv1d,
    Kernel::ConvTranspose1d,
    Kernel::BatchNormTrain,
    Kernel::BatchNormEval,
    Kernel::RreluEval,
    Kernel::RreluTrain,
    Kernel::Relu,
    Kernel::Gelu,
    Kernel::Softmax,
    Kernel::LayerNorm,
    Kernel::Linear,
    Kernel::MatmulTranspose,
    Kernel::Elementwise,
    Kernel::SliceConcat,
    Kernel::GatherSelect,
    Kernel::Attention,
    Kernel::L1,
    Kernel::Pearson,
    Kernel::CrossEntropy,
    Kernel::MainLoss,
    Kernel::GbuLoss,
];

const LABELS: [Option<usize>; 6] = [Some(0), Some(2), None, Some(1), Some(2), Some(0)];

impl Kernel {
    fn name(self) -> String {
        format!("{self:?}")
    }

    /// Input shapes; `true` marks inputs kept away from zero (kinked ops).
    fn shapes(self) -> Vec<(Vec<usize>, bool)> {
        let s = |v: &[usize]| (v.to_vec(), false);
        let k = |v: &[usize]| (v.to_vec(), true);
        match self {
            Kernel::Conv1d => vec![s(&[3, 17]), s(&[4, 3, 5]), s(&[4])],
            Kernel::ConvTranspose1d => vec![s(&[3, 9]), s(&[3, 2, 7]), s(&[2])],
            Kernel::BatchNormTrain | Kernel::BatchNormEval => vec![s(&[3, 10]), s(&[3]), s(&[3])],
            Kernel::RreluEval | Kernel::RreluTrain | Kernel::Relu => vec![k(&[4, 6])],
            Kernel::Gelu | Kernel::Softmax => vec![s(&[3, 5])],
            Kernel::LayerNorm => vec![s(&[3, 6]), s(&[6]), s(&[6])],
            Kernel::Linear => vec![s(&[4, 5]), s(&[3, 5]), s(&[3])],
            Kernel::MatmulTranspose => vec![s(&[3, 4]), s(&[5, 4])],
            Kernel::Elementwise => vec![s(&[2, 5]), s(&[2, 5]), s(&[5])],
            Kernel::SliceConcat => vec![s(&[3, 6]), s(&[2, 6])],
            Kernel::GatherSelect => vec![s(&[3, 6])],
            Kernel::Attention => vec![s(&[5, 4]), s(&[6, 4]), s(&[4, 4]), s(&[4, 4]), s(&[4, 4]), s(&[4, 4]), s(&[6, 4]), s(&[4, 6])],
            Kernel::L1 => vec![k(&[12]), s(&[12])],
            Kernel::Pearson => vec![s(&[12]), s(&[12])],
            Kernel::CrossEntropy => vec![s(&[3, 6])],
            Kernel::MainLoss => vec![s(&[12]), s(&[12])],
            Kernel::GbuLoss => vec![s(&[6]), s(&[3, 6]), s(&[6])],
        }
    }

    fn inputs(self, seed: u64) -> Vec<Tensor<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (self as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        self.shapes()
            .into_iter()
            .map(|(shape, away)| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = (0..n)
                    .map(|_| {
                        let u: f64 = rng.random_range(-1.0..1.0);
                        if away {
                            u.signum() * (0.1 + 0.9 * u.abs())
                        } else {
                            u
                        }
                    })
                    .collect();
                Tensor::new(shape, data).expect("sized")
            })
            .collect()
    }
}

impl Differentiable for Kernel {
    fn eval<F: Real>(&self, g: &mut Graph<F>, x: &[Var]) -> Result<Var> {
        let salt = *self as u64;
        let y = match self {
            Kernel::Conv1d => g.conv1d(x[0], x[1], x[2], 2, 2)?,
            Kernel::ConvTranspose1d => g.conv_transpose1d(x[0], x[1], x[2], 3, 2)?,
            Kernel::BatchNormTrain | Kernel::BatchNormEval => {
                let running = BatchNormStats { mean: vec![F::of(0.1); 3], var: vec![F::of(0.8); 3] };
                let mode = if matches!(self, Kernel::BatchNormTrain) { Mode::Train } else { Mode::Eval };
                g.batch_norm1d(x[0], x[1], x[2], &running, F::of(1e-5), F::of(0.1), mode)?.0
            }
            Kernel::RreluEval | Kernel::RreluTrain => {
                let mode = if matches!(self, Kernel::RreluTrain) { Mode::Train } else { Mode::Eval };
                let mut rng = ChaCha8Rng::seed_from_u64(7);
                g.rrelu(x[0], F::of(1.0 / 8.0), F::of(1.0 / 3.0), mode, &mut rng)?
            }
            Kernel::Relu => g.relu(x[0]),
            Kernel::Gelu => g.gelu(x[0]),
            Kernel::Softmax => g.softmax_rows(x[0]),
            Kernel::LayerNorm => g.layer_norm_rows(x[0], x[1], x[2], F::of(1e-12))?,
            Kernel::Linear => g.linear(x[0], x[1], x[2])?,
            Kernel::MatmulTranspose => {
                let bt = g.transpose(x[1])?;
                g.matmul(x[0], bt)?
            }
            Kernel::Elementwise => {
                let a = g.add(x[0], x[1])?;
                let b = g.sub(a, x[1])?;
                let c = g.mul(b, x[1])?;
                let d = g.square(c);
                let e = g.scale(d, F::of(0.7));
                let f = g.add_row(e, x[2])?;
                let r = g.reshape(f, &[10])?;
                let m = g.mean(r);
                let total = weighted_sum(g, f, salt)?;
                return g.add(total, m);
            }
            Kernel::SliceConcat => {
                let a = g.slice_cols(x[0], 1, 3)?;
                let b = g.slice_cols(x[0], 4, 2)?;
                let c = g.concat_cols(&[a, b])?;
                let r = g.slice_rows(x[1], 1, 1)?;
                let d = g.concat_rows(&[x[0], r])?;
                let s1 = weighted_sum(g, c, salt)?;
                let s2 = weighted_sum(g, d, salt + 1)?;
                return g.add(s1, s2);
            }
            Kernel::GatherSelect => {
                let a = g.gather_cols(x[0], &[5, 0, 0, 3])?;
                let b = g.select_per_col(x[0], &[2, 0, 1, 1, 0, 2])?;
                let s1 = weighted_sum(g, a, salt)?;
                let s2 = weighted_sum(g, b, salt + 1)?;
                return g.add(s1, s2);
            }
            Kernel::Attention => {
                let z4 = constant(g, &[4], &[0.01, -0.02, 0.03, 0.0])?;
                let z6 = constant(g, &[6], &[0.0, 0.01, -0.01, 0.02, 0.0, 0.03])?;
                let ones = constant(g, &[4], &[1.0, 0.9, 1.1, 1.0])?;
                let layer = EncoderLayerVars {
                    q_w: x[2],
                    q_b: z4,
                    k_w: x[3],
                    k_b: z4,
                    v_w: x[4],
                    v_b: z4,
                    o_w: x[5],
                    o_b: z4,
                    ln1_g: ones,
                    ln1_b: z4,
                    ff1_w: x[6],
                    ff1_b: z6,
                    ff2_w: x[7],
                    ff2_b: z4,
                    ln2_g: ones,
                    ln2_b: z4,
                };
                multi_head_self_attention(g, x[0], Some(x[1]), &[layer], 2, 2)?
            }
            Kernel::L1 => return g.l1_mean(x[0], x[1]),
            Kernel::Pearson => return g.pearson(x[0], x[1], F::of(1e-8)),
            Kernel::CrossEntropy => return g.cross_entropy(x[0], &LABELS),
            Kernel::MainLoss => return Ok(main_loss(g, x[0], x[1], 0.2)?.total),
            Kernel::GbuLoss => return Ok(gbu_loss(g, x[0], x[1], x[2], &LABELS, 0.2, 1.0)?.total),
        };
        weighted_sum(g, y, salt)
    }
}

/// Composed model on a short synthetic input, parameters as the checked inputs.
struct ModelCase {
    config: ModelConfig,
    names: Vec<String>,
    buffers: ParamSet<f64>,
    x: Vec<f64>,
    y: Vec<f64>,
    v: usize,
    u: Vec<Option<usize>>,
    gate: Option<GateMap>,
}

impl ModelCase {
    fn new(variant: &str, seed: u64) -> Result<(Self, Vec<Tensor<f64>>)> {
        let mut config = ModelConfig::tiny().with_variant(variant);
        if variant == "gated" {
            config.n_gate_heads = 2;
        }
        let params = build_model(&config, seed)?;
        let set = params.set.cast::<f64>();
        let t = 48;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
        let x: Vec<f64> = (0..t * config.fb as usize)
            .map(|i| (i as f64 * 0.21).sin() + 0.3 * rng.random_range(-1.0..1.0))
            .collect();
        let y: Vec<f64> = (0..t).map(|i| 0.95 + 0.02 * (i as f64 * 0.3).sin()).collect();
        let u: Vec<Option<usize>> = (0..t).map(|i| if i % 11 == 5 { None } else { Some((i / 8) % 3) }).collect();
        let gate = (variant == "gated")
            .then(|| {
                let entries = (0..6).map(|i| (state_label(i / 3, i % 3), 1 + (i % 3 == 2) as usize)).collect();
                GateMap::manual(2, 2, 3, &entries)
            })
            .transpose()?;
        let v = 1;
        // Running statistics from one train-mode pass so eval-mode activations
        // have realistic scale; fresh (0, 1) statistics shrink a deep stack to
        // a nearly flat output.
        let calib = ModelConfig { bn_momentum: 1.0, ..config.clone() };
        let mut s = Session::new(&set, Mode::Train, seed, true);
        Model::new(&calib)?.forward(
            &mut s,
            &ForwardInput { x: &x, v, u: Some(&u), gate_map: gate.as_ref(), gate_source: None },
        )?;
        let mut buffers = ParamSet { params: Default::default(), buffers: set.buffers.clone() };
        buffers.buffers.extend(s.take_updates());
        let names: Vec<String> = set.params.keys().cloned().collect();
        let inputs: Vec<Tensor<f64>> = set.params.values().cloned().collect();
        Ok((Self { config, names, buffers, x, y, v, u, gate }, inputs))
    }
}

impl Differentiable for ModelCase {
    fn eval<F: Real>(&self, g: &mut Graph<F>, x: &[Var]) -> Result<Var> {
        let model = Model::new(&self.config)?;
        let set = self.buffers.cast::<F>();
        let mut s = Session::with_graph(std::mem::take(g), &set, Mode::Eval, 0, false);
        for (name, &var) in self.names.iter().zip(x) {
            s.bind(name, var);
        }
        let out = model.forward(
            &mut s,
            &ForwardInput {
                x: &self.x,
                v: self.v,
                u: Some(&self.u),
                gate_map: self.gate.as_ref(),
                gate_source: self.gate.as_ref().map(|_| GateSource::Truth),
            },
        )?;
        let y = s.graph.constant(Tensor::<F>::from_f64(&[self.y.len()], &self.y)?);
        let loss = match out.u_logits {
            Some(l) => gbu_loss(&mut s.graph, out.y_hat, l, y, &self.u, 0.2, 1.0)?.total,
            None => main_loss(&mut s.graph, out.y_hat, y, 0.2)?.total,
        };
        *g = s.into_graph();
        Ok(loss)
    }
}

fn record<D: Differentiable>(
    report: &mut SuiteReport,
    name: &str,
    op: &D,
    inputs: &[Tensor<f64>],
    coverage: Coverage,
) -> Result<()> {
    for (precision, tolerance) in [("f64", TOL_F64), ("f32", TOL_F32)] {
        let r = if precision == "f64" {
            grad_check::<f64, _>(op, inputs, FD_STEP, coverage)?
        } else {
            grad_check::<f32, _>(op, inputs, FD_STEP, coverage)?
        };
        report.cases.push(CaseReport {
            name: name.to_string(),
            precision,
            tolerance,
            max_rel_error: r.max_rel_error,
            checked: r.checked,
            worst: r.worst.map(|(i, j)| format!("input{i}[{j}]")),
            passed: r.max_rel_error < tolerance && r.checked > 0,
        });
    }
    Ok(())
}

/// Runs every case and reports per-case maxima.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut report = SuiteReport::default();
    for k in KERNELS {
        let inputs = k.inputs(opts.seed);
        record(&mut report, &k.name(), &k, &inputs, Coverage::All)?;
    }
    if !opts.kernels_only {
        for variant in ["backbone", "cnn", "varaug", "gated"] {
            let (case, inputs) = ModelCase::new(variant, opts.seed)?;
            let coverage = Coverage::Sample { per_input: opts.model_coords, seed: opts.seed };
            record(&mut report, &format!("model/{variant}"), &case, &inputs, coverage)?;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_pass() {
        let r = run_suite(&SuiteOptions { kernels_only: true, ..Default::default() }).unwrap();
        assert_eq!(r.cases.len(), 2 * KERNELS.len());
        for c in &r.cases {
            assert!(c.passed, "{c:?}");
        }
    }

    #[test]
    fn broken_gradient_is_caught() {
        // d/dx of a constant-folded term is invisible to the tape
        struct Detached;
        impl Differentiable for Detached {
            fn eval<F: Real>(&self, g: &mut Graph<F>, x: &[Var]) -> Result<Var> {
                let copy = g.constant(g.value(x[0]).clone());
                let sq = g.square(copy);
                let a = g.sum(sq);
                let b = g.sum(x[0]);
                g.add(a, b)
            }
        }
        let x = Tensor::from_f64(&[3], &[0.5, -0.7, 0.9]).unwrap();
        let mut report = SuiteReport::default();
        record(&mut report, "detached", &Detached, &[x], Coverage::All).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures().count(), 2);
    }
}
