//! Training objectives: L1 minus weighted correlation, plus the auxiliary
//! cross-entropy for multitask variants.

use crate::error::{Error, Result};
use crate::numerics::{Graph, Real, Tensor, Var};

/// Added under the square root of the correlation denominator.
pub const CORR_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub l1: Var,
    pub corr: Var,
    /// Per-sample mean cross-entropy.
    pub ce: Option<Var>,
}

fn check_lengths<F: Real>(g: &Graph<F>, y_hat: Var, y: Var) -> Result<usize> {
    let (a, b) = (g.value(y_hat).len(), g.value(y).len());
    if a != b {
        return Err(Error::Length(format!("prediction has {a} samples, target {b}")));
    }
    if a < 2 {
        return Err(Error::Length(format!("loss needs at least 2 samples, got {a}")));
    }
    Ok(a)
}

pub fn main_loss<F: Real>(g: &mut Graph<F>, y_hat: Var, y: Var, lambda: f64) -> Result<LossTerms> {
    check_lengths(g, y_hat, y)?;
    let l1 = g.l1_mean(y_hat, y)?;
    let corr = g.pearson(y_hat, y, F::of(CORR_EPS))?;
    let weighted = g.scale(corr, F::of(lambda));
    let total = g.sub(l1, weighted)?;
    Ok(LossTerms { total, l1, corr, ce: None })
}

pub fn gbu_loss<F: Real>(
    g: &mut Graph<F>,
    y_hat: Var,
    u_logits: Var,
    y: Var,
    u: &[Option<usize>],
    lambda: f64,
    lambda_u: f64,
) -> Result<LossTerms> {
    let t = check_lengths(g, y_hat, y)?;
    let main = main_loss(g, y_hat, y, lambda)?;
    let ce_sum = g.cross_entropy(u_logits, u)?;
    let ce = g.scale(ce_sum, F::of(1.0 / t as f64));
    let weighted = g.scale(ce, F::of(lambda_u));
    let total = g.add(main.total, weighted)?;
    Ok(LossTerms { total, ce: Some(ce), ..main })
}

/// Value of the main objective for plain series.
pub fn loss_main(y_hat: &[f64], y: &[f64], lambda: f64) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::vector(y_hat.to_vec()));
    let b = g.constant(Tensor::vector(y.to_vec()));
    let terms = main_loss(&mut g, a, b, lambda)?;
    Ok(g.scalar(terms.total))
}

/// Value of the multitask objective; `u_logits` is `[U, T]`.
pub fn loss_gbu(
    y_hat: &[f64],
    u_logits: &Tensor<f64>,
    y: &[f64],
    u: &[usize],
    lambda: f64,
    lambda_u: f64,
) -> Result<f64> {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::vector(y_hat.to_vec()));
    let b = g.constant(Tensor::vector(y.to_vec()));
    let l = g.constant(u_logits.clone());
    let labels: Vec<Option<usize>> = u.iter().map(|&c| Some(c)).collect();
    let terms = gbu_loss(&mut g, a, l, b, &labels, lambda, lambda_u)?;
    Ok(g.scalar(terms.total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn oracle_main(a: &[f64], b: &[f64], lambda: f64) -> f64 {
        let n = a.len() as f64;
        let l1 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / n;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut num = 0.0;
        let mut da = 0.0;
        let mut db = 0.0;
        for i in 0..a.len() {
            num += (a[i] - ma) * (b[i] - mb);
            da += (a[i] - ma).powi(2);
            db += (b[i] - mb).powi(2);
        }
        l1 - lambda * num / (da * db + CORR_EPS).sqrt()
    }

    #[test]
    fn perfect_prediction() {
        let y = [0.2, 0.9, 0.5, 0.7];
        let l = loss_main(&y, &y, 0.2).unwrap();
        assert!((l + 0.2).abs() < 1e-6, "{l}");
    }

    #[test]
    fn flat_target_guarded() {
        let l = loss_main(&[94.0, 95.0, 96.0], &[95.0, 95.0, 95.0], 0.0).unwrap();
        assert!((l - 2.0 / 3.0).abs() < 1e-12);
        // with lambda the correlation term stays finite and zero
        let l = loss_main(&[94.0, 95.0, 96.0], &[95.0, 95.0, 95.0], 0.5).unwrap();
        assert!((l - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn length_checks() {
        assert!(matches!(loss_main(&[1.0, 2.0], &[1.0], 0.1), Err(Error::Length(_))));
        assert!(matches!(loss_main(&[1.0], &[1.0], 0.1), Err(Error::Length(_))));
    }

    #[test]
    fn gbu_without_aux_weight_is_main() {
        let a = [0.1, 0.5, 0.3];
        let b = [0.2, 0.4, 0.1];
        let logits = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 0.3, 0.0, 4.0]).unwrap();
        let main = loss_main(&a, &b, 0.2).unwrap();
        let gbu = loss_gbu(&a, &logits, &b, &[0, 1, 1], 0.2, 0.0).unwrap();
        assert_eq!(main, gbu);
    }

    #[test]
    fn saturated_softmax_has_tiny_ce() {
        let a = [0.1, 0.5, 0.3];
        let b = [0.2, 0.4, 0.1];
        let u = [0, 2, 1];
        let mut logits = vec![0.0; 9];
        for (t, &c) in u.iter().enumerate() {
            logits[c * 3 + t] = 20.0;
        }
        let logits = Tensor::new(vec![3, 3], logits).unwrap();
        let main = loss_main(&a, &b, 0.2).unwrap();
        let gbu = loss_gbu(&a, &logits, &b, &u, 0.2, 1.0).unwrap();
        assert!(gbu - main < 1e-8 && gbu >= main);
    }

    #[test]
    fn two_class_hand_example() {
        // logits columns (1, 0) and (0, 2); labels 0 and 0
        let logits = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        let a = [0.3, 0.6];
        let b = [0.5, 0.2];
        let ce0 = (1.0f64.exp() + 1.0).ln() - 1.0;
        let ce1 = (1.0 + 2.0f64.exp()).ln();
        let want = oracle_main(&a, &b, 0.2) + 0.7 * (ce0 + ce1) / 2.0;
        let got = loss_gbu(&a, &logits, &b, &[0, 0], 0.2, 0.7).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        let bad = loss_gbu(&a, &logits, &b, &[0, 2], 0.2, 0.7);
        assert!(matches!(bad, Err(Error::Label { t: 1, label: 2, classes: 2 })));
    }

    proptest! {
        #[test]
        fn matches_scalar_oracle(
            pairs in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0), 2..60),
            lambda in 0.0f64..1.0,
        ) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let got = loss_main(&a, &b, lambda).unwrap();
            prop_assert!((got - oracle_main(&a, &b, lambda)).abs() < 1e-9);
        }

        #[test]
        fn zero_lambda_is_mae(pairs in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 2..40)) {
            let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let mae = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
            let got = loss_main(&a, &b, 0.0).unwrap();
            prop_assert_eq!(got, mae);
        }
    }
}
