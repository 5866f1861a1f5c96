//! Loss kernels returning `(value, gradient)`.

use crate::error::{CapsError, Result};

/// Asymmetric squared loss `|tau - 1(u < 0)| * u^2` and its derivative in `u`.
pub fn expectile_loss(u: f64, tau: f64) -> Result<(f64, f64)> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(CapsError::InvalidSpec(format!(
            "expectile tau {tau} outside (0, 1)"
        )));
    }
    let w = if u < 0.0 { 1.0 - tau } else { tau };
    Ok((w * (u * u), 2.0 * w * u))
}

/// `(pred - target)^2` and its derivative in `pred`.
pub fn squared_error(pred: f64, target: f64) -> (f64, f64) {
    let d = pred - target;
    (d * d, 2.0 * d)
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_z = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - log_z).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_prob(logits: &[f64], a: usize) -> f64 {
    log_softmax(logits)[a]
}

/// `-log pi(a)` and its gradient in the logits, `pi - onehot(a)`.
pub fn cross_entropy(logits: &[f64], a: usize) -> (f64, Vec<f64>) {
    let logp = log_softmax(logits);
    let mut grad: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    grad[a] -= 1.0;
    (-logp[a], grad)
}

/// `J = sum_a pi(a) * (q(a) - alpha * log pi(a))` and its gradient in the
/// logits, `dJ/dz_j = pi_j * (q_j - alpha * log pi_j - J)`.
pub fn entropy_regularized_value(logits: &[f64], q: &[f64], alpha: f64) -> (f64, Vec<f64>) {
    let logp = log_softmax(logits);
    let pi: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
    let f: Vec<f64> = q.iter().zip(&logp).map(|(q, l)| q - alpha * l).collect();
    let j: f64 = pi.iter().zip(&f).map(|(p, f)| p * f).sum();
    let grad = pi.iter().zip(&f).map(|(p, f)| p * (f - j)).collect();
    (j, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> f64 {
        let mut a = x.to_vec();
        let mut b = x.to_vec();
        a[i] += h;
        b[i] -= h;
        (f(&a) - f(&b)) / (2.0 * h)
    }

    #[test]
    fn expectile_examples() {
        assert_eq!(expectile_loss(2.0, 0.5).unwrap().0, 2.0);
        assert!((expectile_loss(-1.0, 0.7).unwrap().0 - 0.3).abs() < 1e-15);
        assert!((expectile_loss(1.0, 0.7).unwrap().0 - 0.7).abs() < 1e-15);
        assert_eq!(expectile_loss(0.0, 0.7).unwrap().1, 0.0);
        assert!(expectile_loss(1.0, 0.0).is_err());
        assert!(expectile_loss(1.0, 1.0).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.3; 4]);
        for x in p {
            assert!((x - 0.25).abs() < 1e-15);
        }
        let p = softmax(&[1000.0, 0.0]);
        assert!(p.iter().all(|x| x.is_finite()));
        assert!((p[0] - 1.0).abs() < 1e-15);
        assert!(p[1] < 1e-300);
        assert!(log_prob(&[1000.0, 0.0], 1).is_finite());
    }

    proptest! {
        #[test]
        fn expectile_half_is_half_squared_error(u in -1e6f64..1e6) {
            prop_assert_eq!(expectile_loss(u, 0.5).unwrap().0, u * u / 2.0);
        }

        #[test]
        fn log_prob_gradient_matches_fd(logits in proptest::collection::vec(-3.0f64..3.0, 2..6), pick in 0usize..6) {
            let a = pick % logits.len();
            let (_, g) = cross_entropy(&logits, a);
            for i in 0..logits.len() {
                // d log pi(a) / dz_i = -g_i
                let fd = central_diff(|z| log_prob(z, a), &logits, i, 1e-5);
                let an = -g[i];
                prop_assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-3), "i={i} fd={fd} an={an}");
            }
        }

        #[test]
        fn entropy_value_gradient_matches_fd(
            logits in proptest::collection::vec(-3.0f64..3.0, 4),
            q in proptest::collection::vec(-2.0f64..2.0, 4),
            alpha in 0.0f64..1.0,
        ) {
            let (_, g) = entropy_regularized_value(&logits, &q, alpha);
            for i in 0..4 {
                let fd = central_diff(|z| entropy_regularized_value(z, &q, alpha).0, &logits, i, 1e-5);
                prop_assert!((fd - g[i]).abs() <= 1e-4 * g[i].abs().max(1e-3), "i={i} fd={fd} an={}", g[i]);
            }
        }

        #[test]
        fn softmax_normalised(logits in proptest::collection::vec(-50.0f64..50.0, 1..8)) {
            let p = softmax(&logits);
            let total: f64 = p.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            let lp = log_softmax(&logits);
            for (x, l) in p.iter().zip(&lp) {
                prop_assert!((x.ln() - l).abs() < 1e-9 || *x < 1e-300);
            }
        }
    }
}
