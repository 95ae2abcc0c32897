use super::{ForwardTrace, NnError};

/// A loss value with its gradient at the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Softmax with the max subtracted first.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Argmax of the probabilities; ties go to the lowest index.
pub fn predict(trace: &ForwardTrace) -> usize {
    argmax(trace.probabilities())
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// `−log softmax(logits)[label]`, gradient `probabilities − onehot(label)`.
pub fn cross_entropy(trace: &ForwardTrace, label: usize) -> Result<LossGrad, NnError> {
    let logits = trace.logits();
    let classes = logits.len();
    if label >= classes {
        return Err(NnError::LabelOutOfRange { label, classes });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    let loss = (log_sum - logits[label]).max(0.0);
    let mut grad = trace.probabilities().to_vec();
    grad[label] -= 1.0;
    Ok(LossGrad { loss, grad })
}

/// Mean squared error between raw logit vectors: `(1/C)·Σ(p − target)²`.
pub fn logit_loss(logits: &[f64], target: &[f64]) -> Result<LossGrad, NnError> {
    if logits.len() != target.len() {
        return Err(NnError::Dimension {
            context: "logit loss",
            expected: target.len(),
            found: logits.len(),
        });
    }
    let c = logits.len() as f64;
    let diff: Vec<f64> = logits.iter().zip(target).map(|(p, t)| p - t).collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / c;
    let grad = diff.into_iter().map(|d| 2.0 * d / c).collect();
    Ok(LossGrad { loss, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn central_difference(f: impl Fn(&[f64]) -> f64, at: &[f64], h: f64) -> Vec<f64> {
        (0..at.len())
            .map(|i| {
                let mut plus = at.to_vec();
                let mut minus = at.to_vec();
                plus[i] += h;
                minus[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn softmax_is_normalized_and_shift_invariant() {
        let p = softmax(&[1.0, 2.0, 3.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let q = softmax(&[1001.0, 1002.0, 1003.0]);
        for (a, b) in p.iter().zip(&q) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn predict_prefers_highest_then_lowest_index() {
        let trace = ForwardTrace::from_logits(vec![0.1f64.ln(), 0.7f64.ln(), 0.2f64.ln()]);
        assert_eq!(predict(&trace), 1);
        assert_eq!(predict(&ForwardTrace::from_logits(vec![0.0, 0.0])), 0);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
    }

    #[test]
    fn uniform_cross_entropy_is_ln_classes() {
        let trace = ForwardTrace::from_logits(vec![0.0; 10]);
        let out = cross_entropy(&trace, 3).unwrap();
        assert!((out.loss - 10f64.ln()).abs() < 1e-12);
        assert!((out.loss - std::f64::consts::LN_10).abs() < 1e-6);
    }

    #[test]
    fn confident_correct_prediction_has_zero_loss() {
        let trace = ForwardTrace::from_logits(vec![0.0, 1e4, 0.0]);
        let out = cross_entropy(&trace, 1).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.grad.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let trace = ForwardTrace::from_logits(vec![0.0; 4]);
        assert_eq!(
            cross_entropy(&trace, 4),
            Err(NnError::LabelOutOfRange {
                label: 4,
                classes: 4
            })
        );
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
            let label = rng.random_range(0..4);
            let analytic = cross_entropy(&ForwardTrace::from_logits(logits.clone()), label)
                .unwrap()
                .grad;
            let numeric = central_difference(
                |z| {
                    cross_entropy(&ForwardTrace::from_logits(z.to_vec()), label)
                        .unwrap()
                        .loss
                },
                &logits,
                1e-5,
            );
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!(rel_err(*a, *n) < 1e-5, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn logit_loss_analytic_cases() {
        let same = logit_loss(&[0.3, -1.0], &[0.3, -1.0]).unwrap();
        assert_eq!(same.loss, 0.0);
        assert_eq!(same.grad, vec![0.0, 0.0]);

        let out = logit_loss(&[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(out.loss, 0.5);
        assert_eq!(out.grad, vec![1.0, 0.0]);

        assert!(matches!(
            logit_loss(&[1.0], &[0.0, 0.0]),
            Err(NnError::Dimension { .. })
        ));
    }

    #[test]
    fn logit_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let p: Vec<f64> = (0..10).map(|_| rng.random_range(-5.0..5.0)).collect();
            let t: Vec<f64> = (0..10).map(|_| rng.random_range(-5.0..5.0)).collect();
            let analytic = logit_loss(&p, &t).unwrap().grad;
            let numeric = central_difference(|z| logit_loss(z, &t).unwrap().loss, &p, 1e-5);
            for (a, n) in analytic.iter().zip(&numeric) {
                assert!(rel_err(*a, *n) < 1e-5, "{a} vs {n}");
            }
        }
    }
}
