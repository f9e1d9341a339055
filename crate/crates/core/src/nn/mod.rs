//! Dense reverse-mode AD, feedforward networks, losses and SGD.

mod data;
mod graph;
mod mlp;
mod optim;
mod tensor;

pub use data::{minibatch_sample, Sampling};
pub use graph::{Gradients, NodeId, Tape};
pub use mlp::{Activation, BoundMlp, Layer, Mlp};
pub use optim::{LearningRate, Sgd, SgdConfig};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Probability floor used when a predicted class has zero mass.
pub const PROB_FLOOR: f64 = 1e-300;

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub(crate) fn softmax_slice(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|&x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Softmax of a 1-D tensor.
pub fn softmax(v: &Tensor) -> Result<Tensor, NnError> {
    if v.is_empty() {
        return Err(NnError::Empty("softmax of empty vector".into()));
    }
    if !v.all_finite() {
        return Err(NnError::NonFinite("softmax input".into()));
    }
    Ok(Tensor::vector(softmax_slice(v.data())))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub nats: f64,
    /// Set when the labelled class had zero predicted mass and the floor was used.
    pub clamped: bool,
}

/// `-ln predicted[label]`.
pub fn cross_entropy(predicted: &[f64], label: usize) -> Result<CrossEntropy, NnError> {
    let total: f64 = predicted.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(NnError::Invalid(format!("prediction sums to {total}")));
    }
    let p = *predicted
        .get(label)
        .ok_or_else(|| NnError::Invalid(format!("label {label} out of range {}", predicted.len())))?;
    if p <= 0.0 {
        return Ok(CrossEntropy { nats: -PROB_FLOOR.ln(), clamped: true });
    }
    Ok(CrossEntropy { nats: -p.ln(), clamped: false })
}

/// Mean cross-entropy over a batch of predictions.
pub fn mean_cross_entropy(predicted: &[Vec<f64>], labels: &[usize]) -> Result<CrossEntropy, NnError> {
    if predicted.len() != labels.len() || predicted.is_empty() {
        return Err(NnError::Shape("predictions and labels differ in length".into()));
    }
    let mut total = 0.0;
    let mut clamped = false;
    for (p, &l) in predicted.iter().zip(labels) {
        let ce = cross_entropy(p, l)?;
        total += ce.nats;
        clamped |= ce.clamped;
    }
    Ok(CrossEntropy { nats: total / labels.len() as f64, clamped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn relu_examples() {
        let out = relu(&Tensor::vector(vec![-1.0, 2.5, 0.0]));
        assert_eq!(out.data(), &[0.0, 2.5, 0.0]);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::vector(vec![0.0, 0.0])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&Tensor::vector(vec![7.0, 7.0, 7.0])).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax(&Tensor::vector(vec![2f64.ln(), 0.0])).unwrap();
        assert!((s.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.data()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_rejects_empty() {
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(softmax_slice(&[1e308, -1e308]).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn cross_entropy_examples() {
        assert_eq!(cross_entropy(&[1.0, 0.0], 0).unwrap().nats, 0.0);
        assert!((cross_entropy(&[0.5, 0.5], 1).unwrap().nats - 2f64.ln()).abs() < 1e-15);
        let k = 7;
        let u = vec![1.0 / k as f64; k];
        assert!((cross_entropy(&u, 3).unwrap().nats - (k as f64).ln()).abs() < 1e-12);
        let zero = cross_entropy(&[1.0, 0.0], 1).unwrap();
        assert!(zero.clamped);
        assert!((zero.nats - 690.7755278982137).abs() < 1e-9);
    }

    #[test]
    fn batch_cross_entropy_is_the_mean() {
        let preds = vec![vec![0.5, 0.5], vec![0.25, 0.75]];
        let ce = mean_cross_entropy(&preds, &[0, 1]).unwrap();
        assert!((ce.nats - 0.5 * (2f64.ln() - 0.75f64.ln())).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(v in proptest::collection::vec(-30.0f64..30.0, 1..10), c in -100.0f64..100.0) {
            let a = softmax(&Tensor::vector(v.clone())).unwrap();
            let b = softmax(&Tensor::vector(v.iter().map(|x| x + c).collect())).unwrap();
            let sum: f64 = a.data().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!(*x > 0.0);
            }
        }
    }
}
