//! Softmax, cross-entropy, and the fused batch helpers used by every
//! training loop.

use crate::error::{NnError, Result};
use crate::tensor::Tensor;

/// Probabilities below this floor are clamped before taking the log, so a
/// fully-confident wrong prediction yields a large finite loss instead of
/// infinity.
pub const LOG_FLOOR: f64 = 1e-12;

/// Numerically stable softmax of a vector (max-subtraction).
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    if v.is_empty() {
        return Err(NnError::EmptyInput("softmax of empty vector".into()));
    }
    let mut out = v.clone();
    softmax_slice(out.data_mut());
    Ok(out)
}

pub(crate) fn softmax_slice(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax over a `[B, C]` tensor.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let batch = out.shape()[0];
    for bi in 0..batch {
        softmax_slice(out.row_mut(bi));
    }
    out
}

/// Cross-entropy of a probability vector against an integer label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    pub value: f64,
    /// True when the target probability hit the [`LOG_FLOOR`] clamp.
    pub saturated: bool,
}

pub fn cross_entropy(probs: &Tensor, label: usize) -> Result<CrossEntropy> {
    if label >= probs.len() {
        return Err(NnError::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    let p = probs.data()[label];
    let saturated = p < LOG_FLOOR;
    Ok(CrossEntropy {
        value: -p.max(LOG_FLOOR).ln(),
        saturated,
    })
}

/// Fused softmax + mean cross-entropy over a `[B, C]` logit batch.
///
/// Returns the mean loss and dL/d(logits) (already divided by the batch
/// size), which is the upstream gradient for [`crate::Graph::backward`].
pub fn softmax_ce_grad(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let batch = logits.shape()[0];
    let classes = logits.row_len();
    if labels.len() != batch {
        return Err(NnError::InvalidArgument(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    let probs = softmax_rows(logits);
    let mut grad = probs.clone();
    let mut loss = 0.0;
    let inv = 1.0 / batch as f64;
    for bi in 0..batch {
        let label = labels[bi];
        if label >= classes {
            return Err(NnError::InvalidArgument(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        loss -= probs.row(bi)[label].max(LOG_FLOOR).ln();
        let gr = grad.row_mut(bi);
        gr[label] -= 1.0;
        gr.iter_mut().for_each(|v| *v *= inv);
    }
    Ok((loss * inv, grad))
}

/// Pulls dL/d(probabilities) back through a softmax: given the softmax
/// output `p` and upstream `g`, returns `p ⊙ (g − <g, p>)` per row.
pub fn softmax_backward(probs: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if probs.shape() != upstream.shape() {
        return Err(NnError::ShapeMismatch {
            expected: probs.shape().to_vec(),
            got: upstream.shape().to_vec(),
            context: "softmax_backward".into(),
        });
    }
    let mut out = upstream.clone();
    let batch = out.shape()[0];
    for bi in 0..batch {
        let pr = probs.row(bi);
        let gr = out.row_mut(bi);
        let dot: f64 = pr.iter().zip(gr.iter()).map(|(p, g)| p * g).sum();
        for (g, p) in gr.iter_mut().zip(pr.iter()) {
            *g = p * (*g - dot);
        }
    }
    Ok(out)
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let batch = logits.shape()[0];
    let mut hits = 0usize;
    for bi in 0..batch {
        if argmax(logits.row(bi)) == labels[bi] {
            hits += 1;
        }
    }
    hits as f64 / batch as f64
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn softmax_symmetry() {
        let p = softmax(&Tensor::from_vec(vec![0.0, 0.0])).unwrap();
        assert_relative_eq!(p.data()[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(p.data()[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn softmax_large_inputs_no_overflow() {
        let p = softmax(&Tensor::from_vec(vec![1000.0, 1000.0, 1000.0])).unwrap();
        for &v in p.data() {
            assert_relative_eq!(v, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_two_class_value() {
        // softmax([1, 0]) = [e/(e+1), 1/(e+1)], evaluated independently.
        let e = std::f64::consts::E;
        let p = softmax(&Tensor::from_vec(vec![1.0, 0.0])).unwrap();
        assert_relative_eq!(p.data()[0], e / (e + 1.0), epsilon = 1e-12);
        assert_relative_eq!(p.data()[1], 1.0 / (e + 1.0), epsilon = 1e-12);
        assert_relative_eq!(p.data()[0], 0.7311, epsilon = 1e-4);
    }

    #[test]
    fn softmax_shift_invariance() {
        let a = softmax(&Tensor::from_vec(vec![0.3, -1.2, 2.0])).unwrap();
        let b = softmax(&Tensor::from_vec(vec![5.3, 3.8, 7.0])).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_empty_is_error() {
        assert!(softmax(&Tensor::from_vec(vec![])).is_err());
    }

    #[test]
    fn ce_one_hot_is_zero() {
        let ce = cross_entropy(&Tensor::from_vec(vec![0.0, 1.0]), 1).unwrap();
        assert_eq!(ce.value, 0.0);
        assert!(!ce.saturated);
    }

    #[test]
    fn ce_uniform_ten_classes() {
        let probs = Tensor::from_vec(vec![0.1; 10]);
        let ce = cross_entropy(&probs, 3).unwrap();
        assert_relative_eq!(ce.value, 10.0_f64.ln(), epsilon = 1e-12);
    }

    #[test]
    fn ce_quarter_three_quarters() {
        // -ln(0.75) computed independently.
        let ce = cross_entropy(&Tensor::from_vec(vec![0.25, 0.75]), 1).unwrap();
        assert_relative_eq!(ce.value, -(0.75_f64.ln()), epsilon = 1e-12);
        assert_relative_eq!(ce.value, 0.2877, epsilon = 1e-4);
    }

    #[test]
    fn ce_zero_probability_saturates() {
        let ce = cross_entropy(&Tensor::from_vec(vec![1.0, 0.0]), 1).unwrap();
        assert!(ce.saturated);
        assert_relative_eq!(ce.value, -(LOG_FLOOR.ln()), epsilon = 1e-9);
    }

    #[test]
    fn ce_label_out_of_range() {
        assert!(cross_entropy(&Tensor::from_vec(vec![1.0]), 3).is_err());
    }
}
