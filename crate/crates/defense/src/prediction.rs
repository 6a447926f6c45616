//! Prediction maps and detector-weighted ensembling.

use crate::{DefenseError, Result};
use rome_nn::{argmax, softmax_rows, Tensor};

/// Row-normalized predictions of all base classifiers, batched `[B, N, C]`.
/// Rows are softmax-normalized exactly once, at construction.
#[derive(Debug, Clone)]
pub struct PredictionMap {
    probs: Tensor,
}

const ROW_SUM_TOL: f64 = 1e-9;

impl PredictionMap {
    /// Builds the map from per-classifier logit batches (each `[B, C]`).
    pub fn from_logits(logits: &[Tensor]) -> Result<Self> {
        let n = logits.len();
        if n == 0 {
            return Err(DefenseError::InvalidPrediction("no classifier outputs".into()));
        }
        let batch = logits[0].shape()[0];
        let classes = logits[0].row_len();
        let mut probs = Tensor::zeros(&[batch, n, classes]);
        for (i, l) in logits.iter().enumerate() {
            if l.shape() != [batch, classes] {
                return Err(DefenseError::InvalidPrediction(format!(
                    "classifier {i} emitted {:?}, expected [{batch}, {classes}]",
                    l.shape()
                )));
            }
            let p = softmax_rows(l);
            for bi in 0..batch {
                let dst = (bi * n + i) * classes;
                probs.data_mut()[dst..dst + classes].copy_from_slice(p.row(bi));
            }
        }
        Ok(Self { probs })
    }

    /// Builds a single-sample map from explicit probability rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(DefenseError::InvalidPrediction("empty map".into()));
        }
        let classes = rows[0].len();
        let mut data = Vec::with_capacity(n * classes);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != classes {
                return Err(DefenseError::InvalidPrediction(format!(
                    "row {i} has {} classes, expected {classes}",
                    row.len()
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL || row.iter().any(|&p| !(0.0..=1.0).contains(&p)) {
                return Err(DefenseError::InvalidPrediction(format!(
                    "row {i} is not a probability vector (sum {sum})"
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            probs: Tensor::new(vec![1, n, classes], data).expect("consistent"),
        })
    }

    pub fn batch(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn models(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn classes(&self) -> usize {
        self.probs.shape()[2]
    }

    /// Backing tensor, `[B, N, C]`.
    pub fn tensor(&self) -> &Tensor {
        &self.probs
    }

    /// Probability row of classifier `model` for sample `b`.
    pub fn row(&self, b: usize, model: usize) -> &[f64] {
        let c = self.classes();
        let base = (b * self.models() + model) * c;
        &self.probs.data()[base..base + c]
    }
}

/// Norm-pooling features of one prediction map sample: per row
/// `[l1, l2, max, min]`, concatenated across rows.
pub fn lppg(map: &PredictionMap, sample: usize) -> Tensor {
    let n = map.models();
    let mut out = Vec::with_capacity(4 * n);
    for i in 0..n {
        let row = map.row(sample, i);
        let l1: f64 = row.iter().map(|v| v.abs()).sum();
        let l2: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mn = row.iter().cloned().fold(f64::INFINITY, f64::min);
        out.extend_from_slice(&[l1, l2, mx, mn]);
    }
    Tensor::from_vec(out)
}

/// Detector-weighted soft voting: weights are the softmax of the detector
/// output, the ensemble row is the weighted sum of classifier rows.
/// Returns the ensembled probabilities `[B, C]` and per-sample argmaxes.
pub fn ensemble(map: &PredictionMap, detector_probs: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (batch, n, classes) = (map.batch(), map.models(), map.classes());
    if detector_probs.shape() != [batch, n] {
        return Err(DefenseError::InvalidPrediction(format!(
            "detector output {:?} does not match a [{batch}, {n}] map",
            detector_probs.shape()
        )));
    }
    let weights = softmax_rows(detector_probs);
    let mut out = Tensor::zeros(&[batch, classes]);
    for bi in 0..batch {
        for i in 0..n {
            let w = weights.row(bi)[i];
            let row = map.row(bi, i);
            let dst = out.row_mut(bi);
            for c in 0..classes {
                dst[c] += w * row[c];
            }
        }
    }
    let picks = (0..batch).map(|bi| argmax(out.row(bi))).collect();
    Ok((out, picks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn lppg_hand_values() {
        // Row [0.1, 0.7, 0.2] -> [1.0, sqrt(0.54), 0.7, 0.1].
        let map = PredictionMap::from_rows(&[vec![0.1, 0.7, 0.2]]).unwrap();
        let f = lppg(&map, 0);
        assert_relative_eq!(f.data()[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(f.data()[1], 0.54f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(f.data()[1], 0.7348, epsilon = 1e-4);
        assert_relative_eq!(f.data()[2], 0.7, epsilon = 1e-12);
        assert_relative_eq!(f.data()[3], 0.1, epsilon = 1e-12);
    }

    #[test]
    fn lppg_uniform_row() {
        let c = 5usize;
        let map = PredictionMap::from_rows(&[vec![1.0 / c as f64; c]]).unwrap();
        let f = lppg(&map, 0);
        assert_relative_eq!(f.data()[0], 1.0, epsilon = 1e-12);
        assert_relative_eq!(f.data()[1], 1.0 / (c as f64).sqrt(), epsilon = 1e-12);
        assert_relative_eq!(f.data()[2], 1.0 / c as f64, epsilon = 1e-12);
        assert_relative_eq!(f.data()[3], 1.0 / c as f64, epsilon = 1e-12);
    }

    #[test]
    fn lppg_one_hot_row() {
        let map = PredictionMap::from_rows(&[vec![0.0, 1.0, 0.0, 0.0]]).unwrap();
        let f = lppg(&map, 0);
        assert_eq!(f.data(), &[1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn ensemble_identical_rows_ignore_weights() {
        let row = vec![0.2, 0.5, 0.3];
        let map = PredictionMap::from_rows(&[row.clone(), row.clone()]).unwrap();
        let pd = Tensor::new(vec![1, 2], vec![10.0, -3.0]).unwrap();
        let (pe, picks) = ensemble(&map, &pd).unwrap();
        for (a, b) in pe.data().iter().zip(row.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        assert_eq!(picks, vec![1]);
    }

    #[test]
    fn ensemble_uniform_detector_is_row_mean() {
        let map =
            PredictionMap::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5], vec![0.25, 0.75]])
                .unwrap();
        let pd = Tensor::new(vec![1, 4], vec![0.25; 4]).unwrap();
        let (pe, _) = ensemble(&map, &pd).unwrap();
        assert_relative_eq!(pe.data()[0], (1.0 + 0.0 + 0.5 + 0.25) / 4.0, epsilon = 1e-12);
        assert_relative_eq!(pe.data()[1], (0.0 + 1.0 + 0.5 + 0.75) / 4.0, epsilon = 1e-12);
    }

    #[test]
    fn ensemble_two_model_softmax_weights() {
        // pd = [1, 0]: weights are [e/(e+1), 1/(e+1)] ~= [0.7311, 0.2689].
        let r0 = vec![0.9, 0.1];
        let r1 = vec![0.3, 0.7];
        let map = PredictionMap::from_rows(&[r0.clone(), r1.clone()]).unwrap();
        let pd = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        let (pe, _) = ensemble(&map, &pd).unwrap();
        let e = std::f64::consts::E;
        let (w0, w1) = (e / (e + 1.0), 1.0 / (e + 1.0));
        for c in 0..2 {
            assert_relative_eq!(pe.data()[c], w0 * r0[c] + w1 * r1[c], epsilon = 1e-12);
        }
    }

    #[test]
    fn ensemble_output_is_valid_distribution_and_convex() {
        // Arbitrary maps and detector outputs: p_E is a probability vector
        // bounded per class by the extreme classifier rows, and shifting
        // the detector logits leaves the result unchanged.
        let map = PredictionMap::from_rows(&[
            vec![0.7, 0.2, 0.1],
            vec![0.1, 0.8, 0.1],
            vec![0.3, 0.3, 0.4],
        ])
        .unwrap();
        for (a, b, c) in [(0.3, -2.0, 1.7), (5.0, 5.0, 5.0), (-1.0, 0.0, 2.0)] {
            let pd = Tensor::new(vec![1, 3], vec![a, b, c]).unwrap();
            let (pe, pick) = ensemble(&map, &pd).unwrap();
            let sum: f64 = pe.data().iter().sum();
            assert_relative_eq!(sum, 1.0, epsilon = 1e-9);
            for cls in 0..3 {
                let lo = (0..3).map(|i| map.row(0, i)[cls]).fold(f64::INFINITY, f64::min);
                let hi = (0..3)
                    .map(|i| map.row(0, i)[cls])
                    .fold(f64::NEG_INFINITY, f64::max);
                assert!(pe.data()[cls] >= lo - 1e-12 && pe.data()[cls] <= hi + 1e-12);
            }
            let shifted = Tensor::new(vec![1, 3], vec![a + 7.0, b + 7.0, c + 7.0]).unwrap();
            let (pe2, pick2) = ensemble(&map, &shifted).unwrap();
            for (x, y) in pe.data().iter().zip(pe2.data()) {
                assert_relative_eq!(x, y, epsilon = 1e-12);
            }
            assert_eq!(pick, pick2);
        }
    }

    #[test]
    fn map_rejects_unnormalized_rows() {
        assert!(PredictionMap::from_rows(&[vec![0.5, 0.6]]).is_err());
        assert!(PredictionMap::from_rows(&[]).is_err());
    }

    #[test]
    fn ensemble_rejects_dimension_mismatch() {
        let map = PredictionMap::from_rows(&[vec![0.5, 0.5]]).unwrap();
        let pd = Tensor::new(vec![1, 3], vec![0.4, 0.3, 0.3]).unwrap();
        assert!(ensemble(&map, &pd).is_err());
    }
}
