//! Adam optimizer and cosine learning-rate annealing.

use crate::error::{NnError, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

/// Adam state: one pair of moment tensors per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(graph: &Graph, lr: f64) -> Self {
        let shapes: Vec<Vec<usize>> = graph
            .param_tensors()
            .iter()
            .map(|t| t.shape().to_vec())
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s)).collect(),
        }
    }

    /// Applies one Adam update in place. `params` and `grads` must align
    /// with the parameter order the state was created from.
    pub fn apply(&mut self, params: &mut [&mut Tensor], grads: &[&Tensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(NnError::InvalidArgument(format!(
                "adam state tracks {} tensors, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape() != g.shape() {
                return Err(NnError::ShapeMismatch {
                    expected: p.shape().to_vec(),
                    got: g.shape().to_vec(),
                    context: "adam".into(),
                });
            }
            for ((pv, gv), (mv, vv)) in p
                .data_mut()
                .iter_mut()
                .zip(g.data().iter())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// One Adam step on a graph's parameters given gradients from `backward`.
pub fn adam_step(graph: &mut Graph, grads: &[&Tensor], state: &mut AdamState) -> Result<()> {
    let mut params = graph.param_tensors_mut();
    state.apply(&mut params, grads)
}

/// Cosine annealing: `lr0 * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(step: u64, total_steps: u64, lr0: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(NnError::InvalidArgument(
            "cosine schedule over zero steps".into(),
        ));
    }
    let frac = (step.min(total_steps)) as f64 / total_steps as f64;
    Ok(lr0 * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_graph(w0: f64) -> Graph {
        let mut g = Graph::new();
        let x = g.input(&[1]);
        g.push(
            crate::graph::Op::Linear {
                weight: Tensor::new(vec![1, 1], vec![w0]).unwrap(),
                bias: Tensor::zeros(&[1]),
            },
            vec![x],
        )
        .unwrap();
        g
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut g = scalar_graph(0.7);
        let mut state = AdamState::new(&g, 0.1);
        let gw = Tensor::zeros(&[1, 1]);
        let gb = Tensor::zeros(&[1]);
        adam_step(&mut g, &[&gw, &gb], &mut state).unwrap();
        assert_eq!(g.param_tensors()[0].data()[0], 0.7);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_against_gradient_sign() {
        let mut g = scalar_graph(0.0);
        let mut state = AdamState::new(&g, 0.1);
        let gw = Tensor::new(vec![1, 1], vec![2.5]).unwrap();
        let gb = Tensor::zeros(&[1]);
        adam_step(&mut g, &[&gw, &gb], &mut state).unwrap();
        assert!(g.param_tensors()[0].data()[0] < 0.0);
    }

    #[test]
    fn adam_converges_on_scalar_quadratic() {
        // f(w) = (w - 5)^2, grad = 2(w - 5). Compare against an
        // independently-run scalar recursion of the same update rule.
        let mut g = scalar_graph(0.0);
        let mut state = AdamState::new(&g, 0.1);

        let (mut w_ref, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.1);

        for t in 1..=100u64 {
            let w = g.param_tensors()[0].data()[0];
            let grad = 2.0 * (w - 5.0);
            let gw = Tensor::new(vec![1, 1], vec![grad]).unwrap();
            let gb = Tensor::zeros(&[1]);
            adam_step(&mut g, &[&gw, &gb], &mut state).unwrap();

            let grad_ref = 2.0 * (w_ref - 5.0);
            m = b1 * m + (1.0 - b1) * grad_ref;
            v = b2 * v + (1.0 - b2) * grad_ref * grad_ref;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            w_ref -= lr * mh / (vh.sqrt() + eps);
        }
        let w = g.param_tensors()[0].data()[0];
        assert_relative_eq!(w, w_ref, epsilon = 1e-12);
        assert!((w - 5.0).abs() < 0.5, "w = {w}");
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut g = scalar_graph(0.0);
        let mut state = AdamState::new(&g, 0.1);
        let bad = Tensor::zeros(&[2, 2]);
        let gb = Tensor::zeros(&[1]);
        assert!(adam_step(&mut g, &[&bad, &gb], &mut state).is_err());
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_relative_eq!(cosine_lr(0, 10, 0.5).unwrap(), 0.5, epsilon = 1e-12);
        assert_relative_eq!(cosine_lr(10, 10, 0.5).unwrap(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(cosine_lr(5, 10, 0.5).unwrap(), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn cosine_is_monotone_non_increasing() {
        let mut prev = f64::INFINITY;
        for s in 0..=50 {
            let lr = cosine_lr(s, 50, 1.0).unwrap();
            assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }

    #[test]
    fn cosine_zero_total_is_error() {
        assert!(cosine_lr(0, 0, 1.0).is_err());
    }
}
