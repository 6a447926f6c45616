//! Affine upper/lower bounds of a node in the flattened network input.

use crate::region::InputRegion;
use crate::{Result, VerifierError};
use rome_nn::Tensor;

/// `lower_w x + lower_b <= h(x) <= upper_w x + upper_b` over the region.
#[derive(Debug, Clone)]
pub struct LinearBoundMap {
    /// `[d, d1]`
    pub upper_w: Tensor,
    /// `[d]`
    pub upper_b: Tensor,
    pub lower_w: Tensor,
    pub lower_b: Tensor,
}

impl LinearBoundMap {
    /// Exact bounds of the input node itself.
    pub fn identity(dim: usize) -> Self {
        Self {
            upper_w: Tensor::eye(dim),
            upper_b: Tensor::zeros(&[dim]),
            lower_w: Tensor::eye(dim),
            lower_b: Tensor::zeros(&[dim]),
        }
    }

    /// Exact bounds for an affine node applied directly to the input.
    pub fn exact_affine(weight: Tensor, bias: Tensor) -> Self {
        Self {
            upper_w: weight.clone(),
            upper_b: bias.clone(),
            lower_w: weight,
            lower_b: bias,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.upper_w.shape()[0]
    }

    pub fn input_dim(&self) -> usize {
        self.upper_w.shape()[1]
    }

    pub fn upper_row(&self, i: usize) -> &[f64] {
        self.upper_w.row(i)
    }

    pub fn lower_row(&self, i: usize) -> &[f64] {
        self.lower_w.row(i)
    }

    /// Evaluates the upper affine map at a concrete input.
    pub fn eval_upper(&self, x: &[f64]) -> Vec<f64> {
        (0..self.output_dim())
            .map(|i| {
                dot(self.upper_row(i), x) + self.upper_b.data()[i]
            })
            .collect()
    }

    pub fn eval_lower(&self, x: &[f64]) -> Vec<f64> {
        (0..self.output_dim())
            .map(|i| {
                dot(self.lower_row(i), x) + self.lower_b.data()[i]
            })
            .collect()
    }

    /// Elementwise sum of two maps (residual connection).
    pub fn sum(&self, other: &LinearBoundMap) -> Result<LinearBoundMap> {
        if self.upper_w.shape() != other.upper_w.shape() {
            return Err(VerifierError::DimensionMismatch(format!(
                "cannot add bound maps of shapes {:?} and {:?}",
                self.upper_w.shape(),
                other.upper_w.shape()
            )));
        }
        Ok(LinearBoundMap {
            upper_w: self.upper_w.add(&other.upper_w)?,
            upper_b: self.upper_b.add(&other.upper_b)?,
            lower_w: self.lower_w.add(&other.lower_w)?,
            lower_b: self.lower_b.add(&other.lower_b)?,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Worst-case bounds of the map over the region: per row,
/// `max = rho * ||w_up||_q + w_up . center + b_up` and
/// `min = -rho * ||w_lo||_q + w_lo . center + b_lo`.
pub fn concretize(map: &LinearBoundMap, region: &InputRegion) -> Result<(Vec<f64>, Vec<f64>)> {
    if map.input_dim() != region.dim() {
        return Err(VerifierError::DimensionMismatch(format!(
            "map input dim {} vs region dim {}",
            map.input_dim(),
            region.dim()
        )));
    }
    let q = region.norm.dual();
    let center = region.center.data();
    let mut upper = Vec::with_capacity(map.output_dim());
    let mut lower = Vec::with_capacity(map.output_dim());
    for i in 0..map.output_dim() {
        let wu = map.upper_row(i);
        let wl = map.lower_row(i);
        upper.push(region.radius * q.vector_norm(wu) + dot(wu, center) + map.upper_b.data()[i]);
        lower.push(-region.radius * q.vector_norm(wl) + dot(wl, center) + map.lower_b.data()[i]);
    }
    Ok((upper, lower))
}

/// Composes an exact affine layer `y = A x_parent + c` with the parent's
/// two-sided bounds, splitting `A` by sign.
pub fn compose_affine(
    weight: &Tensor,
    bias: &Tensor,
    parent: &LinearBoundMap,
) -> Result<LinearBoundMap> {
    let (out, inp) = (weight.shape()[0], weight.shape()[1]);
    if inp != parent.output_dim() {
        return Err(VerifierError::DimensionMismatch(format!(
            "affine layer expects {inp} inputs, parent provides {}",
            parent.output_dim()
        )));
    }
    let d1 = parent.input_dim();
    let mut upper_w = Tensor::zeros(&[out, d1]);
    let mut upper_b = Tensor::zeros(&[out]);
    let mut lower_w = Tensor::zeros(&[out, d1]);
    let mut lower_b = Tensor::zeros(&[out]);

    for i in 0..out {
        let arow = &weight.data()[i * inp..(i + 1) * inp];
        let mut ub = bias.data()[i];
        let mut lb = bias.data()[i];
        {
            let urow = upper_w.row_mut(i);
            for (j, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let src = if a > 0.0 {
                    parent.upper_row(j)
                } else {
                    parent.lower_row(j)
                };
                for (dst, &s) in urow.iter_mut().zip(src.iter()) {
                    *dst += a * s;
                }
                ub += a * if a > 0.0 {
                    parent.upper_b.data()[j]
                } else {
                    parent.lower_b.data()[j]
                };
            }
        }
        {
            let lrow = lower_w.row_mut(i);
            for (j, &a) in arow.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let src = if a > 0.0 {
                    parent.lower_row(j)
                } else {
                    parent.upper_row(j)
                };
                for (dst, &s) in lrow.iter_mut().zip(src.iter()) {
                    *dst += a * s;
                }
                lb += a * if a > 0.0 {
                    parent.lower_b.data()[j]
                } else {
                    parent.upper_b.data()[j]
                };
            }
        }
        upper_b.data_mut()[i] = ub;
        lower_b.data_mut()[i] = lb;
    }
    Ok(LinearBoundMap {
        upper_w,
        upper_b,
        lower_w,
        lower_b,
    })
}
