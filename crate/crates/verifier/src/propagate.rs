//! Forward bound propagation over a computation graph.
//!
//! Convolutions and poolings are materialized as explicit affine matrices
//! over the flattened node input; one sign-split composition rule then
//! covers every linear op. ReLU nodes concretize their parent's running
//! bounds to obtain pre-activation intervals before relaxing neuron-wise.

use crate::bounds::{compose_affine, concretize, LinearBoundMap};
use crate::region::InputRegion;
use crate::relax::relax_relu;
use crate::{Result, VerifierError};
use rome_nn::graph::{Graph, Op};
use rome_nn::Tensor;

/// Propagates bounds to the output node of `graph` over `region`.
pub fn propagate(graph: &Graph, region: &InputRegion) -> Result<LinearBoundMap> {
    if graph.inputs.len() != 1 {
        return Err(VerifierError::InputCount(graph.inputs.len()));
    }
    let input_dim: usize = graph.nodes[graph.inputs[0]].out_shape.iter().product();
    if input_dim != region.dim() {
        return Err(VerifierError::DimensionMismatch(format!(
            "graph input dim {input_dim} vs region dim {}",
            region.dim()
        )));
    }

    let mut maps: Vec<Option<LinearBoundMap>> = vec![None; graph.nodes.len()];
    for node in &graph.nodes {
        let map = match &node.op {
            Op::Input { .. } => LinearBoundMap::identity(input_dim),
            Op::Flatten | Op::Reshape { .. } => parent_map(&maps, node.parents[0])?.clone(),
            Op::Linear { weight, bias } => {
                compose_affine(weight, bias, parent_map(&maps, node.parents[0])?)?
            }
            Op::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => {
                let in_shape = &graph.nodes[node.parents[0]].out_shape;
                let (a, c) = conv_as_affine(weight, bias, *stride, *padding, in_shape);
                compose_affine(&a, &c, parent_map(&maps, node.parents[0])?)?
            }
            Op::AvgPool2d { kernel } => {
                let in_shape = &graph.nodes[node.parents[0]].out_shape;
                let (a, c) = avg_pool_as_affine(*kernel, in_shape);
                compose_affine(&a, &c, parent_map(&maps, node.parents[0])?)?
            }
            Op::GlobalAvgPool => {
                let in_shape = &graph.nodes[node.parents[0]].out_shape;
                let (a, c) = global_pool_as_affine(in_shape);
                compose_affine(&a, &c, parent_map(&maps, node.parents[0])?)?
            }
            Op::Add => {
                let a = parent_map(&maps, node.parents[0])?;
                let b = parent_map(&maps, node.parents[1])?;
                a.sum(b)?
            }
            Op::Relu => {
                let parent = parent_map(&maps, node.parents[0])?;
                let (pre_upper, pre_lower) = concretize(parent, region)?;
                relax_layer(parent, &pre_lower, &pre_upper)?
            }
            other => return Err(VerifierError::UnsupportedOp(other.name().into())),
        };
        maps[node.id] = Some(map);
    }
    Ok(maps[graph.output].take().expect("output map computed"))
}

fn parent_map<'a>(
    maps: &'a [Option<LinearBoundMap>],
    id: usize,
) -> Result<&'a LinearBoundMap> {
    maps[id]
        .as_ref()
        .ok_or_else(|| VerifierError::DimensionMismatch(format!("no bounds at node {id}")))
}

/// Applies per-neuron ReLU relaxations to the parent bounds. Slopes are
/// nonnegative, so the upper output follows the parent's upper map and the
/// lower output the parent's lower map.
fn relax_layer(
    parent: &LinearBoundMap,
    pre_lower: &[f64],
    pre_upper: &[f64],
) -> Result<LinearBoundMap> {
    let d = parent.output_dim();
    let d1 = parent.input_dim();
    let mut out = LinearBoundMap {
        upper_w: Tensor::zeros(&[d, d1]),
        upper_b: Tensor::zeros(&[d]),
        lower_w: Tensor::zeros(&[d, d1]),
        lower_b: Tensor::zeros(&[d]),
    };
    for i in 0..d {
        let r = relax_relu(pre_lower[i], pre_upper[i])?;
        let urow = out.upper_w.row_mut(i);
        for (dst, &s) in urow.iter_mut().zip(parent.upper_row(i)) {
            *dst = r.upper_slope * s;
        }
        out.upper_b.data_mut()[i] =
            r.upper_slope * parent.upper_b.data()[i] + r.upper_intercept;
        let lrow = out.lower_w.row_mut(i);
        for (dst, &s) in lrow.iter_mut().zip(parent.lower_row(i)) {
            *dst = r.lower_slope * s;
        }
        out.lower_b.data_mut()[i] =
            r.lower_slope * parent.lower_b.data()[i] + r.lower_intercept;
    }
    Ok(out)
}

fn conv_as_affine(
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
    in_shape: &[usize],
) -> (Tensor, Tensor) {
    let (ci, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (co, k) = (weight.shape()[0], weight.shape()[2]);
    let ho = (h + 2 * padding - k) / stride + 1;
    let wo = (w + 2 * padding - k) / stride + 1;
    let (out_dim, in_dim) = (co * ho * wo, ci * h * w);
    let mut a = Tensor::zeros(&[out_dim, in_dim]);
    let mut c = Tensor::zeros(&[out_dim]);
    for oc in 0..co {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (oc * ho + oy) * wo + ox;
                c.data_mut()[row] = bias.data()[oc];
                for ic in 0..ci {
                    for ky in 0..k {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let col = (ic * h + iy as usize) * w + ix as usize;
                            a.row_mut(row)[col] = weight.data()[((oc * ci + ic) * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
    (a, c)
}

fn avg_pool_as_affine(kernel: usize, in_shape: &[usize]) -> (Tensor, Tensor) {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (ho, wo) = (h / kernel, w / kernel);
    let (out_dim, in_dim) = (c * ho * wo, c * h * w);
    let inv = 1.0 / (kernel * kernel) as f64;
    let mut a = Tensor::zeros(&[out_dim, in_dim]);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = (ch * ho + oy) * wo + ox;
                for dy in 0..kernel {
                    for dx in 0..kernel {
                        let col = (ch * h + oy * kernel + dy) * w + ox * kernel + dx;
                        a.row_mut(row)[col] = inv;
                    }
                }
            }
        }
    }
    (a, Tensor::zeros(&[out_dim]))
}

fn global_pool_as_affine(in_shape: &[usize]) -> (Tensor, Tensor) {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let inv = 1.0 / (h * w) as f64;
    let mut a = Tensor::zeros(&[c, c * h * w]);
    for ch in 0..c {
        for j in 0..h * w {
            a.row_mut(ch)[ch * h * w + j] = inv;
        }
    }
    (a, Tensor::zeros(&[c]))
}
