//! Computation graphs: a DAG of named nodes, executed batch-first, with
//! reverse-mode differentiation.
//!
//! A [`Graph`] is built once, trained (exclusive access), then frozen and
//! shared read-only. `forward` returns a [`Tape`] holding every node value;
//! `backward` consumes a tape, so gradients can never be requested for a
//! forward pass that did not happen.

use crate::error::{NnError, Result};
use crate::tensor::Tensor;
use rand::Rng;

pub type NodeId = usize;

/// Operation kinds. Parameters live inside the variant that owns them.
#[derive(Debug, Clone)]
pub enum Op {
    /// Graph input with a declared per-sample shape.
    Input { shape: Vec<usize> },
    /// Affine map `y = x Wᵀ + b` with `weight: [out, in]`, `bias: [out]`.
    Linear { weight: Tensor, bias: Tensor },
    /// 2-D convolution, `weight: [c_out, c_in, k, k]`, zero padding.
    Conv2d {
        weight: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    Relu,
    /// Elementwise square.
    Square,
    /// Elementwise sum of two parents (residual connection).
    Add,
    /// Non-overlapping average pooling with square kernel (stride = kernel).
    AvgPool2d { kernel: usize },
    /// `[C, H, W] -> [C]` mean over the spatial axes.
    GlobalAvgPool,
    /// `[..] -> [prod]`.
    Flatten,
    /// Per-sample reshape to a fixed shape.
    Reshape { shape: Vec<usize> },
    /// Concatenation of 1-d parents along the feature axis.
    Concat,
    /// Parent 0: `[C, H, W]` features; parent 1: `[C]` per-channel gains.
    ChannelScale,
    /// Per-sample min-max normalization of a vector to [0, 1].
    /// A constant vector maps to all-ones.
    MinMaxNorm,
    /// Scales a per-sample vector so its squared l2 norm equals `target`.
    PowerNormalize { target: f64 },
    /// Parent 0: vector; parent 1: `[1]` radius. Projects onto the l2 ball.
    ProjectL2Ball,
    /// `[N, C] -> [N, 4]`: per row `[l1, l2, max, min]`.
    RowLpPool,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu => "relu",
            Op::Square => "square",
            Op::Add => "add",
            Op::AvgPool2d { .. } => "avg_pool2d",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Flatten => "flatten",
            Op::Reshape { .. } => "reshape",
            Op::Concat => "concat",
            Op::ChannelScale => "channel_scale",
            Op::MinMaxNorm => "min_max_norm",
            Op::PowerNormalize { .. } => "power_normalize",
            Op::ProjectL2Ball => "project_l2_ball",
            Op::RowLpPool => "row_lp_pool",
        }
    }

    /// Trainable parameter tensors of this op, in a fixed order.
    pub fn params(&self) -> Vec<&Tensor> {
        match self {
            Op::Linear { weight, bias } | Op::Conv2d { weight, bias, .. } => vec![weight, bias],
            _ => Vec::new(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Op::Linear { weight, bias } | Op::Conv2d { weight, bias, .. } => vec![weight, bias],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Node {
    pub id: NodeId,
    pub op: Op,
    pub parents: Vec<NodeId>,
    /// Per-sample output shape, fixed at construction.
    pub out_shape: Vec<usize>,
}

/// Directed acyclic computation graph. Nodes are stored in topological
/// order by construction: a node may only reference earlier nodes.
#[derive(Debug, Clone)]
pub struct Graph {
    pub nodes: Vec<Node>,
    pub inputs: Vec<NodeId>,
    pub output: NodeId,
}

/// All node values from one forward pass (batch-first tensors).
#[derive(Debug)]
pub struct Tape {
    values: Vec<Tensor>,
    output: NodeId,
}

impl Tape {
    pub fn output(&self) -> &Tensor {
        &self.values[self.output]
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.values[id]
    }

    pub fn batch(&self) -> usize {
        self.values[self.output].shape()[0]
    }
}

/// Gradients from one backward pass.
#[derive(Debug)]
pub struct Gradients {
    /// `param_grads[node]` aligns with `graph.nodes[node].op.params()`.
    pub param_grads: Vec<Vec<Tensor>>,
    /// One gradient per graph input, in `graph.inputs` order.
    pub input_grads: Vec<Tensor>,
}

impl Gradients {
    /// Flattened view aligned with [`Graph::param_tensors`].
    pub fn flat(&self) -> Vec<&Tensor> {
        self.param_grads.iter().flatten().collect()
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            inputs: Vec::new(),
            output: 0,
        }
    }

    /// Appends a node, inferring its per-sample output shape.
    pub fn push(&mut self, op: Op, parents: Vec<NodeId>) -> Result<NodeId> {
        for &p in &parents {
            if p >= self.nodes.len() {
                return Err(NnError::InvalidGraph(format!(
                    "parent {p} does not precede node {}",
                    self.nodes.len()
                )));
            }
        }
        let out_shape = self.infer_shape(&op, &parents)?;
        let id = self.nodes.len();
        if let Op::Input { .. } = op {
            self.inputs.push(id);
        }
        self.nodes.push(Node {
            id,
            op,
            parents,
            out_shape,
        });
        self.output = id;
        Ok(id)
    }

    fn shape_of(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].out_shape
    }

    fn infer_shape(&self, op: &Op, parents: &[NodeId]) -> Result<Vec<usize>> {
        let arity_err = |want: usize| {
            Err(NnError::InvalidGraph(format!(
                "{} expects {want} parent(s), got {}",
                op.name(),
                parents.len()
            )))
        };
        match op {
            Op::Input { shape } => {
                if !parents.is_empty() {
                    return arity_err(0);
                }
                Ok(shape.clone())
            }
            Op::Linear { weight, bias } => {
                if parents.len() != 1 {
                    return arity_err(1);
                }
                let ps = self.shape_of(parents[0]);
                let (out, inp) = (weight.shape()[0], weight.shape()[1]);
                if ps != [inp] || bias.shape() != [out] {
                    return Err(NnError::ShapeMismatch {
                        expected: vec![inp],
                        got: ps.to_vec(),
                        context: "linear".into(),
                    });
                }
                Ok(vec![out])
            }
            Op::Conv2d {
                weight,
                stride,
                padding,
                ..
            } => {
                if parents.len() != 1 {
                    return arity_err(1);
                }
                let ps = self.shape_of(parents[0]).to_vec();
                let (co, ci, k) = (weight.shape()[0], weight.shape()[1], weight.shape()[2]);
                if ps.len() != 3 || ps[0] != ci {
                    return Err(NnError::ShapeMismatch {
                        expected: vec![ci, 0, 0],
                        got: ps,
                        context: "conv2d input".into(),
                    });
                }
                let (h, w) = (ps[1], ps[2]);
                if h + 2 * padding < k || w + 2 * padding < k {
                    return Err(NnError::InvalidGraph("conv kernel larger than input".into()));
                }
                let ho = (h + 2 * padding - k) / stride + 1;
                let wo = (w + 2 * padding - k) / stride + 1;
                Ok(vec![co, ho, wo])
            }
            Op::Relu | Op::Square => {
                if parents.len() != 1 {
                    return arity_err(1);
                }
                Ok(self.shape_of(parents[0]).to_vec())
            }
            Op::Add => {
                if parents.len() != 2 {
                    return arity_err(2);
                }
                let a = self.shape_of(parents[0]);
                let b = self.shape_of(parents[1]);
                if a != b {
                    return Err(NnError::ShapeMismatch {
                        expected: a.to_vec(),
                        got: b.to_vec(),
                        context: "add".into(),
                    });
                }
                Ok(a.to_vec())
            }
            Op::AvgPool2d { kernel } => {
                if parents.len() != 1 {
                    return arity_err(1);
                }
                let ps = self.shape_of(parents[0]).to_vec();
                if ps.len() != 3 || ps[1] % kernel != 0 || ps[2] % kernel != 0 {
                    return Err(NnError::InvalidGraph(format!(
                        "avg_pool2d kernel {kernel} does not tile {ps:?}"
                    )));
                }
                Ok(vec![ps[0], ps[1] / kernel, ps[2] / kernel])
            }
            Op::GlobalAvgPool => {
                if parents.len() != 1 {
                    return arity_err(1);
                }
                let ps = self.shape_of(parents[0]).to_vec();
                if ps.len() != 3 {
                    return Err(NnError::InvalidGraph("global_avg_pool needs [C,H,W]".into()));
                }
                Ok(vec![ps[0]])
            }
            Op::Flatten => {
                if parents.len() != 1 {
                    return arity_err(1);
                }
                Ok(vec![self.shape_of(parents[0]).iter().product()])
            }
            Op::Reshape { shape } => {
                if parents.len() != 1 {
                    return arity_err(1);
                }
                let have: usize = self.shape_of(parents[0]).iter().product();
                let want: usize = shape.iter().product();
                if have != want {
                    return Err(NnError::ShapeMismatch {
                        expected: shape.clone(),
                        got: self.shape_of(parents[0]).to_vec(),
                        context: "reshape".into(),
                    });
                }
                Ok(shape.clone())
            }
            Op::Concat => {
                if parents.is_empty() {
                    return Err(NnError::InvalidGraph("concat needs parents".into()));
                }
                let mut total = 0;
                for &p in parents {
                    let ps = self.shape_of(p);
                    if ps.len() != 1 {
                        return Err(NnError::InvalidGraph("concat expects vectors".into()));
                    }
                    total += ps[0];
                }
                Ok(vec![total])
            }
            Op::ChannelScale => {
                if parents.len() != 2 {
                    return arity_err(2);
                }
                let f = self.shape_of(parents[0]).to_vec();
                let s = self.shape_of(parents[1]);
                if f.len() != 3 || s != [f[0]] {
                    return Err(NnError::ShapeMismatch {
                        expected: vec![f[0]],
                        got: s.to_vec(),
                        context: "channel_scale".into(),
                    });
                }
                Ok(f)
            }
            Op::MinMaxNorm | Op::PowerNormalize { .. } => {
                if parents.len() != 1 {
                    return arity_err(1);
                }
                let ps = self.shape_of(parents[0]).to_vec();
                if ps.len() != 1 {
                    return Err(NnError::InvalidGraph(format!(
                        "{} expects a vector",
                        op.name()
                    )));
                }
                Ok(ps)
            }
            Op::ProjectL2Ball => {
                if parents.len() != 2 {
                    return arity_err(2);
                }
                let v = self.shape_of(parents[0]).to_vec();
                let r = self.shape_of(parents[1]);
                if v.len() != 1 || r != [1] {
                    return Err(NnError::InvalidGraph(
                        "project_l2_ball expects (vector, [1] radius)".into(),
                    ));
                }
                Ok(v)
            }
            Op::RowLpPool => {
                if parents.len() != 1 {
                    return arity_err(1);
                }
                let ps = self.shape_of(parents[0]).to_vec();
                if ps.len() != 2 {
                    return Err(NnError::InvalidGraph("row_lp_pool expects [N,C]".into()));
                }
                Ok(vec![ps[0], 4])
            }
        }
    }

    // ----- builder conveniences -------------------------------------------

    pub fn input(&mut self, shape: &[usize]) -> NodeId {
        self.push(
            Op::Input {
                shape: shape.to_vec(),
            },
            vec![],
        )
        .expect("input node is always valid")
    }

    /// Linear layer with He-uniform fan-in initialization.
    pub fn linear(&mut self, parent: NodeId, out: usize, rng: &mut impl Rng) -> Result<NodeId> {
        let inp = match self.shape_of(parent) {
            [d] => *d,
            other => {
                return Err(NnError::InvalidGraph(format!(
                    "linear parent must be a vector, got {other:?}"
                )))
            }
        };
        let weight = he_uniform(&[out, inp], inp, rng);
        let bias = bias_uniform(out, inp, rng);
        self.push(Op::Linear { weight, bias }, vec![parent])
    }

    pub fn conv2d(
        &mut self,
        parent: NodeId,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Result<NodeId> {
        let ps = self.shape_of(parent).to_vec();
        if ps.len() != 3 {
            return Err(NnError::InvalidGraph("conv2d parent must be [C,H,W]".into()));
        }
        let ci = ps[0];
        let fan_in = ci * kernel * kernel;
        let weight = he_uniform(&[out_ch, ci, kernel, kernel], fan_in, rng);
        let bias = bias_uniform(out_ch, fan_in, rng);
        self.push(
            Op::Conv2d {
                weight,
                bias,
                stride,
                padding,
            },
            vec![parent],
        )
    }

    pub fn relu(&mut self, parent: NodeId) -> Result<NodeId> {
        self.push(Op::Relu, vec![parent])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn avg_pool2d(&mut self, parent: NodeId, kernel: usize) -> Result<NodeId> {
        self.push(Op::AvgPool2d { kernel }, vec![parent])
    }

    pub fn flatten(&mut self, parent: NodeId) -> Result<NodeId> {
        self.push(Op::Flatten, vec![parent])
    }

    pub fn reshape(&mut self, parent: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(
            Op::Reshape {
                shape: shape.to_vec(),
            },
            vec![parent],
        )
    }

    pub fn set_output(&mut self, id: NodeId) -> Result<()> {
        if id >= self.nodes.len() {
            return Err(NnError::InvalidGraph(format!("output node {id} missing")));
        }
        self.output = id;
        Ok(())
    }

    // ----- parameter access -----------------------------------------------

    pub fn param_tensors(&self) -> Vec<&Tensor> {
        self.nodes.iter().flat_map(|n| n.op.params()).collect()
    }

    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.nodes
            .iter_mut()
            .flat_map(|n| n.op.params_mut())
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.param_tensors().iter().map(|t| t.len()).sum()
    }

    /// Per-sample shape of the output node.
    pub fn output_shape(&self) -> &[usize] {
        &self.nodes[self.output].out_shape
    }

    /// Per-sample shapes of the declared inputs.
    pub fn input_shapes(&self) -> Vec<&[usize]> {
        self.inputs
            .iter()
            .map(|&id| self.nodes[id].out_shape.as_slice())
            .collect()
    }

    // ----- execution --------------------------------------------------------

    /// Runs the graph on batch-first inputs (one tensor per declared input)
    /// and caches every node value for a later backward pass.
    pub fn forward(&self, inputs: &[Tensor]) -> Result<Tape> {
        if inputs.len() != self.inputs.len() {
            return Err(NnError::InvalidArgument(format!(
                "graph declares {} input(s), got {}",
                self.inputs.len(),
                inputs.len()
            )));
        }
        let batch = inputs
            .first()
            .map(|t| t.shape()[0])
            .ok_or_else(|| NnError::EmptyInput("graph has no inputs".into()))?;
        for (slot, t) in inputs.iter().enumerate() {
            let want = &self.nodes[self.inputs[slot]].out_shape;
            if t.shape().first() != Some(&batch) || &t.shape()[1..] != want.as_slice() {
                return Err(NnError::ShapeMismatch {
                    expected: want.clone(),
                    got: t.shape().to_vec(),
                    context: format!("graph input {slot}"),
                });
            }
        }

        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut next_input = 0;
        for node in &self.nodes {
            let value = match &node.op {
                Op::Input { .. } => {
                    let v = inputs[next_input].clone();
                    next_input += 1;
                    v
                }
                op => {
                    let parents: Vec<&Tensor> =
                        node.parents.iter().map(|&p| &values[p]).collect();
                    kernels::forward(op, &parents, batch)?
                }
            };
            if !value.all_finite() {
                return Err(NnError::NonFinite {
                    node: node.id,
                    op: node.op.name().into(),
                });
            }
            values.push(value);
        }
        Ok(Tape {
            values,
            output: self.output,
        })
    }

    /// Reverse-mode pass. `upstream` is dL/d(output), batched like the
    /// output. Returns parameter gradients and gradients w.r.t. every
    /// graph input.
    pub fn backward(&self, tape: &Tape, upstream: &Tensor) -> Result<Gradients> {
        let out_val = tape.value(self.output);
        if upstream.shape() != out_val.shape() {
            return Err(NnError::ShapeMismatch {
                expected: out_val.shape().to_vec(),
                got: upstream.shape().to_vec(),
                context: "upstream gradient".into(),
            });
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[self.output] = Some(upstream.clone());
        let mut param_grads: Vec<Vec<Tensor>> = vec![Vec::new(); self.nodes.len()];

        for node in self.nodes.iter().rev() {
            let Some(gout) = grads[node.id].take() else {
                continue;
            };
            if let Op::Input { .. } = node.op {
                grads[node.id] = Some(gout);
                continue;
            }
            let parents: Vec<&Tensor> = node.parents.iter().map(|&p| tape.value(p)).collect();
            let (pgrads, wgrads) =
                kernels::backward(&node.op, &parents, tape.value(node.id), &gout)?;
            param_grads[node.id] = wgrads;
            for (&pid, pg) in node.parents.iter().zip(pgrads.into_iter()) {
                match &mut grads[pid] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot => *slot = Some(pg),
                }
            }
        }

        let input_grads = self
            .inputs
            .iter()
            .map(|&id| {
                grads[id].take().unwrap_or_else(|| {
                    let mut shape = vec![tape.batch()];
                    shape.extend_from_slice(&self.nodes[id].out_shape);
                    Tensor::zeros(&shape)
                })
            })
            .collect();

        Ok(Gradients {
            param_grads,
            input_grads,
        })
    }
}

/// He-style uniform init: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let limit = (6.0 / fan_in.max(1) as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data = (0..numel).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape/product consistent")
}

/// Bias init: U(-1/sqrt(fan_in), +1/sqrt(fan_in)). A nonzero bias keeps
/// degenerate inputs (an all-zero image) away from zero activations.
fn bias_uniform(out: usize, fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let limit = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = (0..out).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(vec![out], data).expect("shape/product consistent")
}

mod kernels {
    use super::Op;
    use crate::error::{NnError, Result};
    use crate::tensor::Tensor;

    pub fn forward(op: &Op, parents: &[&Tensor], batch: usize) -> Result<Tensor> {
        match op {
            Op::Input { .. } => unreachable!("inputs handled by the executor"),
            Op::Linear { weight, bias } => linear_fwd(parents[0], weight, bias),
            Op::Conv2d {
                weight,
                bias,
                stride,
                padding,
            } => conv2d_fwd(parents[0], weight, bias, *stride, *padding),
            Op::Relu => Ok(parents[0].map(|v| v.max(0.0))),
            Op::Square => Ok(parents[0].map(|v| v * v)),
            Op::Add => parents[0].add(parents[1]),
            Op::AvgPool2d { kernel } => avg_pool_fwd(parents[0], *kernel),
            Op::GlobalAvgPool => global_avg_pool_fwd(parents[0]),
            Op::Flatten => {
                let d = parents[0].row_len();
                parents[0].reshape(&[batch, d])
            }
            Op::Reshape { shape } => {
                let mut s = vec![batch];
                s.extend_from_slice(shape);
                parents[0].reshape(&s)
            }
            Op::Concat => concat_fwd(parents),
            Op::ChannelScale => channel_scale_fwd(parents[0], parents[1]),
            Op::MinMaxNorm => min_max_fwd(parents[0]),
            Op::PowerNormalize { target } => power_normalize_fwd(parents[0], *target),
            Op::ProjectL2Ball => project_fwd(parents[0], parents[1]),
            Op::RowLpPool => row_lp_pool_fwd(parents[0]),
        }
    }

    /// Returns (gradients for each parent, gradients for each parameter).
    pub fn backward(
        op: &Op,
        parents: &[&Tensor],
        out: &Tensor,
        gout: &Tensor,
    ) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        match op {
            Op::Input { .. } => unreachable!(),
            Op::Linear { weight, .. } => linear_bwd(parents[0], weight, gout),
            Op::Conv2d {
                weight,
                stride,
                padding,
                ..
            } => conv2d_bwd(parents[0], weight, *stride, *padding, gout),
            Op::Relu => {
                let mut g = gout.clone();
                for (gv, &xv) in g.data_mut().iter_mut().zip(parents[0].data()) {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                Ok((vec![g], vec![]))
            }
            Op::Square => {
                let mut g = gout.clone();
                for (gv, &xv) in g.data_mut().iter_mut().zip(parents[0].data()) {
                    *gv *= 2.0 * xv;
                }
                Ok((vec![g], vec![]))
            }
            Op::Add => Ok((vec![gout.clone(), gout.clone()], vec![])),
            Op::AvgPool2d { kernel } => avg_pool_bwd(parents[0], *kernel, gout),
            Op::GlobalAvgPool => global_avg_pool_bwd(parents[0], gout),
            Op::Flatten | Op::Reshape { .. } => {
                Ok((vec![gout.reshape(parents[0].shape())?], vec![]))
            }
            Op::Concat => concat_bwd(parents, gout),
            Op::ChannelScale => channel_scale_bwd(parents[0], parents[1], gout),
            Op::MinMaxNorm => min_max_bwd(parents[0], gout),
            Op::PowerNormalize { target } => power_normalize_bwd(parents[0], *target, gout),
            Op::ProjectL2Ball => project_bwd(parents[0], parents[1], out, gout),
            Op::RowLpPool => row_lp_pool_bwd(parents[0], gout),
        }
    }

    fn linear_fwd(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
        let batch = x.shape()[0];
        let (out, inp) = (w.shape()[0], w.shape()[1]);
        let mut y = Tensor::zeros(&[batch, out]);
        for bi in 0..batch {
            let xr = x.row(bi);
            let yr = y.row_mut(bi);
            for o in 0..out {
                let wr = &w.data()[o * inp..(o + 1) * inp];
                let mut acc = b.data()[o];
                for (xv, wv) in xr.iter().zip(wr.iter()) {
                    acc += xv * wv;
                }
                yr[o] = acc;
            }
        }
        Ok(y)
    }

    fn linear_bwd(x: &Tensor, w: &Tensor, gout: &Tensor) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let batch = x.shape()[0];
        let (out, inp) = (w.shape()[0], w.shape()[1]);
        let mut gx = Tensor::zeros(x.shape());
        let mut gw = Tensor::zeros(w.shape());
        let mut gb = Tensor::zeros(&[out]);
        for bi in 0..batch {
            let xr = x.row(bi);
            let gr = gout.row(bi);
            let gxr = gx.row_mut(bi);
            for o in 0..out {
                let g = gr[o];
                if g == 0.0 {
                    continue;
                }
                gb.data_mut()[o] += g;
                let wr = &w.data()[o * inp..(o + 1) * inp];
                let gwr = &mut gw.data_mut()[o * inp..(o + 1) * inp];
                for i in 0..inp {
                    gxr[i] += g * wr[i];
                    gwr[i] += g * xr[i];
                }
            }
        }
        Ok((vec![gx], vec![gw, gb]))
    }

    /// Patch geometry for the im2col layout of one convolution.
    struct ConvGeom {
        ci: usize,
        h: usize,
        w: usize,
        co: usize,
        k: usize,
        ho: usize,
        wo: usize,
        stride: usize,
        padding: usize,
    }

    impl ConvGeom {
        fn of(x: &Tensor, w: &Tensor, stride: usize, padding: usize) -> Self {
            let (ci, h, wd) = (x.shape()[1], x.shape()[2], x.shape()[3]);
            let (co, k) = (w.shape()[0], w.shape()[2]);
            Self {
                ci,
                h,
                w: wd,
                co,
                k,
                ho: (h + 2 * padding - k) / stride + 1,
                wo: (wd + 2 * padding - k) / stride + 1,
                stride,
                padding,
            }
        }

        fn patch_rows(&self) -> usize {
            self.ci * self.k * self.k
        }

        fn plane(&self) -> usize {
            self.ho * self.wo
        }

        /// Writes the im2col matrix `[ci*k*k, ho*wo]` of one sample.
        fn fill_cols(&self, x: &[f64], cols: &mut [f64]) {
            let plane = self.plane();
            cols.iter_mut().for_each(|v| *v = 0.0);
            for ic in 0..self.ci {
                let src = &x[ic * self.h * self.w..(ic + 1) * self.h * self.w];
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let row = (ic * self.k + ky) * self.k + kx;
                        let dst = &mut cols[row * plane..(row + 1) * plane];
                        for oy in 0..self.ho {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let src_row = iy as usize * self.w;
                            for ox in 0..self.wo {
                                let ix =
                                    (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                dst[oy * self.wo + ox] = src[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }

        /// Scatter-adds an im2col-layout gradient back to the input image.
        fn scatter_cols(&self, dcols: &[f64], dx: &mut [f64]) {
            let plane = self.plane();
            for ic in 0..self.ci {
                let dst = &mut dx[ic * self.h * self.w..(ic + 1) * self.h * self.w];
                for ky in 0..self.k {
                    for kx in 0..self.k {
                        let row = (ic * self.k + ky) * self.k + kx;
                        let src = &dcols[row * plane..(row + 1) * plane];
                        for oy in 0..self.ho {
                            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let dst_row = iy as usize * self.w;
                            for ox in 0..self.wo {
                                let ix =
                                    (ox * self.stride + kx) as isize - self.padding as isize;
                                if ix < 0 || ix >= self.w as isize {
                                    continue;
                                }
                                dst[dst_row + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn conv2d_fwd(
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let batch = x.shape()[0];
        let g = ConvGeom::of(x, w, stride, padding);
        let (rows, plane) = (g.patch_rows(), g.plane());
        let mut y = Tensor::zeros(&[batch, g.co, g.ho, g.wo]);
        let mut cols = vec![0.0; rows * plane];
        for bi in 0..batch {
            g.fill_cols(x.row(bi), &mut cols);
            let out = &mut y.data_mut()[bi * g.co * plane..(bi + 1) * g.co * plane];
            for oc in 0..g.co {
                let dst = &mut out[oc * plane..(oc + 1) * plane];
                dst.iter_mut().for_each(|v| *v = b.data()[oc]);
                let wrow = &w.data()[oc * rows..(oc + 1) * rows];
                for (r, &wv) in wrow.iter().enumerate() {
                    if wv == 0.0 {
                        continue;
                    }
                    let src = &cols[r * plane..(r + 1) * plane];
                    for (d, &s) in dst.iter_mut().zip(src.iter()) {
                        *d += wv * s;
                    }
                }
            }
        }
        Ok(y)
    }

    fn conv2d_bwd(
        x: &Tensor,
        w: &Tensor,
        stride: usize,
        padding: usize,
        gout: &Tensor,
    ) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let batch = x.shape()[0];
        let g = ConvGeom::of(x, w, stride, padding);
        let (rows, plane) = (g.patch_rows(), g.plane());
        let mut gx = Tensor::zeros(x.shape());
        let mut gw = Tensor::zeros(w.shape());
        let mut gb = Tensor::zeros(&[g.co]);
        let mut cols = vec![0.0; rows * plane];
        let mut dcols = vec![0.0; rows * plane];
        for bi in 0..batch {
            g.fill_cols(x.row(bi), &mut cols);
            dcols.iter_mut().for_each(|v| *v = 0.0);
            let dy = &gout.data()[bi * g.co * plane..(bi + 1) * g.co * plane];
            for oc in 0..g.co {
                let dyrow = &dy[oc * plane..(oc + 1) * plane];
                gb.data_mut()[oc] += dyrow.iter().sum::<f64>();
                let wrow = &w.data()[oc * rows..(oc + 1) * rows];
                let gwrow = &mut gw.data_mut()[oc * rows..(oc + 1) * rows];
                for r in 0..rows {
                    let src = &cols[r * plane..(r + 1) * plane];
                    let mut acc = 0.0;
                    for (dyv, sv) in dyrow.iter().zip(src.iter()) {
                        acc += dyv * sv;
                    }
                    gwrow[r] += acc;
                    let wv = wrow[r];
                    if wv != 0.0 {
                        let dst = &mut dcols[r * plane..(r + 1) * plane];
                        for (d, dyv) in dst.iter_mut().zip(dyrow.iter()) {
                            *d += wv * dyv;
                        }
                    }
                }
            }
            g.scatter_cols(&dcols, gx.row_mut(bi));
        }
        Ok((vec![gx], vec![gw, gb]))
    }

    fn avg_pool_fwd(x: &Tensor, k: usize) -> Result<Tensor> {
        let (batch, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (ho, wo) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f64;
        let mut y = Tensor::zeros(&[batch, c, ho, wo]);
        for bi in 0..batch {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for dy in 0..k {
                            for dx in 0..k {
                                acc += x.data()
                                    [((bi * c + ci) * h + oy * k + dy) * w + ox * k + dx];
                            }
                        }
                        y.data_mut()[((bi * c + ci) * ho + oy) * wo + ox] = acc * inv;
                    }
                }
            }
        }
        Ok(y)
    }

    fn avg_pool_bwd(x: &Tensor, k: usize, gout: &Tensor) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let (batch, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (ho, wo) = (h / k, w / k);
        let inv = 1.0 / (k * k) as f64;
        let mut gx = Tensor::zeros(x.shape());
        for bi in 0..batch {
            for ci in 0..c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = gout.data()[((bi * c + ci) * ho + oy) * wo + ox] * inv;
                        for dy in 0..k {
                            for dx in 0..k {
                                gx.data_mut()
                                    [((bi * c + ci) * h + oy * k + dy) * w + ox * k + dx] += g;
                            }
                        }
                    }
                }
            }
        }
        Ok((vec![gx], vec![]))
    }

    fn global_avg_pool_fwd(x: &Tensor) -> Result<Tensor> {
        let (batch, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let inv = 1.0 / (h * w) as f64;
        let mut y = Tensor::zeros(&[batch, c]);
        for bi in 0..batch {
            for ci in 0..c {
                let base = (bi * c + ci) * h * w;
                let acc: f64 = x.data()[base..base + h * w].iter().sum();
                y.data_mut()[bi * c + ci] = acc * inv;
            }
        }
        Ok(y)
    }

    fn global_avg_pool_bwd(x: &Tensor, gout: &Tensor) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let (batch, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let inv = 1.0 / (h * w) as f64;
        let mut gx = Tensor::zeros(x.shape());
        for bi in 0..batch {
            for ci in 0..c {
                let g = gout.data()[bi * c + ci] * inv;
                let base = (bi * c + ci) * h * w;
                for v in &mut gx.data_mut()[base..base + h * w] {
                    *v += g;
                }
            }
        }
        Ok((vec![gx], vec![]))
    }

    fn concat_fwd(parents: &[&Tensor]) -> Result<Tensor> {
        let batch = parents[0].shape()[0];
        let total: usize = parents.iter().map(|p| p.row_len()).sum();
        let mut y = Tensor::zeros(&[batch, total]);
        for bi in 0..batch {
            let yr = y.row_mut(bi);
            let mut off = 0;
            for p in parents {
                let pr = p.row(bi);
                yr[off..off + pr.len()].copy_from_slice(pr);
                off += pr.len();
            }
        }
        Ok(y)
    }

    fn concat_bwd(parents: &[&Tensor], gout: &Tensor) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let batch = parents[0].shape()[0];
        let mut grads: Vec<Tensor> = parents.iter().map(|p| Tensor::zeros(p.shape())).collect();
        for bi in 0..batch {
            let gr = gout.row(bi);
            let mut off = 0;
            for g in grads.iter_mut() {
                let w = g.row_len();
                g.row_mut(bi).copy_from_slice(&gr[off..off + w]);
                off += w;
            }
        }
        Ok((grads, vec![]))
    }

    fn channel_scale_fwd(f: &Tensor, s: &Tensor) -> Result<Tensor> {
        let (batch, c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2], f.shape()[3]);
        let mut y = f.clone();
        for bi in 0..batch {
            for ci in 0..c {
                let gain = s.data()[bi * c + ci];
                let base = (bi * c + ci) * h * w;
                for v in &mut y.data_mut()[base..base + h * w] {
                    *v *= gain;
                }
            }
        }
        Ok(y)
    }

    fn channel_scale_bwd(
        f: &Tensor,
        s: &Tensor,
        gout: &Tensor,
    ) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let (batch, c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2], f.shape()[3]);
        let mut gf = Tensor::zeros(f.shape());
        let mut gs = Tensor::zeros(s.shape());
        for bi in 0..batch {
            for ci in 0..c {
                let gain = s.data()[bi * c + ci];
                let base = (bi * c + ci) * h * w;
                let mut acc = 0.0;
                for j in 0..h * w {
                    gf.data_mut()[base + j] = gout.data()[base + j] * gain;
                    acc += gout.data()[base + j] * f.data()[base + j];
                }
                gs.data_mut()[bi * c + ci] = acc;
            }
        }
        Ok((vec![gf, gs], vec![]))
    }

    const MINMAX_EPS: f64 = 1e-12;

    fn min_max_fwd(x: &Tensor) -> Result<Tensor> {
        let batch = x.shape()[0];
        let mut y = x.clone();
        for bi in 0..batch {
            let row = y.row_mut(bi);
            let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi - lo < MINMAX_EPS {
                // Degenerate span: calibration becomes a no-op.
                row.iter_mut().for_each(|v| *v = 1.0);
            } else {
                let inv = 1.0 / (hi - lo);
                row.iter_mut().for_each(|v| *v = (*v - lo) * inv);
            }
        }
        Ok(y)
    }

    fn min_max_bwd(x: &Tensor, gout: &Tensor) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let batch = x.shape()[0];
        let d = x.row_len();
        let mut gx = Tensor::zeros(x.shape());
        for bi in 0..batch {
            let xr = x.row(bi);
            let gr = gout.row(bi);
            let (mut jmin, mut jmax) = (0usize, 0usize);
            for j in 1..d {
                if xr[j] < xr[jmin] {
                    jmin = j;
                }
                if xr[j] > xr[jmax] {
                    jmax = j;
                }
            }
            let range = xr[jmax] - xr[jmin];
            if range < MINMAX_EPS {
                continue; // constant output, zero gradient
            }
            let inv = 1.0 / range;
            let gsum: f64 = gr.iter().sum();
            let gysum: f64 = gr
                .iter()
                .enumerate()
                .map(|(i, g)| g * (xr[i] - xr[jmin]) * inv)
                .sum();
            let gxr = gx.row_mut(bi);
            for j in 0..d {
                let mut g = gr[j];
                if j == jmin {
                    g -= gsum;
                    g += gysum;
                }
                if j == jmax {
                    g -= gysum;
                }
                gxr[j] = g * inv;
            }
        }
        Ok((vec![gx], vec![]))
    }

    fn power_normalize_fwd(x: &Tensor, target: f64) -> Result<Tensor> {
        let batch = x.shape()[0];
        let c = target.sqrt();
        let mut y = x.clone();
        for bi in 0..batch {
            let row = y.row_mut(bi);
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(NnError::InvalidArgument(
                    "power normalization of a zero-norm vector".into(),
                ));
            }
            let s = c / n;
            row.iter_mut().for_each(|v| *v *= s);
        }
        Ok(y)
    }

    fn power_normalize_bwd(
        x: &Tensor,
        target: f64,
        gout: &Tensor,
    ) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let batch = x.shape()[0];
        let c = target.sqrt();
        let mut gx = Tensor::zeros(x.shape());
        for bi in 0..batch {
            let xr = x.row(bi);
            let gr = gout.row(bi);
            let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
            let gdotx: f64 = gr.iter().zip(xr.iter()).map(|(g, v)| g * v).sum();
            let gxr = gx.row_mut(bi);
            let inv = c / n;
            let corr = gdotx / (n * n);
            for j in 0..xr.len() {
                gxr[j] = inv * (gr[j] - xr[j] * corr);
            }
        }
        Ok((vec![gx], vec![]))
    }

    fn project_fwd(v: &Tensor, radius: &Tensor) -> Result<Tensor> {
        let batch = v.shape()[0];
        let mut y = v.clone();
        for bi in 0..batch {
            let eps = radius.row(bi)[0];
            if eps < 0.0 {
                return Err(NnError::InvalidArgument(
                    "negative l2 projection radius".into(),
                ));
            }
            let row = y.row_mut(bi);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > eps {
                let s = if n == 0.0 { 0.0 } else { eps / n };
                row.iter_mut().for_each(|x| *x *= s);
            }
        }
        Ok(y)
    }

    fn project_bwd(
        v: &Tensor,
        radius: &Tensor,
        _out: &Tensor,
        gout: &Tensor,
    ) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let batch = v.shape()[0];
        let mut gv = Tensor::zeros(v.shape());
        let mut geps = Tensor::zeros(radius.shape());
        for bi in 0..batch {
            let eps = radius.row(bi)[0];
            let vr = v.row(bi);
            let gr = gout.row(bi);
            let n = vr.iter().map(|x| x * x).sum::<f64>().sqrt();
            let gvr = gv.row_mut(bi);
            if n <= eps || n == 0.0 {
                gvr.copy_from_slice(gr);
            } else {
                let gdotv: f64 = gr.iter().zip(vr.iter()).map(|(g, x)| g * x).sum();
                let s = eps / n;
                let corr = gdotv / (n * n);
                for j in 0..vr.len() {
                    gvr[j] = s * (gr[j] - vr[j] * corr);
                }
                geps.row_mut(bi)[0] = gdotv / n;
            }
        }
        Ok((vec![gv, geps], vec![]))
    }

    fn row_lp_pool_fwd(x: &Tensor) -> Result<Tensor> {
        let (batch, rows, cols) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut y = Tensor::zeros(&[batch, rows, 4]);
        for bi in 0..batch {
            for r in 0..rows {
                let base = (bi * rows + r) * cols;
                let row = &x.data()[base..base + cols];
                let l1: f64 = row.iter().map(|v| v.abs()).sum();
                let l2: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mn = row.iter().cloned().fold(f64::INFINITY, f64::min);
                let out = &mut y.data_mut()[(bi * rows + r) * 4..(bi * rows + r) * 4 + 4];
                out.copy_from_slice(&[l1, l2, mx, mn]);
            }
        }
        Ok(y)
    }

    fn row_lp_pool_bwd(x: &Tensor, gout: &Tensor) -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let (batch, rows, cols) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let mut gx = Tensor::zeros(x.shape());
        for bi in 0..batch {
            for r in 0..rows {
                let base = (bi * rows + r) * cols;
                let row = &x.data()[base..base + cols];
                let g = &gout.data()[(bi * rows + r) * 4..(bi * rows + r) * 4 + 4];
                let l2: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                let (mut jmin, mut jmax) = (0usize, 0usize);
                for j in 1..cols {
                    if row[j] < row[jmin] {
                        jmin = j;
                    }
                    if row[j] > row[jmax] {
                        jmax = j;
                    }
                }
                for j in 0..cols {
                    let mut acc = g[0] * row[j].signum();
                    if l2 > 0.0 {
                        acc += g[1] * row[j] / l2;
                    }
                    if j == jmax {
                        acc += g[2];
                    }
                    if j == jmin {
                        acc += g[3];
                    }
                    gx.data_mut()[base + j] = acc;
                }
            }
        }
        Ok((vec![gx], vec![]))
    }
}
