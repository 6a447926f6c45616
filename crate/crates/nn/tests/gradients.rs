//! Finite-difference gradient checks for every op kind, plus forward
//! examples verified against an independent scalar interpreter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rome_nn::graph::{Graph, Op};
use rome_nn::{gradcheck, softmax_ce_grad, Tensor};

const FD_STEP: f64 = 1e-4;
const REL_TOL: f64 = 1e-3;
const FLOOR: f64 = 1e-6;

fn random_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let numel = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Random tensor with every entry kept away from zero, so ReLU/min/max
/// kinks cannot sit inside the finite-difference stencil.
fn random_tensor_off_kink(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let numel = shape.iter().product();
    let data = (0..numel)
        .map(|_| {
            let v: f64 = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn run_trials(build: impl Fn(&mut ChaCha8Rng) -> (Graph, Vec<Tensor>), trials: usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for t in 0..trials {
        let (mut graph, inputs) = build(&mut rng);
        let proj: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let report = gradcheck::check_graph(&mut graph, &inputs, &proj, FD_STEP, FLOOR).unwrap();
        assert!(
            report.max_rel_err < REL_TOL,
            "trial {t}: rel err {} (analytic {}, numeric {})",
            report.max_rel_err,
            report.worst_analytic,
            report.worst_numeric
        );
    }
}

#[test]
fn linear_gradients_match_finite_differences() {
    run_trials(
        |rng| {
            let mut g = Graph::new();
            let x = g.input(&[5]);
            let out = g.linear(x, 3, rng).unwrap();
            g.set_output(out).unwrap();
            let input = random_tensor(&[2, 5], rng);
            (g, vec![input])
        },
        100,
    );
}

#[test]
fn conv_gradients_match_finite_differences() {
    run_trials(
        |rng| {
            let mut g = Graph::new();
            let x = g.input(&[2, 5, 5]);
            let stride = if rng.gen_bool(0.5) { 1 } else { 2 };
            let c = g.conv2d(x, 3, 3, stride, 1, rng).unwrap();
            g.set_output(c).unwrap();
            let input = random_tensor(&[1, 2, 5, 5], rng);
            (g, vec![input])
        },
        100,
    );
}

#[test]
fn relu_gradients_match_finite_differences() {
    run_trials(
        |rng| {
            let mut g = Graph::new();
            let x = g.input(&[6]);
            let l = g.linear(x, 6, rng).unwrap();
            let r = g.relu(l).unwrap();
            g.set_output(r).unwrap();
            // Nudge pre-activations off the kink.
            let input = loop {
                let cand = random_tensor(&[1, 6], rng);
                let tape = g.forward(&[cand.clone()]).unwrap();
                let pre = tape.value(l);
                if pre.data().iter().all(|v| v.abs() > 0.01) {
                    break cand;
                }
            };
            (g, vec![input])
        },
        100,
    );
}

#[test]
fn pooling_gradients_match_finite_differences() {
    run_trials(
        |rng| {
            let mut g = Graph::new();
            let x = g.input(&[2, 4, 4]);
            let p = g.avg_pool2d(x, 2).unwrap();
            let q = g.push(Op::GlobalAvgPool, vec![p]).unwrap();
            g.set_output(q).unwrap();
            let input = random_tensor(&[2, 2, 4, 4], rng);
            (g, vec![input])
        },
        100,
    );
}

#[test]
fn softmax_cross_entropy_gradients_match_finite_differences() {
    // The fused loss helper is checked directly: perturb logits, compare
    // the analytic gradient with central differences of the loss.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let logits = random_tensor(&[3, 4], &mut rng);
        let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..4)).collect();
        let (_, grad) = softmax_ce_grad(&logits, &labels).unwrap();
        for j in 0..logits.len() {
            let mut plus = logits.clone();
            plus.data_mut()[j] += FD_STEP;
            let (lp, _) = softmax_ce_grad(&plus, &labels).unwrap();
            let mut minus = logits.clone();
            minus.data_mut()[j] -= FD_STEP;
            let (lm, _) = softmax_ce_grad(&minus, &labels).unwrap();
            let numeric = (lp - lm) / (2.0 * FD_STEP);
            let analytic = grad.data()[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR);
            assert!(rel < REL_TOL, "rel {rel} at {j}");
        }
    }
}

#[test]
fn structural_op_gradients_match_finite_differences() {
    // Flatten/reshape/concat/add/square composed in one graph.
    run_trials(
        |rng| {
            let mut g = Graph::new();
            let a = g.input(&[4]);
            let b = g.input(&[4]);
            let s = g.push(Op::Square, vec![a]).unwrap();
            let sum = g.add(s, b).unwrap();
            let cat = g.push(Op::Concat, vec![sum, a]).unwrap();
            let l = g.linear(cat, 3, rng).unwrap();
            g.set_output(l).unwrap();
            (g, vec![random_tensor(&[2, 4], rng), random_tensor(&[2, 4], rng)])
        },
        100,
    );
}

#[test]
fn calibration_op_gradients_match_finite_differences() {
    // ChannelScale + MinMaxNorm, the PAM building blocks.
    run_trials(
        |rng| {
            let mut g = Graph::new();
            let f = g.input(&[3, 2, 2]);
            let gap = g.push(Op::GlobalAvgPool, vec![f]).unwrap();
            let fc = g.linear(gap, 3, rng).unwrap();
            let norm = g.push(Op::MinMaxNorm, vec![fc]).unwrap();
            let scaled = g.push(Op::ChannelScale, vec![f, norm]).unwrap();
            g.set_output(scaled).unwrap();
            // Keep the three calibration entries well separated so the
            // min/max arguments cannot flip inside the FD stencil.
            let input = loop {
                let cand = random_tensor(&[1, 3, 2, 2], rng);
                let tape = g.forward(&[cand.clone()]).unwrap();
                let pre = tape.value(fc);
                let mut vals: Vec<f64> = pre.data().to_vec();
                vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                if vals.windows(2).all(|w| w[1] - w[0] > 0.01) {
                    break cand;
                }
            };
            (g, vec![input])
        },
        100,
    );
}

#[test]
fn norm_op_gradients_match_finite_differences() {
    // PowerNormalize and ProjectL2Ball (both branches of the projection).
    run_trials(
        |rng| {
            let mut g = Graph::new();
            let x = g.input(&[5]);
            let pn = g.push(Op::PowerNormalize { target: 4.0 }, vec![x]).unwrap();
            g.set_output(pn).unwrap();
            (g, vec![random_tensor_off_kink(&[2, 5], rng)])
        },
        50,
    );
    run_trials(
        |rng| {
            let mut g = Graph::new();
            let x = g.input(&[5]);
            let r = g.input(&[1]);
            let p = g.push(Op::ProjectL2Ball, vec![x, r]).unwrap();
            g.set_output(p).unwrap();
            let v = random_tensor_off_kink(&[1, 5], rng);
            let norm: f64 = v.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            // Radius clearly inside or clearly outside the current norm.
            let radius = if rng.gen_bool(0.5) {
                norm * 0.6
            } else {
                norm * 1.7
            };
            let r_t = Tensor::new(vec![1, 1], vec![radius]).unwrap();
            (g, vec![v, r_t])
        },
        50,
    );
}

#[test]
fn row_lp_pool_gradients_match_finite_differences() {
    run_trials(
        |rng| {
            let mut g = Graph::new();
            let x = g.input(&[2, 4]);
            let p = g.push(Op::RowLpPool, vec![x]).unwrap();
            let f = g.flatten(p).unwrap();
            g.set_output(f).unwrap();
            // Distinct magnitudes keep min/max/|.| kinks away from the stencil.
            let input = loop {
                let cand = random_tensor_off_kink(&[1, 2, 4], rng);
                let ok = (0..2).all(|r| {
                    let row = &cand.data()[r * 4..(r + 1) * 4];
                    let mut v: Vec<f64> = row.to_vec();
                    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    v.windows(2).all(|w| w[1] - w[0] > 0.01)
                });
                if ok {
                    break cand;
                }
            };
            (g, vec![input])
        },
        50,
    );
}

// ---------------------------------------------------------------------------
// Independent scalar interpreter: straight-line re-evaluation of a graph
// using plain nested loops over Vec<f64>, sharing no code with the Tensor
// kernels.
// ---------------------------------------------------------------------------

fn interpret_scalar(graph: &Graph, input: &[f64]) -> Vec<f64> {
    let mut values: Vec<Vec<f64>> = Vec::new();
    for node in &graph.nodes {
        let value = match &node.op {
            Op::Input { .. } => input.to_vec(),
            Op::Linear { weight, bias } => {
                let (out, inp) = (weight.shape()[0], weight.shape()[1]);
                let x = &values[node.parents[0]];
                let mut y = vec![0.0; out];
                for o in 0..out {
                    let mut acc = bias.data()[o];
                    for i in 0..inp {
                        acc += weight.data()[o * inp + i] * x[i];
                    }
                    y[o] = acc;
                }
                y
            }
            Op::Relu => values[node.parents[0]]
                .iter()
                .map(|&v| if v > 0.0 { v } else { 0.0 })
                .collect(),
            Op::Square => values[node.parents[0]].iter().map(|&v| v * v).collect(),
            Op::Add => values[node.parents[0]]
                .iter()
                .zip(values[node.parents[1]].iter())
                .map(|(a, b)| a + b)
                .collect(),
            other => panic!("interpreter does not model {}", other.name()),
        };
        values.push(value);
    }
    values[graph.output].clone()
}

#[test]
fn forward_matches_hand_computed_affine() {
    // Single linear node W=[[2]], b=[1], input [3] -> [7].
    let mut g = Graph::new();
    let x = g.input(&[1]);
    let l = g
        .push(
            Op::Linear {
                weight: Tensor::new(vec![1, 1], vec![2.0]).unwrap(),
                bias: Tensor::new(vec![1], vec![1.0]).unwrap(),
            },
            vec![x],
        )
        .unwrap();
    g.set_output(l).unwrap();
    let tape = g
        .forward(&[Tensor::new(vec![1, 1], vec![3.0]).unwrap()])
        .unwrap();
    assert_eq!(tape.output().data(), &[7.0]);
}

#[test]
fn forward_relu_definition() {
    let mut g = Graph::new();
    let x = g.input(&[2]);
    let r = g.relu(x).unwrap();
    g.set_output(r).unwrap();
    let tape = g
        .forward(&[Tensor::new(vec![1, 2], vec![-1.0, 2.0]).unwrap()])
        .unwrap();
    assert_eq!(tape.output().data(), &[0.0, 2.0]);
}

#[test]
fn forward_matches_independent_interpreter() {
    // Two-layer net with seed-0 weights on an all-ones input.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let x = g.input(&[6]);
    let l1 = g.linear(x, 5, &mut rng).unwrap();
    let r1 = g.relu(l1).unwrap();
    let l2 = g.linear(r1, 3, &mut rng).unwrap();
    g.set_output(l2).unwrap();

    let ones = vec![1.0; 6];
    let tape = g
        .forward(&[Tensor::new(vec![1, 6], ones.clone()).unwrap()])
        .unwrap();
    let expected = interpret_scalar(&g, &ones);
    for (a, b) in tape.output().data().iter().zip(expected.iter()) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}

#[test]
fn backward_identity_and_square_examples() {
    // Identity graph: upstream [1, 1] flows through unchanged.
    let mut g = Graph::new();
    let x = g.input(&[2]);
    let r = g.reshape(x, &[2]).unwrap();
    g.set_output(r).unwrap();
    let tape = g
        .forward(&[Tensor::new(vec![1, 2], vec![0.3, -0.4]).unwrap()])
        .unwrap();
    let up = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
    let grads = g.backward(&tape, &up).unwrap();
    assert_eq!(grads.input_grads[0].data(), &[1.0, 1.0]);

    // Scalar square node: x = 3, upstream 1 -> gradient 6.
    let mut g = Graph::new();
    let x = g.input(&[1]);
    let s = g.push(Op::Square, vec![x]).unwrap();
    g.set_output(s).unwrap();
    let tape = g
        .forward(&[Tensor::new(vec![1, 1], vec![3.0]).unwrap()])
        .unwrap();
    let up = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let grads = g.backward(&tape, &up).unwrap();
    assert_eq!(grads.input_grads[0].data(), &[6.0]);
}

#[test]
fn backward_three_layer_net_against_finite_differences() {
    run_trials(
        |rng| {
            let mut g = Graph::new();
            let x = g.input(&[4]);
            let l1 = g.linear(x, 6, rng).unwrap();
            let r1 = g.relu(l1).unwrap();
            let l2 = g.linear(r1, 5, rng).unwrap();
            let r2 = g.relu(l2).unwrap();
            let l3 = g.linear(r2, 3, rng).unwrap();
            g.set_output(l3).unwrap();
            let input = loop {
                let cand = random_tensor(&[1, 4], rng);
                let tape = g.forward(&[cand.clone()]).unwrap();
                let ok = [l1, l2]
                    .iter()
                    .all(|&n| tape.value(n).data().iter().all(|v| v.abs() > 0.01));
                if ok {
                    break cand;
                }
            };
            (g, vec![input])
        },
        30,
    );
}

#[test]
fn forward_rejects_shape_mismatch_and_nonfinite() {
    let mut g = Graph::new();
    let x = g.input(&[3]);
    let r = g.relu(x).unwrap();
    g.set_output(r).unwrap();
    assert!(g.forward(&[Tensor::new(vec![1, 2], vec![0.0; 2]).unwrap()]).is_err());
    let bad = Tensor::new(vec![1, 3], vec![1.0, f64::NAN, 0.0]).unwrap();
    assert!(g.forward(&[bad]).is_err());
}

#[test]
fn backward_rejects_bad_upstream_shape() {
    let mut g = Graph::new();
    let x = g.input(&[2]);
    let r = g.relu(x).unwrap();
    g.set_output(r).unwrap();
    let tape = g
        .forward(&[Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap()])
        .unwrap();
    let bad = Tensor::new(vec![1, 3], vec![1.0; 3]).unwrap();
    assert!(g.backward(&tape, &bad).is_err());
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut g = Graph::new();
    let x = g.input(&[2, 4, 4]);
    let c = g.conv2d(x, 4, 3, 1, 1, &mut rng).unwrap();
    let r = g.relu(c).unwrap();
    let f = g.flatten(r).unwrap();
    g.set_output(f).unwrap();
    let input = random_tensor(&[3, 2, 4, 4], &mut rng);
    let a = g.forward(&[input.clone()]).unwrap();
    let b = g.forward(&[input]).unwrap();
    assert_eq!(a.output().data(), b.output().data());
}
