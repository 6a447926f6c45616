//! Finite-difference gradient checking.
//!
//! Central differences with a configurable step; used by the test suites to
//! validate every analytic backward kernel against an independent numerical
//! estimate.

use crate::error::Result;
use crate::graph::Graph;
use crate::tensor::Tensor;

/// Scalar loss used by the checker: a fixed random projection of the graph
/// output, so every output coordinate influences the loss.
pub fn projection_loss(output: &Tensor, weights: &[f64]) -> f64 {
    output
        .data()
        .iter()
        .zip(weights.iter().cycle())
        .map(|(v, w)| v * w)
        .sum()
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

/// Compares analytic parameter and input gradients against central finite
/// differences. `proj` is the projection defining the scalar loss.
///
/// Relative error uses `|a - n| / max(|a|, |n|, floor)`, with `floor`
/// guarding the comparison for near-zero gradient pairs.
pub fn check_graph(
    graph: &mut Graph,
    inputs: &[Tensor],
    proj: &[f64],
    step: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    let tape = graph.forward(inputs)?;
    let out_shape = tape.output().shape().to_vec();
    let mut upstream = Tensor::zeros(&out_shape);
    for (u, w) in upstream.data_mut().iter_mut().zip(proj.iter().cycle()) {
        *u = *w;
    }
    let grads = graph.backward(&tape, &upstream)?;

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };

    // Parameter gradients.
    let flat_grads: Vec<Tensor> = grads.flat().into_iter().cloned().collect();
    let n_params = graph.param_tensors().len();
    for pi in 0..n_params {
        let numel = graph.param_tensors()[pi].len();
        for j in 0..numel {
            let orig = graph.param_tensors()[pi].data()[j];

            graph.param_tensors_mut()[pi].data_mut()[j] = orig + step;
            let lp = projection_loss(graph.forward(inputs)?.output(), proj);
            graph.param_tensors_mut()[pi].data_mut()[j] = orig - step;
            let lm = projection_loss(graph.forward(inputs)?.output(), proj);
            graph.param_tensors_mut()[pi].data_mut()[j] = orig;

            let numeric = (lp - lm) / (2.0 * step);
            let analytic = flat_grads[pi].data()[j];
            record(&mut report, analytic, numeric, floor);
        }
    }

    // Input gradients.
    for (slot, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[slot].data_mut()[j] += step;
            let lp = projection_loss(graph.forward(&plus)?.output(), proj);
            let mut minus = inputs.to_vec();
            minus[slot].data_mut()[j] -= step;
            let lm = projection_loss(graph.forward(&minus)?.output(), proj);

            let numeric = (lp - lm) / (2.0 * step);
            let analytic = grads.input_grads[slot].data()[j];
            record(&mut report, analytic, numeric, floor);
        }
    }

    Ok(report)
}

fn record(report: &mut GradCheckReport, analytic: f64, numeric: f64, floor: f64) {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    let rel = (analytic - numeric).abs() / denom;
    report.checked += 1;
    if rel > report.max_rel_err {
        report.max_rel_err = rel;
        report.worst_analytic = analytic;
        report.worst_numeric = numeric;
    }
}
