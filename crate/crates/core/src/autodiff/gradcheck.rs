//! Finite-difference verification of the reverse-mode gradients.
//!
//! Runs entirely in f64. The builder closure is called once per perturbed
//! evaluation with a fresh graph, so it must be a pure function of the leaf
//! values it is handed.

use super::graph::{Graph, Tensor};
use crate::Result;

/// Central-difference step. With f64 forward math this leaves truncation
/// error around 1e-6 for smooth ops, far under the acceptance threshold.
pub const DEFAULT_STEP: f64 = 1e-3;

/// Relative error floor: elements where both gradients are below this
/// magnitude are compared absolutely against it instead.
pub const DENOM_FLOOR: f64 = 1e-3;

/// Worst relative disagreement between analytic and numeric gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (leaf index, element index) of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
}

/// Compare reverse-mode gradients against central differences for every
/// element of every leaf. `build` receives the leaves in the order given and
/// must return the scalar loss tensor.
pub fn check<F>(leaves: &[(Vec<usize>, Vec<f64>)], step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Tensor]) -> Result<Tensor>,
{
    let mut g = Graph::new();
    let handles: Vec<Tensor> = leaves
        .iter()
        .map(|(shape, data)| g.leaf(shape, data.clone()))
        .collect::<Result<_>>()?;
    let loss = build(&mut g, &handles)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = handles
        .iter()
        .map(|&h| g.grad(h).expect("leaf gradient").to_vec())
        .collect();

    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let hs: Vec<Tensor> = leaves
            .iter()
            .zip(values)
            .map(|((shape, _), data)| g.input(shape, data.clone()))
            .collect::<Result<_>>()?;
        let loss = build(&mut g, &hs)?;
        Ok(g.scalar_value(loss))
    };

    let mut values: Vec<Vec<f64>> = leaves.iter().map(|(_, d)| d.clone()).collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
    };
    for li in 0..values.len() {
        for ei in 0..values[li].len() {
            let orig = values[li][ei];
            values[li][ei] = orig + step;
            let f_plus = eval(&values)?;
            values[li][ei] = orig - step;
            let f_minus = eval(&values)?;
            values[li][ei] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = analytic[li][ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOM_FLOOR);
            if rel > report.max_rel_err {
                report = GradCheckReport {
                    max_rel_err: rel,
                    worst: (li, ei),
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
