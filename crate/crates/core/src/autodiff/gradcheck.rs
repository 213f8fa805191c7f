//! Central finite-difference gradient checking in double precision.

use crate::error::Result;
use crate::tensor::Tensor4;

use super::{Graph, Var};

/// Step used for central differences.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// (tensor index, element index, analytic, numeric) of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compare caller-supplied analytic gradients against central differences
/// of `loss`, perturbing every element of every tensor in `tensors` in turn.
pub fn check_with(
    tensors: &mut [Tensor4<f64>],
    analytic: &[Vec<f64>],
    mut loss: impl FnMut(&[Tensor4<f64>]) -> Result<f64>,
    step: f64,
) -> Result<GradReport> {
    assert_eq!(tensors.len(), analytic.len());
    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for t in 0..tensors.len() {
        for e in 0..tensors[t].len() {
            let orig = tensors[t].data()[e];
            tensors[t].data_mut()[e] = orig + step;
            let plus = loss(tensors)?;
            tensors[t].data_mut()[e] = orig - step;
            let minus = loss(tensors)?;
            tensors[t].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = rel_error(analytic[t][e], numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((t, e, analytic[t][e], numeric));
            }
        }
    }
    Ok(report)
}

/// Check every op reachable from `build`. All `inputs` are treated as
/// differentiable leaves; `build` must return a scalar.
pub fn check_op(
    inputs: &[Tensor4<f64>],
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<GradReport> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let loss = build(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let mut tensors = inputs.to_vec();
    check_with(
        &mut tensors,
        &analytic,
        |ts| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
            let loss = build(&mut g, &vars)?;
            Ok(g.value(loss).data()[0])
        },
        DEFAULT_STEP,
    )
}
