//! Central finite-difference validation of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Bindings, Graph, NodeId, ParamSet};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    /// `max_i |analytic_i - numeric_i| / max(max_i |analytic_i|, max_i |numeric_i|)`,
    /// or exactly 0 when both gradients vanish.
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.max_relative_error))
    }
}

pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()))
        / scale
}

/// Central-difference gradient of a scalar node with respect to one bound tensor.
pub fn numeric_gradient(
    graph: &Graph,
    fixed: &Bindings,
    params: &ParamSet,
    name: &str,
    output: NodeId,
    step: f64,
) -> Result<Tensor> {
    let base = params.require(name)?.clone();
    let mut probe = params.clone();
    let mut grad = Tensor::zeros(base.shape());
    for i in 0..base.len() {
        let mut eval_at = |delta: f64| -> Result<f64> {
            probe.get_mut(name).expect("probe tensor").data_mut()[i] = base.data()[i] + delta;
            let mut binds = fixed.clone();
            for (k, v) in probe.iter() {
                binds.insert(k, v);
            }
            Ok(graph.forward(&binds)?.get(output).item())
        };
        let plus = eval_at(step)?;
        let minus = eval_at(-step)?;
        grad.data_mut()[i] = (plus - minus) / (2.0 * step);
        probe.get_mut(name).expect("probe tensor").data_mut()[i] = base.data()[i];
    }
    Ok(grad)
}

/// Compares reverse-mode gradients of `output` against central differences for
/// every tensor in `params`. Failures are flagged in the report, never raised.
pub fn check_gradients(
    graph: &Graph,
    fixed: &Bindings,
    params: &ParamSet,
    output: NodeId,
    tolerance: f64,
    step: f64,
) -> Result<GradCheckReport> {
    assert!(tolerance > 0.0, "tolerance must be positive");
    let names: Vec<&str> = params.names().collect();
    let binds = fixed.clone().bind_params(params);
    let analytic = graph.gradient(&binds, output, &names)?;
    let mut entries = Vec::with_capacity(names.len());
    for name in names {
        let numeric = numeric_gradient(graph, fixed, params, name, output, step)?;
        let err = relative_error(analytic.get(name).expect("requested").data(), numeric.data());
        entries.push(GradCheckEntry {
            name: name.to_string(),
            max_relative_error: err,
            passed: err < tolerance,
        });
    }
    Ok(GradCheckReport { tolerance, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;

    #[test]
    fn linear_layer_is_exact_to_1e8() {
        let mut b = GraphBuilder::new();
        let x = b.input("x");
        let w = b.param("w");
        let bias = b.param("b");
        let y = b.matmul(x, w);
        let y = b.add_row(y, bias);
        let loss = b.sum_squares(y);
        let g = b.build();
        let xv = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.7).cos()).collect()).unwrap();
        let mut p = ParamSet::new();
        p.insert(
            "w",
            Tensor::new(vec![4, 2], (0..8).map(|i| (i as f64 * 1.3).sin()).collect()).unwrap(),
        );
        p.insert("b", Tensor::from_vec(vec![0.1, -0.2]));
        let report = check_gradients(&g, &Bindings::new().bind("x", &xv), &p, loss, 1e-8, 1e-5).unwrap();
        assert!(report.all_passed(), "{report:?}");
    }

    #[test]
    fn dead_branch_reports_exactly_zero() {
        let mut b = GraphBuilder::new();
        let w = b.param("w");
        let dead = b.param("dead");
        let _unused = b.relu(dead);
        let loss = b.sum_squares(w);
        let g = b.build();
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(vec![0.5, -1.5]));
        p.insert("dead", Tensor::from_vec(vec![2.0, 3.0, 4.0]));
        let report = check_gradients(&g, &Bindings::new(), &p, loss, 1e-6, 1e-5).unwrap();
        let dead_entry = report.entries.iter().find(|e| e.name == "dead").unwrap();
        assert_eq!(dead_entry.max_relative_error, 0.0);
        assert!(report.all_passed());
    }
}
