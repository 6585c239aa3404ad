//! Exhaustive central-difference verification of analytic gradients.

use indexmap::IndexMap;

use super::graph::{Graph, Mode, NodeId};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Upper bound on the number of parameter scalars `grad_check` will perturb
/// exhaustively; callers with larger graphs must subsample explicitly.
pub const GRAD_CHECK_BUDGET: usize = 10_000;

const REL_ERR_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub analytic: Tensor,
    pub numeric: Tensor,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradientReport {
    pub per_param: IndexMap<String, ParamCheck>,
    pub max_rel_error: f64,
}

fn rel_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERR_EPS)
}

/// Compare analytic gradients of `loss` against central finite differences
/// for every parameter scalar in the graph.
pub fn grad_check(
    graph: &mut Graph,
    loss: NodeId,
    inputs: &IndexMap<String, Tensor>,
    step: f64,
) -> Result<GradientReport> {
    if step <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "grad_check step must be positive, got {step}"
        )));
    }
    let total = graph.param_scalar_count();
    if total > GRAD_CHECK_BUDGET {
        return Err(Error::BudgetExceeded {
            actual: total,
            budget: GRAD_CHECK_BUDGET,
        });
    }

    let analytic = graph.gradients(loss, inputs, Mode::Train)?.grads;
    let names: Vec<String> = graph.params().keys().cloned().collect();

    let mut report = GradientReport::default();
    for name in names {
        let n = graph.param_tensor(&name)?.numel();
        let shape = graph.param_tensor(&name)?.shape().to_vec();
        let mut numeric = Tensor::zeros(&shape);
        for idx in 0..n {
            let orig = graph.param_tensor(&name)?.data()[idx];
            graph.param_data_mut(&name)?[idx] = orig + step;
            let plus = graph.evaluate(&[loss], inputs, Mode::Train)?.value(loss).item();
            graph.param_data_mut(&name)?[idx] = orig - step;
            let minus = graph.evaluate(&[loss], inputs, Mode::Train)?.value(loss).item();
            graph.param_data_mut(&name)?[idx] = orig;
            numeric.data_mut()[idx] = (plus - minus) / (2.0 * step);
        }
        let a = analytic.get(&name).expect("gradients cover every parameter");
        let max_rel = a
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(&av, &nv)| rel_error(av, nv))
            .fold(0.0, f64::max);
        report.max_rel_error = report.max_rel_error.max(max_rel);
        report.per_param.insert(
            name,
            ParamCheck {
                analytic: a.clone(),
                numeric,
                max_rel_error: max_rel,
            },
        );
    }
    Ok(report)
}
