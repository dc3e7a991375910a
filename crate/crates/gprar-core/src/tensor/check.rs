//! Gradient verification by central differences.

use super::exec::loss_and_grads;
use super::graph::GraphSpec;
use super::{ModelParams, TensorMap};
use crate::{Error, Result};

/// Compares analytic gradients against central differences for every element
/// of every parameter in the graph.
///
/// Returns the worst relative error, `|analytic - numeric| / max(1, |numeric|)`,
/// over all parameter elements. A graph with no parameters scores 0. Perturbs
/// each element by `+-eps`, so cost is two forward passes per element.
pub fn finite_diff_check(
    spec: &GraphSpec,
    inputs: &TensorMap,
    params: &ModelParams,
    loss: &str,
    eps: f64,
) -> Result<f64> {
    if eps <= 0.0 {
        return Err(Error::Graph(format!("finite_diff_check: eps must be positive, got {eps}")));
    }
    let (_, analytic) = loss_and_grads(spec, inputs, params, loss)?;
    let mut worst = 0.0_f64;
    let mut probe = params.clone();
    let names: Vec<String> = params.names().map(str::to_owned).collect();
    for name in names {
        let base = params.get(&name)?.clone();
        let zero = vec![0.0; base.numel()];
        let analytic_grad = analytic.get(&name).unwrap_or(&zero);
        for i in 0..base.numel() {
            let mut plus = base.clone();
            plus.values_mut()[i] += eps;
            probe.set(&name, plus)?;
            let (lp, _) = eval_loss(spec, inputs, &probe, loss)?;
            let mut minus = base.clone();
            minus.values_mut()[i] -= eps;
            probe.set(&name, minus)?;
            let (lm, _) = eval_loss(spec, inputs, &probe, loss)?;
            let numeric = (lp - lm) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!(
                    "finite_diff_check: numeric gradient of '{name}'[{i}]"
                )));
            }
            let err = (analytic_grad[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
        probe.set(&name, base)?;
    }
    Ok(worst)
}

fn eval_loss(
    spec: &GraphSpec,
    inputs: &TensorMap,
    params: &ModelParams,
    loss: &str,
) -> Result<(f64, ())> {
    let out = super::exec::forward(spec, inputs, params)?;
    let t = out
        .get(loss)
        .ok_or_else(|| Error::Graph(format!("unknown output '{loss}'")))?;
    Ok((t.item()?, ()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{GraphBuilder, Tensor};

    #[test]
    fn quadratic_matches_closely() {
        let mut b = GraphBuilder::new();
        let w = b.param("w", vec![1, 3], 1, 3);
        let x = b.input("x", vec![3, 1]);
        let y = b.input("y", vec![1, 1]);
        let pred = b.matmul("pred", w, x).unwrap();
        let loss = b.squared_error("loss", pred, y).unwrap();
        b.output("loss", loss);
        let spec = b.finish();
        let mut params = ModelParams::new(11);
        params.register_graph(&spec).unwrap();
        let inputs = TensorMap::from([
            ("x".to_string(), Tensor::new(vec![3, 1], vec![0.4, -1.2, 2.0]).unwrap()),
            ("y".to_string(), Tensor::new(vec![1, 1], vec![0.7]).unwrap()),
        ]);
        let worst = finite_diff_check(&spec, &inputs, &params, "loss", 1e-5).unwrap();
        assert!(worst < 1e-7, "worst relative error {worst}");
    }

    #[test]
    fn no_params_scores_zero() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", vec![2]);
        let y = b.input("y", vec![2]);
        let loss = b.squared_error("loss", x, y).unwrap();
        b.output("loss", loss);
        let spec = b.finish();
        let inputs = TensorMap::from([
            ("x".to_string(), Tensor::from_vec(vec![1.0, 2.0])),
            ("y".to_string(), Tensor::from_vec(vec![0.0, 0.0])),
        ]);
        let worst = finite_diff_check(&spec, &inputs, &ModelParams::new(0), "loss", 1e-5).unwrap();
        assert_eq!(worst, 0.0);
    }

    #[test]
    fn rejects_nonpositive_eps() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", vec![1]);
        b.output("loss", x);
        let spec = b.finish();
        assert!(finite_diff_check(&spec, &TensorMap::new(), &ModelParams::new(0), "loss", 0.0)
            .is_err());
    }
}
