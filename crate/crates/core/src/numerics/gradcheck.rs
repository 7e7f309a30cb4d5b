use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::{Error, Result};

/// Compares reverse-mode gradients of `f` at `point` against central
/// differences with the given `step`.
///
/// `f` receives a fresh graph and the node holding the (possibly perturbed)
/// point, and must return a scalar node. The result is the maximum over
/// coordinates of `|analytic - numeric| / max(1, |analytic|)`.
pub fn finite_difference_check<F>(mut f: F, point: &Tensor, step: f64) -> Result<f64>
where
    F: FnMut(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::invalid("step", "must be positive and finite"));
    }
    let mut graph = Graph::new();
    let x = graph.parameter(point.clone());
    let loss = f(&mut graph, x)?;
    if !graph.value(loss).all_finite() {
        return Err(Error::NonFinite {
            context: "finite_difference_check",
            index: 0,
        });
    }
    let grads = graph.backward(loss)?;
    let zeros = Tensor::zeros(point.shape());
    let analytic = grads.get(x).unwrap_or(&zeros);

    let mut eval = |shifted: Tensor, index: usize| -> Result<f64> {
        let mut g = Graph::new();
        let x = g.parameter(shifted);
        let out = f(&mut g, x)?;
        let v = g.value(out).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite {
                context: "finite_difference_check",
                index,
            })
        }
    };

    let mut worst = 0.0f64;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += step;
        let mut minus = point.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus, i)? - eval(minus, i)?) / (2.0 * step);
        let a = analytic.data()[i];
        worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
    }
    Ok(worst)
}
