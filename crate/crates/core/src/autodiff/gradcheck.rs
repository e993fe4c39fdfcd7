use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of a scalar function against central
/// finite differences and returns the largest relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
///
/// `f` receives a fresh graph and the parameter node holding `x`, and must
/// return a scalar node. It is evaluated `2 * x.numel() + 1` times.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, NodeId) -> Result<NodeId>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("grad_check eps must be > 0, got {eps}")));
    }
    let mut g = Graph::new();
    let input = g.param(x.clone());
    let root = f(&mut g, input)?;
    g.backward(root)?;
    let analytic = g.grad_or_zeros(input);

    let eval = |probe: Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let input = g.param(probe);
        let root = f(&mut g, input)?;
        let v = g.value(root).item();
        if !v.is_finite() {
            return Err(Error::Numerical("grad_check: non-finite value at a perturbed point".into()));
        }
        Ok(v)
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += eps;
        let mut minus = x.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
