use ndarray::Array2;

use super::forward::BoundParams;
use super::params::ModelParams;
use crate::autodiff::{Graph, Var};
use crate::error::Result;

/// Exact reverse-mode gradients of a scalar loss with respect to `leaves`.
///
/// The model weights are bound as constants; `loss` receives the graph, the
/// bound weights and one trainable variable per leaf (same order) and must
/// return a `1 x 1` node. Leaves the loss does not depend on get zero
/// gradients.
pub fn grad<'a, F>(params: &'a ModelParams, leaves: &[Array2<f64>], loss: F) -> Result<Vec<Array2<f64>>>
where
    F: FnOnce(&mut Graph<'a>, &BoundParams, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = BoundParams::bind(params, &mut g, false);
    let vars: Vec<Var> = leaves.iter().map(|l| g.leaf(l.clone())).collect();
    let out = loss(&mut g, &bound, &vars)?;
    let grads = g.backward(out)?;
    Ok(vars
        .iter()
        .zip(leaves)
        .map(|(&v, l)| grads.get_or_zeros(v, l.dim()))
        .collect())
}
