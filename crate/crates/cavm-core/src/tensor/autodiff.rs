//! Reverse-mode gradient engine and the finite-difference checker.

use std::collections::{HashMap, HashSet};

use super::{BackwardCtx, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Reverse topological order (loss last) over the subgraph that requires
/// gradients. Iterative so deep chains cannot overflow the stack.
fn topo_order<T: Scalar>(loss: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited: HashSet<u64> = HashSet::new();
    // (node, children_pushed)
    let mut stack: Vec<(Tensor<T>, bool)> = vec![(loss.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if expanded {
            order.push(node);
            continue;
        }
        if !visited.insert(node.id()) {
            continue;
        }
        let parents: Vec<Tensor<T>> = node
            .inner()
            .parents()
            .iter()
            .filter(|p| p.inner().requires())
            .cloned()
            .collect();
        stack.push((node, true));
        for p in parents {
            if !visited.contains(&p.id()) {
                stack.push((p, false));
            }
        }
    }
    order
}

/// Backpropagate from a scalar loss, accumulating gradients into every
/// reachable `requires_grad` leaf.
///
/// Errors if the loss is not scalar or if called a second time on the same
/// forward graph.
pub fn backward<T: Scalar>(loss: &Tensor<T>) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::Autodiff(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    if loss.inner().backward_done().get() {
        return Err(Error::Autodiff(
            "backward called twice on the same graph; rebuild the forward pass first".into(),
        ));
    }
    loss.inner().backward_done().set(true);
    if !loss.inner().requires() {
        return Ok(());
    }

    let order = topo_order(loss);
    let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
    grads.insert(loss.id(), vec![T::ONE]);

    for node in order.iter().rev() {
        let Some(grad_out) = grads.remove(&node.id()) else {
            continue;
        };
        if node.is_leaf() {
            let mut cell = node.inner().grad_cell().borrow_mut();
            match cell.as_mut() {
                Some(existing) => {
                    for (e, g) in existing.iter_mut().zip(&grad_out) {
                        *e += *g;
                    }
                }
                None => *cell = Some(grad_out),
            }
            continue;
        }
        let Some(backward_fn) = node.inner().backward_fn() else {
            continue;
        };
        let parents = node.inner().parents();
        let ctx = BackwardCtx {
            grad_out: &grad_out,
            out: node,
            parents,
        };
        let parent_grads = backward_fn(&ctx);
        debug_assert_eq!(parent_grads.len(), parents.len());
        for (parent, pg) in parents.iter().zip(parent_grads) {
            let Some(pg) = pg else { continue };
            if !parent.inner().requires() {
                continue;
            }
            debug_assert_eq!(pg.len(), parent.numel());
            match grads.entry(parent.id()) {
                std::collections::hash_map::Entry::Occupied(mut e) => {
                    for (a, b) in e.get_mut().iter_mut().zip(&pg) {
                        *a += *b;
                    }
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(pg);
                }
            }
        }
    }
    Ok(())
}

/// Gradients of `loss` with respect to `params`, in order. Parameters not
/// reachable from the loss get zero gradients.
pub fn gradients<T: Scalar>(loss: &Tensor<T>, params: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    for p in params {
        p.zero_grad();
    }
    backward(loss)?;
    Ok(params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect())
}

/// Compare analytic gradients against central finite differences.
///
/// Returns the maximum over all input coordinates of
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`; any non-finite
/// comparison yields `f64::INFINITY` instead of an error.
pub fn grad_check<F>(forward_fn: F, inputs: &[Tensor<f64>], eps: f64) -> Result<f64>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let tracked: Vec<Tensor<f64>> = inputs
        .iter()
        .map(|t| Tensor::from_vec(t.shape(), t.data().to_vec()).unwrap().requires_grad())
        .collect();
    let loss = forward_fn(&tracked)?;
    if loss.numel() != 1 {
        return Err(Error::Autodiff("grad_check requires a scalar-valued function".into()));
    }
    let analytic = gradients(&loss, &tracked)?;

    let mut max_err = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for coord in 0..input.numel() {
            let numeric = {
                let eval = |delta: f64| -> Result<f64> {
                    let probe: Vec<Tensor<f64>> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, t)| {
                            let mut data = t.data().to_vec();
                            if j == i {
                                data[coord] += delta;
                            }
                            Tensor::from_vec(t.shape(), data).unwrap()
                        })
                        .collect();
                    Ok(forward_fn(&probe)?.item())
                };
                (eval(eps)? - eval(-eps)?) / (2.0 * eps)
            };
            let a = analytic[i].data()[coord];
            if !a.is_finite() || !numeric.is_finite() {
                return Ok(f64::INFINITY);
            }
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            max_err = max_err.max(err);
        }
    }
    Ok(max_err)
}
