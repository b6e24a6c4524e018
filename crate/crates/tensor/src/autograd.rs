use std::collections::{HashMap, HashSet};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::{fault_active, take_anomaly, BackwardCtx, GradModeGuard, Tensor};

/// Tensors reachable from `output` through recorded operations, inputs
/// before consumers.
fn topo_order<T: Scalar>(output: &Tensor<T>) -> Vec<Tensor<T>> {
    let mut order = Vec::new();
    let mut visited = HashSet::new();
    let mut stack: Vec<(Tensor<T>, usize)> = vec![(output.clone(), 0)];
    visited.insert(output.id());
    while let Some((t, child)) = stack.pop() {
        let inputs = t.node().map(|n| n.inputs.as_slice()).unwrap_or(&[]);
        if child < inputs.len() {
            let next = inputs[child].clone();
            stack.push((t, child + 1));
            if next.requires_grad() && visited.insert(next.id()) {
                stack.push((next, 0));
            }
        } else {
            order.push(t);
        }
    }
    order
}

/// Gradients of a scalar `output` with respect to each tensor in `wrt`.
///
/// Every node is visited once, in reverse topological order. With
/// `create_graph` the backward computation is itself recorded, so the
/// returned gradients can be differentiated again. Tensors in `wrt` that do
/// not influence `output` get a zero gradient.
pub fn grad<T: Scalar>(
    output: &Tensor<T>,
    wrt: &[&Tensor<T>],
    create_graph: bool,
) -> Result<Vec<Tensor<T>>> {
    if output.numel() != 1 {
        return Err(TensorError::NonScalarOutput(output.shape().to_vec()));
    }
    if let Some(t) = wrt.iter().find(|t| !t.requires_grad()) {
        return Err(TensorError::NotRequiringGrad(t.id()));
    }
    if let Some(op) = take_anomaly() {
        return Err(TensorError::NonFinite { op });
    }
    let zeros = || wrt.iter().map(|t| t.zeros_like()).collect::<Vec<_>>();
    if !output.requires_grad() {
        return Ok(zeros());
    }

    let wanted: HashSet<u64> = wrt.iter().map(|t| t.id()).collect();
    let mut found: HashMap<u64, Tensor<T>> = HashMap::new();
    let mut grads: HashMap<u64, Tensor<T>> = HashMap::new();
    grads.insert(output.id(), Tensor::ones(output.shape()));

    let _mode = GradModeGuard::new(create_graph);
    for t in topo_order(output).iter().rev() {
        let Some(g) = grads.remove(&t.id()) else {
            continue;
        };
        if wanted.contains(&t.id()) {
            found.insert(t.id(), g.clone());
        }
        let Some(node) = t.node() else {
            continue;
        };
        let ctx = BackwardCtx {
            inputs: &node.inputs,
            output: t,
            grad: &g,
        };
        let mut input_grads = node.op.backward(&ctx)?;
        if fault_active(node.op.name()) {
            for gi in input_grads.iter_mut().flatten() {
                *gi = gi.mul_scalar(1.5);
            }
        }
        debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op.name());
        for (input, gi) in node.inputs.iter().zip(input_grads) {
            let Some(gi) = gi else { continue };
            if !input.requires_grad() {
                continue;
            }
            if gi.shape() != input.shape() {
                return Err(TensorError::mismatch(node.op.name(), gi.shape(), input.shape()));
            }
            let acc = match grads.remove(&input.id()) {
                Some(prev) => prev.add(&gi)?,
                None => gi,
            };
            grads.insert(input.id(), acc);
        }
        if let Some(op) = take_anomaly() {
            return Err(TensorError::NonFinite {
                op: format!("backward of {} via {op}", node.op.name()),
            });
        }
    }

    Ok(wrt
        .iter()
        .map(|t| found.get(&t.id()).cloned().unwrap_or_else(|| t.zeros_like()))
        .collect())
}

/// True when `target` is an input, direct or transitive, of `from`.
pub fn reaches<T: Scalar>(from: &Tensor<T>, target: &Tensor<T>) -> bool {
    if from.id() == target.id() {
        return true;
    }
    let mut visited = HashSet::new();
    let mut stack = vec![from.clone()];
    while let Some(t) = stack.pop() {
        let Some(node) = t.node() else { continue };
        for input in &node.inputs {
            if input.id() == target.id() {
                return true;
            }
            if visited.insert(input.id()) {
                stack.push(input.clone());
            }
        }
    }
    false
}
