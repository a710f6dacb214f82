//! Reverse walk over the implicit tape formed by tensor parent links.

use std::collections::HashSet;

use super::{NumericsError, Result, Tensor};

pub(crate) fn accumulate(t: &Tensor, contrib: &[f64]) {
    let mut slot = t.inner.grad.borrow_mut();
    match slot.as_mut() {
        Some(g) => {
            for (gi, ci) in g.iter_mut().zip(contrib) {
                *gi += ci;
            }
        }
        None => *slot = Some(contrib.to_vec()),
    }
}

pub(crate) fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(NumericsError::NonScalarLoss {
            numel: loss.numel(),
        });
    }
    if loss.inner.backward_done.get() {
        return Err(NumericsError::BackwardTwice);
    }
    loss.inner.backward_done.set(true);

    // Post-order DFS; the reversed order is a valid reverse-topological walk.
    let mut order: Vec<Tensor> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(loss.clone(), 0)];
    seen.insert(loss.inner.id);
    while let Some((node, child)) = stack.pop() {
        if child < node.inner.parents.len() {
            stack.push((node.clone(), child + 1));
            let p = node.inner.parents[child].clone();
            if p.inner.requires_grad && seen.insert(p.inner.id) {
                stack.push((p, 0));
            }
        } else {
            order.push(node);
        }
    }

    accumulate(loss, &[1.0]);
    for node in order.iter().rev() {
        if let Some(f) = &node.inner.backward_fn {
            let upstream = node
                .inner
                .grad
                .borrow()
                .clone()
                .unwrap_or_else(|| vec![0.0; node.numel()]);
            f(&upstream, &node.inner.parents);
        }
    }
    Ok(())
}
