//! Reverse-mode differentiation over recorded operation graphs.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{pop_no_grad, push_no_grad, Buffer, Tensor};

/// Gradients keyed by tensor id, as returned by [`Tensor::backward`].
/// Only leaves marked with `requires_grad` appear here.
pub struct Gradients {
    by_id: HashMap<u64, Buffer>,
}

impl Gradients {
    pub fn get(&self, tensor: &Tensor) -> Option<&Buffer> {
        self.by_id.get(&tensor.id())
    }

    pub fn get_f64(&self, tensor: &Tensor) -> Option<Vec<f64>> {
        self.get(tensor).map(|b| b.to_f64_vec())
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

/// Run `body` with gradient recording disabled on this thread. Nesting is
/// allowed; recording resumes once the outermost scope ends.
pub fn no_grad<R>(body: impl FnOnce() -> R) -> R {
    struct Guard;
    impl Drop for Guard {
        fn drop(&mut self) {
            pop_no_grad();
        }
    }
    push_no_grad();
    let _guard = Guard;
    body()
}

impl Tensor {
    /// Backpropagate from this scalar. Gradients accumulate into the `.grad`
    /// slot of every participating leaf (so a second call without
    /// `zero_grad` doubles them) and the same values are returned keyed by
    /// tensor id.
    pub fn backward(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward() requires a scalar output, got shape {:?}",
                self.shape()
            )));
        }

        // Reverse topological order via iterative depth-first search.
        let order = topo_order(self);

        // Upstream gradients for interior nodes, keyed by tensor id.
        let mut pending: HashMap<u64, Buffer> = HashMap::new();
        pending.insert(self.id(), {
            let mut seed = Buffer::zeros(self.dtype(), 1);
            match &mut seed {
                Buffer::F32(v) => v[0] = 1.0,
                Buffer::F64(v) => v[0] = 1.0,
            }
            seed
        });

        let mut result = HashMap::new();
        for tensor in order.iter().rev() {
            let Some(upstream) = pending.remove(&tensor.id()) else {
                continue;
            };
            if tensor.requires_grad() {
                tensor.accumulate_grad(&upstream);
                result
                    .entry(tensor.id())
                    .or_insert_with(|| Buffer::zeros(upstream.dtype(), upstream.len()))
                    .add_assign(&upstream);
            }
            let Some(node) = tensor.node() else {
                continue;
            };
            let needs: Vec<bool> = node.parents.iter().map(|p| p.participates()).collect();
            let parent_grads = (node.backward)(&upstream, &node.parents, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (parent, grad) in node.parents.iter().zip(parent_grads) {
                let Some(grad) = grad else { continue };
                debug_assert_eq!(grad.len(), parent.numel());
                pending
                    .entry(parent.id())
                    .and_modify(|acc| acc.add_assign(&grad))
                    .or_insert(grad);
            }
        }

        Ok(Gradients { by_id: result })
    }
}

/// Tensors reachable from `root` through recorded nodes, parents first.
fn topo_order(root: &Tensor) -> Vec<Tensor> {
    let mut order = Vec::new();
    let mut state: HashMap<u64, bool> = HashMap::new(); // false = open, true = done
    let mut stack = vec![(root.clone(), false)];
    while let Some((tensor, expanded)) = stack.pop() {
        if expanded {
            if let Some(done) = state.get_mut(&tensor.id()) {
                if !*done {
                    *done = true;
                    order.push(tensor);
                }
            }
            continue;
        }
        if state.contains_key(&tensor.id()) {
            continue;
        }
        state.insert(tensor.id(), false);
        stack.push((tensor.clone(), true));
        if let Some(node) = tensor.node() {
            for parent in &node.parents {
                if !state.contains_key(&parent.id()) {
                    stack.push((parent.clone(), false));
                }
            }
        }
    }
    order
}
