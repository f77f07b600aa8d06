use std::collections::{HashMap, HashSet};
use std::sync::atomic::Ordering;

use super::{Element, GradCtx, Tensor};
use crate::error::{Error, Result};

impl<T: Element> Tensor<T> {
    /// Nodes reachable from `self`, inputs before outputs.
    fn topo_order(&self) -> Vec<Tensor<T>> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        // (tensor, children already pushed)
        let mut stack = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.0.node {
                for input in node.inputs.iter().rev() {
                    if input.requires_grad() && !visited.contains(&input.id()) {
                        stack.push((input.clone(), false));
                    }
                }
            }
        }
        order
    }

    /// Back-propagates from a scalar loss, accumulating into every leaf
    /// that requires a gradient. Gradients reaching a tensor along several
    /// paths are summed.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::NotScalar(self.shape().to_vec()));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        if order
            .iter()
            .filter_map(|t| t.0.node.as_ref())
            .any(|n| n.consumed.load(Ordering::Acquire))
        {
            return Err(Error::GraphConsumed);
        }
        for node in order.iter().filter_map(|t| t.0.node.as_ref()) {
            node.consumed.store(true, Ordering::Release);
        }

        let mut grads: HashMap<u64, Vec<T>> = HashMap::new();
        grads.insert(self.id(), vec![T::one()]);
        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else {
                continue;
            };
            let Some(node) = &t.0.node else {
                t.accumulate_grad(&g);
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(|i| i.requires_grad()).collect();
            let ctx = GradCtx {
                grad: &g,
                output: t.data(),
                needs: &needs,
            };
            let input_grads = (node.backward)(&ctx);
            debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", node.op);
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !input.requires_grad() {
                    continue;
                }
                debug_assert_eq!(ig.len(), input.numel(), "{} input grad", node.op);
                match grads.get_mut(&input.id()) {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, &b)| *a = *a + b),
                    None => {
                        grads.insert(input.id(), ig);
                    }
                }
            }
        }
        Ok(())
    }

    /// Re-arms every node below `self` so `backward` may run again.
    pub fn reset_graph(&self) {
        for t in self.topo_order() {
            if let Some(node) = &t.0.node {
                node.consumed.store(false, Ordering::Release);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_leaves_gives_ones() {
        let x = Tensor::<f64>::param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        x.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn sum_of_squares_gives_twice_x() {
        let x = Tensor::<f64>::param(vec![1.0, -2.0, 3.0], &[3]).unwrap();
        x.mul(&x).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn deep_chain_of_adds_keeps_unit_gradient() {
        let x = Tensor::<f64>::param(vec![0.5; 4], &[4]).unwrap();
        let zero = Tensor::<f64>::zeros(&[4]).unwrap();
        let mut y = x.clone();
        for _ in 0..2000 {
            y = y.add(&zero).unwrap();
        }
        y.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 4]);
    }

    #[test]
    fn paths_accumulate() {
        let x = Tensor::<f64>::param(vec![2.0], &[1]).unwrap();
        // x + 3x + x·x → 4 + 2x
        let y = x.add(&x.scalar_mul(3.0).unwrap()).unwrap();
        let y = y.add(&x.mul(&x).unwrap()).unwrap();
        y.sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![8.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(x.backward(), Err(Error::NotScalar(_))));
    }

    #[test]
    fn double_backward_needs_reset() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let loss = x.mul(&x).unwrap().sum().unwrap();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(Error::GraphConsumed)));
        loss.reset_graph();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 8.0]);
    }

    #[test]
    fn constants_get_no_graph() {
        let a = Tensor::<f64>::new(vec![1.0, 2.0], &[2]).unwrap();
        let b = a.add(&a).unwrap();
        assert!(b.is_leaf());
        assert!(!b.requires_grad());
    }
}
