//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation of one forward pass. Each node keeps
//! its value and a closure mapping the gradient of its output to gradients
//! of its parents. [`Tape::backward`] replays the nodes in reverse order.
//! Nodes are appended in topological order, so a single reverse sweep is
//! enough.

mod conv;
mod nn;
mod ops;
mod reduce;

use std::cell::RefCell;
use std::rc::Rc;

use crate::tensor::Tensor;

pub use conv::{conv3d, temporal_conv, Conv3dSpec, TemporalPadding};
pub use nn::{gelu, layer_norm, linear, multi_head_attention, part_linear};
pub use ops::{
    add, add_row, concat, expand_rows, gather_row, leaky_relu, mul, narrow, reshape, scale,
    sigmoid, sum_all, weighted_sum,
};
pub use reduce::{
    gem_pool, horizontal_pool, max_axis, max_pool_hw, mean_axis, window_max,
};

pub(crate) type BackwardFn = Box<dyn Fn(&Tensor, &[bool]) -> Vec<Option<Tensor>>>;

struct Node {
    value: Rc<Tensor>,
    parents: Vec<usize>,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that never receives a gradient (inputs, labels).
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    /// Leaf whose gradient is collected by [`Tape::backward`].
    pub fn variable(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            parents: Vec::new(),
            requires_grad,
            backward: None,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn push(&self, value: Tensor, parents: &[Var<'_>], backward: BackwardFn) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = parents.iter().any(|p| nodes[p.id].requires_grad);
        nodes.push(Node {
            value: Rc::new(value),
            parents: parents.iter().map(|p| p.id).collect(),
            requires_grad,
            backward: requires_grad.then_some(backward),
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[root.id].value.numel(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        grads[root.id] = Some(Tensor::full(nodes[root.id].value.shape(), 1.0));
        for id in (0..=root.id).rev() {
            let node = &nodes[id];
            let Some(backward) = &node.backward else {
                continue;
            };
            let Some(grad) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node
                .parents
                .iter()
                .map(|&p| nodes[p].requires_grad)
                .collect();
            let parent_grads = backward(&grad, &needs);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, g) in node.parents.iter().zip(parent_grads) {
                let Some(g) = g else { continue };
                if !nodes[p].requires_grad {
                    continue;
                }
                debug_assert_eq!(g.shape(), nodes[p].value.shape(), "grad shape of node {p}");
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
            // keep leaf grads, drop interior ones once propagated
            if !node.parents.is_empty() {
                grads[id] = None;
            } else {
                grads[id] = Some(grad);
            }
        }
        Gradients { grads }
    }
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, var: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(var.id).and_then(|g| g.take())
    }
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central finite differences for op-level gradient tests.
    use super::*;

    /// Checks d(sum(w * f(x)))/dx against finite differences for each input.
    pub fn check<F>(inputs: &[Tensor], f: F, step: f64, tol: f64)
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Var<'t>,
    {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
        let out = f(&tape, &vars);
        let out_shape = out.shape();
        let weights = Tensor::from_fn(&out_shape, |i| ((i * 7919 % 13) as f64 - 6.0) / 5.0);
        let w = tape.constant(weights.clone());
        let loss = weighted_sum(out, w);
        let grads = tape.backward(loss);

        let eval = |xs: &[Tensor]| -> f64 {
            let tape = Tape::new();
            let vars: Vec<_> = xs.iter().map(|t| tape.variable(t.clone())).collect();
            let out = f(&tape, &vars);
            let v = out.value();
            v.data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
        };

        for (k, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
            for i in 0..input.numel() {
                let mut plus: Vec<Tensor> = inputs.to_vec();
                plus[k].data_mut()[i] += step;
                let mut minus: Vec<Tensor> = inputs.to_vec();
                minus[k].data_mut()[i] -= step;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let a = analytic.data()[i];
                let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1.0));
                assert!(
                    err < tol,
                    "input {k} elem {i}: analytic {a} vs numeric {numeric} (err {err})"
                );
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_accumulates_over_fanout() {
        let tape = Tape::new();
        let x = tape.variable(Tensor::new(&[2], vec![1.0, -2.0]).unwrap());
        let y = add(x, x).unwrap();
        let z = mul(y, x).unwrap(); // 2x^2
        let loss = sum_all(z);
        let g = tape.backward(loss);
        assert_eq!(g.get(x).unwrap().data(), &[4.0, -8.0]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::full(&[3], 2.0));
        let w = tape.variable(Tensor::full(&[3], 0.5));
        let loss = sum_all(mul(x, w).unwrap());
        let g = tape.backward(loss);
        assert!(g.get(x).is_none());
        assert_eq!(g.get(w).unwrap().data(), &[2.0, 2.0, 2.0]);
    }
}
