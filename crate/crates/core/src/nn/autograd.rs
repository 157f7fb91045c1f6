//! Reference-counted reverse-mode autodiff.
//!
//! Every op returns a [`Var`] that keeps its parents alive only when a
//! gradient is needed, so inference graphs are freed as soon as values go
//! out of scope.

use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use super::tensor::Tensor;

type BackwardFn = Box<dyn Fn(&Tensor) -> Vec<Option<Tensor>>>;

struct GradFn {
    parents: Vec<Var>,
    backward: BackwardFn,
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    param: Option<usize>,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Var(Rc<Node>);

impl std::fmt::Debug for Var {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    pub fn constant(value: Tensor) -> Var {
        Var(Rc::new(Node {
            value,
            requires_grad: false,
            param: None,
            grad_fn: None,
        }))
    }

    /// A leaf bound to parameter slot `param`.
    pub fn param(value: Tensor, param: usize, requires_grad: bool) -> Var {
        Var(Rc::new(Node {
            value,
            requires_grad,
            param: Some(param),
            grad_fn: None,
        }))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Result of an op. `backward` maps the output gradient to one optional
    /// gradient per parent; it is kept only if some parent needs a gradient.
    pub fn from_op<F>(value: Tensor, parents: Vec<Var>, backward: F) -> Var
    where
        F: Fn(&Tensor) -> Vec<Option<Tensor>> + 'static,
    {
        let requires_grad = parents.iter().any(Var::requires_grad);
        let grad_fn = requires_grad.then(|| GradFn {
            parents,
            backward: Box::new(backward),
        });
        Var(Rc::new(Node {
            value,
            requires_grad,
            param: None,
            grad_fn,
        }))
    }

    fn key(&self) -> *const Node {
        Rc::as_ptr(&self.0)
    }
}

/// Backpropagates from a scalar `loss`, returning gradients per parameter slot.
pub fn backward(loss: &Var, n_params: usize) -> Vec<Option<Tensor>> {
    assert_eq!(loss.value().len(), 1, "backward needs a scalar loss");
    let mut grads_out: Vec<Option<Tensor>> = vec![None; n_params];
    if !loss.requires_grad() {
        return grads_out;
    }

    // Iterative post-order DFS gives a topological order.
    let mut order: Vec<Var> = Vec::new();
    let mut visited: HashSet<*const Node> = HashSet::new();
    let mut stack: Vec<(Var, bool)> = vec![(loss.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !visited.insert(v.key()) {
            continue;
        }
        stack.push((v.clone(), true));
        if let Some(gf) = &v.0.grad_fn {
            for p in &gf.parents {
                if p.requires_grad() && !visited.contains(&p.key()) {
                    stack.push((p.clone(), false));
                }
            }
        }
    }

    let mut grads: HashMap<*const Node, Tensor> = HashMap::new();
    grads.insert(loss.key(), Tensor::full(loss.shape(), 1.0));
    for v in order.iter().rev() {
        let Some(g) = grads.remove(&v.key()) else {
            continue;
        };
        if let Some(slot) = v.0.param {
            match &mut grads_out[slot] {
                Some(acc) => acc.add_assign(&g),
                empty => *empty = Some(g.clone()),
            }
        }
        if let Some(gf) = &v.0.grad_fn {
            let parent_grads = (gf.backward)(&g);
            debug_assert_eq!(parent_grads.len(), gf.parents.len());
            for (p, pg) in gf.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !p.requires_grad() {
                    continue;
                }
                debug_assert_eq!(pg.shape(), p.shape(), "gradient shape");
                match grads.get_mut(&p.key()) {
                    Some(acc) => acc.add_assign(&pg),
                    None => {
                        grads.insert(p.key(), pg);
                    }
                }
            }
        }
    }
    grads_out
}
