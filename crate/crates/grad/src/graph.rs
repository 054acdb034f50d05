use std::collections::HashMap;

use crate::error::{GradError, Result};
use crate::ops::{backward_op, Op};
use crate::params::{ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

pub(crate) struct Node<T> {
    pub value: Tensor<T>,
    pub op: Op<T>,
    pub inputs: Vec<usize>,
    pub requires_grad: bool,
}

/// A single forward pass recorded in topological order.
///
/// Nodes are appended as operations run, so the node list is already a
/// topological order and the backward sweep is a reverse scan.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: Vec<usize>) -> Var {
        let requires_grad = match op {
            Op::Leaf { grad } => grad,
            Op::Param(_) => true,
            Op::StopGradient => false,
            _ => inputs.iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            inputs,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf { grad: false }, Vec::new())
    }

    /// Free leaf that receives a gradient (used for inputs under test).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf { grad: true }, Vec::new())
    }

    /// Brings a stored parameter onto the tape. Repeated calls with the same
    /// id return the same node, so tied weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id), Vec::new());
        self.params.insert(id, v);
        v
    }

    /// Parameter value entered as a constant (no gradient flows to it).
    pub fn param_detached(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.constant(store.get(id).clone())
    }

    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0].f64()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the scalar `loss` with respect to every node on the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let relevant: Vec<bool> = self.nodes.iter().map(|n| n.requires_grad).collect();
        self.sweep(loss, relevant)
    }

    /// Gradient of `loss` restricted to the paths that reach `wrt`.
    ///
    /// Nodes that do not depend on any of `wrt` are skipped entirely, so this
    /// is a cheap replay when `wrt` sits close to the loss.
    pub fn backward_wrt(&self, loss: Var, wrt: &[Var]) -> Result<Gradients<T>> {
        let mut relevant = vec![false; self.nodes.len()];
        for w in wrt {
            relevant[w.0] = self.nodes[w.0].requires_grad;
        }
        for i in 0..self.nodes.len() {
            if !relevant[i]
                && self.nodes[i].requires_grad
                && self.nodes[i].inputs.iter().any(|&j| relevant[j])
            {
                relevant[i] = true;
            }
        }
        self.sweep(loss, relevant)
    }

    fn sweep(&self, loss: Var, relevant: Vec<bool>) -> Result<Gradients<T>> {
        let root = &self.nodes[loss.0];
        if root.value.numel() != 1 {
            return Err(GradError::NonScalarLoss(root.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if relevant[loss.0] {
            grads[loss.0] = Some(Tensor::full(root.value.shape(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            if !relevant[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.inputs.is_empty() {
                grads[i] = Some(g);
                continue;
            }
            let needs: Vec<bool> = node.inputs.iter().map(|&j| relevant[j]).collect();
            if !needs.iter().any(|&b| b) {
                continue;
            }
            let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|&j| &self.nodes[j].value).collect();
            let contribs = backward_op(&node.op, &inputs, &node.value, &g, &needs)?;
            for ((&j, c), need) in node.inputs.iter().zip(contribs).zip(needs) {
                let (Some(c), true) = (c, need) else { continue };
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&c),
                    slot @ None => *slot = Some(c),
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.params.iter().map(|(&p, &v)| (p, v)).collect(),
        })
    }
}

/// Result of a backward sweep.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf node (input or parameter). `None` when no path
    /// from the loss reaches it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradients of every parameter that appeared on the tape, sorted by id.
    /// Parameters that were unreachable get an explicit zero tensor.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<(ParamId, Tensor<T>)> {
        let mut out: Vec<(ParamId, Tensor<T>)> = self
            .params
            .iter()
            .map(|&(p, v)| {
                let g = self
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(p).shape()));
                (p, g)
            })
            .collect();
        out.sort_by_key(|(p, _)| *p);
        out
    }

    /// L2 norm of the gradient over the given leaves (missing grads count as 0).
    pub fn norm_over(&self, vars: &[Var]) -> f64 {
        vars.iter()
            .filter_map(|&v| self.get(v))
            .map(|t| t.sq_norm())
            .sum::<f64>()
            .sqrt()
    }
}
