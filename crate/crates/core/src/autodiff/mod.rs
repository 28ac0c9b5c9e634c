//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! A [`Graph`] records each operation as a node holding its computed value.
//! Node ids are insertion indices, so every node's inputs precede it and the
//! tape is always in topological order. [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients additively, so a node used twice gets
//! the sum of both contributions.

mod gradcheck;
mod kernels;
mod ops;

pub use gradcheck::{grad_check, grad_check_against, grad_check_entries, GradCheckReport};
pub use ops::Op;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
    /// True when some `requires_grad` leaf is reachable through the inputs.
    needs_grad: bool,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
    no_grad: bool,
}

/// Result of a backward pass: `∂loss/∂node` for every node on a path from a
/// `requires_grad` leaf to the loss.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.grads.get_mut(id.0).and_then(Option::take)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose parameters are bound as constants. Used for inference.
    pub fn no_grad() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        let requires_grad = requires_grad && !self.no_grad;
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            requires_grad,
            needs_grad: requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    /// Binds a named parameter as a trainable leaf. Binding the same name
    /// twice returns the first node, so shared parameters fan out.
    pub fn param(&mut self, name: &str, value: &Tensor) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.leaf(value.clone(), true);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn param_node(&self, name: &str) -> Option<NodeId> {
        self.params.get(name).copied()
    }

    fn check(&self, id: NodeId) -> Result<&Node> {
        self.nodes.get(id.0).ok_or(Error::InvalidNode(id.0))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn try_value(&self, id: NodeId) -> Result<&Tensor> {
        Ok(&self.check(id)?.value)
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id.0].op
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Appends `op(inputs)` to the tape and returns the new node.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if op == Op::Leaf {
            return Err(Error::InvalidArgument("use `leaf` to insert leaves".into()));
        }
        for &id in inputs {
            self.check(id)?;
        }
        let value = {
            let vals: Vec<&Tensor> = inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            ops::forward(&op, &vals)?
        };
        let needs_grad =
            op != Op::Detach && inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
            requires_grad: false,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// String-keyed entry point: `kind` is an op name such as `"matmul"`.
    pub fn forward_op(&mut self, kind: &str, inputs: &[NodeId], attrs: &[f64]) -> Result<NodeId> {
        let op = Op::from_name(kind, attrs)?;
        self.apply(op, inputs)
    }

    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let node = self.check(loss)?;
        if node.value.len() != 1 {
            return Err(Error::NonScalarLoss(node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
            let wanted: Vec<bool> = node.inputs.iter().map(|i| self.nodes[i.0].needs_grad).collect();
            let mut local: Vec<Option<Vec<f64>>> = node
                .inputs
                .iter()
                .map(|i| grads[i.0].take())
                .collect();
            // A node may appear twice among its own inputs (x * x); fold the
            // duplicate slots so each source accumulates once.
            ops::backward(&node.op, &inputs, &node.value, &g, &wanted, &mut local);
            for (slot, id) in local.into_iter().zip(&node.inputs) {
                let Some(v) = slot else { continue };
                match &mut grads[id.0] {
                    Some(existing) => existing.iter_mut().zip(&v).for_each(|(a, b)| *a += b),
                    empty => *empty = Some(v),
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Overwrites one entry of a leaf and recomputes every later node.
    pub(crate) fn set_leaf_entry(&mut self, leaf: NodeId, index: usize, value: f64) -> Result<()> {
        let node = self.check(leaf)?;
        if node.op != Op::Leaf {
            return Err(Error::InvalidArgument(format!("node {} is not a leaf", leaf.0)));
        }
        self.nodes[leaf.0].value.data_mut()[index] = value;
        self.replay_after(leaf)
    }

    fn replay_after(&mut self, from: NodeId) -> Result<()> {
        for idx in from.0 + 1..self.nodes.len() {
            if self.nodes[idx].op == Op::Leaf {
                continue;
            }
            let value = {
                let node = &self.nodes[idx];
                let vals: Vec<&Tensor> = node.inputs.iter().map(|i| &self.nodes[i.0].value).collect();
                ops::forward(&node.op, &vals)?
            };
            self.nodes[idx].value = value;
        }
        Ok(())
    }

    /// Whether an op that is non-differentiable at isolated points lies in
    /// `[from, to]`.
    pub(crate) fn has_kink_between(&self, from: NodeId, to: NodeId) -> bool {
        self.nodes[from.0..=to.0].iter().any(|n| n.op.has_kinks())
    }

    /// The active branch of every kinked op in `(from, to]`: the sign of each
    /// relu/abs input and the winner of each max-pool window. Two points with
    /// equal patterns lie on the same smooth piece.
    pub(crate) fn kink_pattern(&self, from: NodeId, to: NodeId) -> Vec<usize> {
        let mut out = Vec::new();
        for node in &self.nodes[from.0 + 1..=to.0] {
            match node.op {
                Op::Relu | Op::Abs => {
                    let x = &self.nodes[node.inputs[0].0].value;
                    out.extend(x.data().iter().map(|&v| (v > 0.0) as usize + 2 * (v < 0.0) as usize));
                }
                Op::MaxPool2d { size } => {
                    out.extend(ops::pool_argmax(&self.nodes[node.inputs[0].0].value, size));
                }
                _ => {}
            }
        }
        out
    }
}

macro_rules! unary {
    ($($name:ident => $op:expr),* $(,)?) => {
        impl Graph {
            $(pub fn $name(&mut self, x: NodeId) -> Result<NodeId> {
                self.apply($op, &[x])
            })*
        }
    };
}

macro_rules! binary {
    ($($name:ident => $op:expr),* $(,)?) => {
        impl Graph {
            $(pub fn $name(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
                self.apply($op, &[a, b])
            })*
        }
    };
}

unary! {
    relu => Op::Relu,
    exp => Op::Exp,
    log => Op::Log,
    abs => Op::Abs,
    square => Op::Square,
    sqrt => Op::Sqrt,
    sum => Op::Sum,
    mean => Op::Mean,
    log_softmax => Op::LogSoftmax,
    detach => Op::Detach,
}

binary! {
    add => Op::Add,
    sub => Op::Sub,
    mul => Op::Mul,
    div => Op::Div,
    matmul => Op::MatMul,
    add_bias => Op::AddBias,
}

impl Graph {
    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Op::AddScalar(c), &[x])
    }

    pub fn mul_scalar(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        self.apply(Op::MulScalar(c), &[x])
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, padding: usize) -> Result<NodeId> {
        self.apply(Op::Conv2d { stride, padding }, &[x, w, b])
    }

    pub fn maxpool2d(&mut self, x: NodeId, size: usize) -> Result<NodeId> {
        self.apply(Op::MaxPool2d { size }, &[x])
    }

    pub fn sum_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(Op::SumAxis(axis), &[x])
    }

    pub fn mean_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(Op::MeanAxis(axis), &[x])
    }

    pub fn var_axis(&mut self, x: NodeId, axis: usize) -> Result<NodeId> {
        self.apply(Op::VarAxis(axis), &[x])
    }

    pub fn expand(&mut self, x: NodeId, axis: usize, size: usize) -> Result<NodeId> {
        self.apply(Op::Expand { axis, size }, &[x])
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        self.apply(Op::Concat { axis }, parts)
    }

    pub fn affine(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId> {
        self.apply(Op::Affine, &[x, gamma, beta])
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        self.apply(Op::Reshape(shape), &[x])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_leaf(g: &mut Graph, v: &[f64]) -> NodeId {
        g.leaf(Tensor::from_vec(v.to_vec()), true)
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[-1.0, 0.0, 2.0]);
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn concat_of_two_512_vectors_is_1024() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::full(&[1, 512], 1.0), true);
        let b = g.leaf(Tensor::full(&[1, 512], 2.0), true);
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).shape(), &[1, 1024]);
    }

    #[test]
    fn identity_kernel_convolution() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..35).map(|v| v as f64 * 0.3 - 2.0).collect();
        let x = g.leaf(Tensor::new(vec![1, 1, 5, 7], data.clone()).unwrap(), false);
        let w = g.leaf(Tensor::full(&[1, 1, 1, 1], 1.0), true);
        let b = g.leaf(Tensor::zeros(&[1]), true);
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[3, 4], 0.7), true);
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 12]);
    }

    #[test]
    fn square_gradient_at_three() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[3.0]);
        let y = g.square(x).unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn l1_gradient_sign_rule() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(164.0));
        let f = vec_leaf(&mut g, &[100.0]);
        let d = g.sub(z, f).unwrap();
        let l = g.abs(d).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(f).unwrap(), &[-1.0]);
        let report = grad_check(&mut g, l, f, 1e-4).unwrap();
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn kinks_have_zero_subgradient() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[0.0]);
        let r = g.relu(x).unwrap();
        let a = g.abs(x).unwrap();
        let s = g.add(r, a).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1.5]);
        let y = g.add(x, x).unwrap();
        assert_eq!(g.backward(y).unwrap().get(x).unwrap(), &[2.0]);
        let sq = g.mul(x, x).unwrap();
        assert_eq!(g.backward(sq).unwrap().get(x).unwrap(), &[3.0]);
    }

    #[test]
    fn shared_param_binding_fans_out() {
        let mut g = Graph::new();
        let w = Tensor::from_vec(vec![2.0]);
        let a = g.param("w", &w);
        let b = g.param("w", &w);
        assert_eq!(a, b);
        let s = g.add(a, b).unwrap();
        assert_eq!(g.backward(s).unwrap().get(a).unwrap(), &[2.0]);
    }

    #[test]
    fn concat_routes_slices_unchanged() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::full(&[2, 2], 1.0), true);
        let b = g.leaf(Tensor::full(&[2, 3], 1.0), true);
        let c = g.concat(&[a, b], 1).unwrap();
        let w = g.constant(Tensor::new(vec![2, 5], (0..10).map(f64::from).collect()).unwrap());
        let p = g.mul(c, w).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(a).unwrap(), &[0.0, 1.0, 5.0, 6.0]);
        assert_eq!(grads.get(b).unwrap(), &[2.0, 3.0, 4.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[1.0, 2.0]);
        let d = g.detach(x).unwrap();
        let y = g.add(x, d).unwrap();
        let s = g.sum(y).unwrap();
        assert_eq!(g.backward(s).unwrap().get(x).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]), true);
        let b = g.leaf(Tensor::zeros(&[3, 2]), true);
        let err = g.add(a, b).unwrap_err();
        match err {
            Error::ShapeMismatch { op, lhs, rhs } => {
                assert_eq!(op, "add");
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![3, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(g.matmul(a, a).is_err());
        assert!(matches!(
            g.forward_op("softplus", &[a], &[]),
            Err(Error::UnknownOp(_))
        ));
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]), true);
        assert!(matches!(g.backward(a), Err(Error::NonScalarLoss(_))));
        assert!(matches!(g.backward(NodeId(99)), Err(Error::InvalidNode(99))));
    }

    #[test]
    fn non_finite_forward_is_rejected() {
        let mut g = Graph::new();
        let x = vec_leaf(&mut g, &[-1.0]);
        assert!(matches!(g.log(x), Err(Error::NonFinite { op: "log" })));
    }
}
