//! Flow graphs of elementary tensor operations.
//!
//! Nodes are appended in construction order, and every node may only refer
//! to nodes created before it, so the node list is always a valid
//! topological order. A forward pass fills each node's output slot; a
//! backward pass seeds the scalar output with gradient 1 and walks the list
//! in reverse, summing `g_s · ∂o_s/∂o_a` into every predecessor.

mod gradcheck;
mod ops;

use std::collections::BTreeMap;

use serde::Serialize;

pub use gradcheck::{
    central_difference, check_gradient, CheckOptions, CheckStatus, CoordinateCheck,
    GradientCheckReport, DEFAULT_STEP, DEFAULT_TOLERANCE,
};
pub use ops::{LossKind, Op, Penalty};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How an input node is fed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputRole {
    /// Part of θ; gradients are reported by [`Graph::backward`].
    Parameter,
    /// Part of the example z = (x, y).
    Example,
}

#[derive(Clone, Debug)]
pub struct Node {
    name: String,
    op: Op,
    inputs: Vec<NodeId>,
    value: Option<Tensor>,
    grad: Option<Tensor>,
}

impl Node {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn op(&self) -> &Op {
        &self.op
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn value(&self) -> Option<&Tensor> {
        self.value.as_ref()
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }
}

/// Values for the input nodes of a graph.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    values: BTreeMap<NodeId, Tensor>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, id: NodeId, value: Tensor) -> &mut Self {
        self.values.insert(id, value);
        self
    }

    pub fn with(mut self, id: NodeId, value: Tensor) -> Self {
        self.values.insert(id, value);
        self
    }

    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(&id)
    }

    pub fn get_mut(&mut self, id: NodeId) -> Option<&mut Tensor> {
        self.values.get_mut(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.values.iter().map(|(k, v)| (*k, v))
    }
}

/// Gradients of the output with respect to each parameter node.
pub type Gradients = BTreeMap<NodeId, Tensor>;

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    parameters: Vec<NodeId>,
    examples: Vec<NodeId>,
    tracked: Vec<NodeId>,
    output: Option<NodeId>,
    debug: bool,
    forward_done: bool,
    sign_flips: Vec<NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// In debug mode every slot is filled with NaN before each pass, so a
    /// slot that is read without having been written shows up as NaN.
    pub fn set_debug(&mut self, debug: bool) {
        self.debug = debug;
    }

    fn push(&mut self, name: Option<&str>, op: Op, inputs: Vec<NodeId>) -> NodeId {
        let id = NodeId(self.nodes.len());
        let name = name.map_or_else(|| format!("{}#{}", op.label(), id.0), str::to_owned);
        self.nodes.push(Node {
            name,
            op,
            inputs,
            value: None,
            grad: None,
        });
        self.forward_done = false;
        id
    }

    fn check_ids(&self, ids: &[NodeId]) {
        for id in ids {
            assert!(
                id.0 < self.nodes.len(),
                "node {} does not belong to this graph",
                id.0
            );
        }
    }

    pub fn parameter(&mut self, name: &str) -> NodeId {
        let id = self.push(Some(name), Op::Input(InputRole::Parameter), Vec::new());
        self.parameters.push(id);
        id
    }

    pub fn example(&mut self, name: &str) -> NodeId {
        let id = self.push(Some(name), Op::Input(InputRole::Example), Vec::new());
        self.examples.push(id);
        id
    }

    /// Appends an operation node. Panics if an input id was not created by
    /// this graph, which can only be a programming error.
    pub fn op(&mut self, op: Op, inputs: &[NodeId]) -> NodeId {
        self.named_op(None, op, inputs)
    }

    pub fn named_op(&mut self, name: Option<&str>, op: Op, inputs: &[NodeId]) -> NodeId {
        assert!(
            !matches!(op, Op::Input(_)),
            "use parameter() or example() for inputs"
        );
        self.check_ids(inputs);
        self.push(name, op, inputs.to_vec())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.op(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.op(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.op(Op::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.op(Op::Scale(factor), &[a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.op(Op::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.op(Op::Transpose, &[a])
    }

    /// `x·Wᵀ + b` with `W` of shape (fan-out, fan-in).
    pub fn affine(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        self.op(Op::Affine, &[x, weight, bias])
    }

    pub fn activation(&mut self, kind: crate::nn::Nonlinearity, a: NodeId) -> NodeId {
        self.op(Op::Activation(kind), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.op(Op::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.op(Op::Mean, &[a])
    }

    pub fn loss(&mut self, kind: LossKind, prediction: NodeId, target: NodeId) -> NodeId {
        self.op(Op::Loss(kind), &[prediction, target])
    }

    /// Loss with per-coordinate weights (same shape as the target).
    pub fn weighted_loss(
        &mut self,
        kind: LossKind,
        prediction: NodeId,
        target: NodeId,
        weights: NodeId,
    ) -> NodeId {
        self.op(Op::Loss(kind), &[prediction, target, weights])
    }

    /// Designates the scalar output node carrying the loss.
    pub fn set_output(&mut self, id: NodeId) {
        self.check_ids(&[id]);
        self.output = Some(id);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    /// Requests that an example node receives a gradient during backward.
    pub fn track_gradient(&mut self, id: NodeId) {
        self.check_ids(&[id]);
        if !self.tracked.contains(&id) {
            self.tracked.push(id);
        }
    }

    /// Fault-injection hook for testing gradient checkers: the reported
    /// gradient of `param` has its sign flipped.
    pub fn inject_sign_flip(&mut self, param: NodeId) {
        self.sign_flips.push(param);
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn parameters(&self) -> &[NodeId] {
        &self.parameters
    }

    pub fn examples(&self) -> &[NodeId] {
        &self.examples
    }

    pub fn find(&self, name: &str) -> Option<NodeId> {
        self.nodes.iter().position(|n| n.name == name).map(NodeId)
    }

    pub fn value(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].value.as_ref()
    }

    pub fn gradient(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Fills every output slot in topological order.
    pub fn evaluate(&mut self, bindings: &Bindings) -> Result<()> {
        self.forward_done = false;
        for (id, _) in bindings.iter() {
            if id.0 >= self.nodes.len() || !matches!(self.nodes[id.0].op, Op::Input(_)) {
                return Err(Error::input(format!(
                    "binding for node {} which is not an input",
                    id.0
                )));
            }
        }
        for i in 0..self.nodes.len() {
            if self.debug {
                if let Some(v) = self.nodes[i].value.as_mut() {
                    v.map_inplace(|_| f64::NAN);
                }
            }
            let value = match self.nodes[i].op {
                Op::Input(_) => bindings
                    .get(NodeId(i))
                    .cloned()
                    .ok_or_else(|| Error::UnboundInput(self.nodes[i].name.clone()))?,
                _ => {
                    let node = &self.nodes[i];
                    let inputs: Vec<&Tensor> = node
                        .inputs
                        .iter()
                        .map(|p| {
                            self.nodes[p.0]
                                .value
                                .as_ref()
                                .expect("predecessor evaluated")
                        })
                        .collect();
                    node.op.forward(&inputs).map_err(|e| Error::NodeShape {
                        node: node.name.clone(),
                        detail: e.to_string(),
                    })?
                }
            };
            self.nodes[i].value = Some(value);
        }
        self.forward_done = true;
        Ok(())
    }

    /// Forward pass returning the scalar loss.
    pub fn forward(&mut self, bindings: &Bindings) -> Result<f64> {
        let out = self.output.ok_or(Error::NoOutput)?;
        self.evaluate(bindings)?;
        let v = self.nodes[out.0].value.as_ref().expect("evaluated");
        if v.len() != 1 {
            return Err(Error::NonScalarOutput(self.nodes[out.0].name.clone()));
        }
        Ok(v.data()[0])
    }

    /// Reverse pass. Requires a completed [`forward`](Self::forward) and
    /// returns the gradient for every parameter node.
    pub fn backward(&mut self) -> Result<Gradients> {
        if !self.forward_done {
            return Err(Error::BackwardBeforeForward);
        }
        let out = self.output.ok_or(Error::NoOutput)?;
        let out_shape = self.nodes[out.0]
            .value
            .as_ref()
            .expect("evaluated")
            .shape()
            .to_vec();
        if out_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarOutput(self.nodes[out.0].name.clone()));
        }

        let needs = self.needs_gradient();
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.nodes[out.0].grad = Some(Tensor::full(&out_shape, 1.0));

        for i in (0..self.nodes.len()).rev() {
            if matches!(self.nodes[i].op, Op::Input(_)) {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let node = &self.nodes[i];
            let wanted: Vec<bool> = node.inputs.iter().map(|p| needs[p.0]).collect();
            if wanted.iter().any(|&w| w) {
                let inputs: Vec<&Tensor> = node
                    .inputs
                    .iter()
                    .map(|p| self.nodes[p.0].value.as_ref().expect("evaluated"))
                    .collect();
                let output = node.value.as_ref().expect("evaluated");
                let input_grads =
                    node.op
                        .backward(&inputs, output, &grad, &wanted)
                        .map_err(|e| Error::NodeShape {
                            node: node.name.clone(),
                            detail: e.to_string(),
                        })?;
                let preds = node.inputs.clone();
                for (p, g) in preds.into_iter().zip(input_grads) {
                    let Some(g) = g else { continue };
                    match self.nodes[p.0].grad.as_mut() {
                        Some(acc) => acc.add_assign(&g)?,
                        None => self.nodes[p.0].grad = Some(g),
                    }
                }
            }
            self.nodes[i].grad = Some(grad);
        }

        let fill = if self.debug { f64::NAN } else { 0.0 };
        for node in &mut self.nodes {
            if node.grad.is_none() {
                let shape = node.value.as_ref().expect("evaluated").shape().to_vec();
                node.grad = Some(Tensor::full(&shape, fill));
            }
        }

        let mut grads = Gradients::new();
        for &p in &self.parameters {
            let mut g = self.nodes[p.0].grad.clone().expect("filled");
            if self.sign_flips.contains(&p) {
                g.map_inplace(|v| -v);
            }
            grads.insert(p, g);
        }
        Ok(grads)
    }

    /// Marks nodes that lie on a path from a parameter or tracked input.
    fn needs_gradient(&self) -> Vec<bool> {
        let mut needs = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            needs[i] = match node.op {
                Op::Input(InputRole::Parameter) => true,
                Op::Input(InputRole::Example) => self.tracked.contains(&NodeId(i)),
                _ => node.inputs.iter().any(|p| needs[p.0]),
            };
        }
        needs
    }

    /// Distances of every kink-sensitive input value to the nearest kink,
    /// one vector per kinked node, in node order. Valid after a forward pass.
    pub(crate) fn kink_distances(&self) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let kinks = node.op.kinks();
            if kinks.is_empty() {
                continue;
            }
            let input = self.nodes[node.inputs[0].0]
                .value
                .as_ref()
                .expect("evaluated");
            out.push(
                input
                    .data()
                    .iter()
                    .map(|&a| {
                        kinks
                            .iter()
                            .map(|k| (a - k).abs())
                            .fold(f64::INFINITY, f64::min)
                    })
                    .collect(),
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Nonlinearity;

    fn linear_square_graph() -> (Graph, NodeId, NodeId, NodeId) {
        let mut g = Graph::new();
        let w = g.parameter("w");
        let x = g.example("x");
        let y = g.example("y");
        let pred = g.matmul(w, x);
        let loss = g.loss(LossKind::SquaredError, pred, y);
        g.set_output(loss);
        (g, w, x, y)
    }

    #[test]
    fn squared_loss_forward_and_backward() {
        let (mut g, w, x, y) = linear_square_graph();
        let b = Bindings::new()
            .with(w, Tensor::vector(vec![1.0, 1.0]))
            .with(x, Tensor::vector(vec![1.0, 2.0]))
            .with(y, Tensor::scalar(3.0));
        assert_eq!(g.forward(&b).unwrap(), 0.0);

        let b = Bindings::new()
            .with(w, Tensor::vector(vec![0.0, 0.0]))
            .with(x, Tensor::vector(vec![1.0, 2.0]))
            .with(y, Tensor::scalar(3.0));
        assert_eq!(g.forward(&b).unwrap(), 9.0);
        let grads = g.backward().unwrap();
        assert_eq!(grads[&w].data(), &[-6.0, -12.0]);
        assert_eq!(g.gradient(g.output().unwrap()).unwrap().data(), &[1.0]);
    }

    #[test]
    fn linear_map_gradient_is_input() {
        let mut g = Graph::new();
        let w = g.parameter("w");
        let x = g.example("x");
        let l = g.matmul(w, x);
        g.set_output(l);
        let b = Bindings::new()
            .with(w, Tensor::vector(vec![2.0]))
            .with(x, Tensor::vector(vec![3.0]));
        assert_eq!(g.forward(&b).unwrap(), 6.0);
        assert_eq!(g.backward().unwrap()[&w].data(), &[3.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let a = g.parameter("a");
        let s = g.activation(Nonlinearity::Sigmoid, a);
        g.set_output(s);
        assert_eq!(
            g.forward(&Bindings::new().with(a, Tensor::scalar(0.0)))
                .unwrap(),
            0.5
        );
    }

    #[test]
    fn errors_are_structured() {
        let (mut g, w, x, _y) = linear_square_graph();
        assert!(matches!(g.backward(), Err(Error::BackwardBeforeForward)));
        let b = Bindings::new()
            .with(w, Tensor::vector(vec![1.0]))
            .with(x, Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(g.forward(&b), Err(Error::UnboundInput(n)) if n == "y"));
        let y = g.find("y").unwrap();
        let b = b.with(y, Tensor::scalar(1.0));
        match g.forward(&b) {
            Err(Error::NodeShape { node, .. }) => assert!(node.starts_with("matmul")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut g = Graph::new();
        let a = g.parameter("a");
        let t = g.activation(Nonlinearity::Tanh, a);
        g.set_output(t);
        let b = Bindings::new().with(a, Tensor::vector(vec![0.0, 1.0]));
        assert!(matches!(g.forward(&b), Err(Error::NonScalarOutput(_))));
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        // L = sum(w*w) + sum(w): dL/dw = 2w + 1
        let mut g = Graph::new();
        let w = g.parameter("w");
        let sq = g.mul(w, w);
        let s1 = g.sum(sq);
        let s2 = g.sum(w);
        let l = g.add(s1, s2);
        g.set_output(l);
        g.forward(&Bindings::new().with(w, Tensor::vector(vec![1.0, -2.0])))
            .unwrap();
        assert_eq!(g.backward().unwrap()[&w].data(), &[3.0, -3.0]);
        // repeated backward gives the same values, slots are reset
        assert_eq!(g.backward().unwrap()[&w].data(), &[3.0, -3.0]);
    }

    #[test]
    fn debug_mode_marks_unreached_gradients() {
        let mut g = Graph::new();
        let w = g.parameter("w");
        let unused = g.parameter("unused");
        let s = g.sum(w);
        g.set_output(s);
        g.set_debug(true);
        let b = Bindings::new()
            .with(w, Tensor::vector(vec![1.0]))
            .with(unused, Tensor::vector(vec![1.0]));
        g.forward(&b).unwrap();
        let grads = g.backward().unwrap();
        assert!(grads[&unused].data()[0].is_nan());
        assert_eq!(grads[&w].data(), &[1.0]);
        g.set_debug(false);
        g.forward(&b).unwrap();
        assert_eq!(g.backward().unwrap()[&unused].data(), &[0.0]);
    }

    #[test]
    fn example_gradients_only_when_tracked() {
        let (mut g, w, x, y) = linear_square_graph();
        let b = Bindings::new()
            .with(w, Tensor::vector(vec![0.0, 1.0]))
            .with(x, Tensor::vector(vec![1.0, 2.0]))
            .with(y, Tensor::scalar(3.0));
        g.forward(&b).unwrap();
        g.backward().unwrap();
        assert_eq!(g.gradient(x).unwrap().data(), &[0.0, 0.0]);
        g.track_gradient(x);
        g.forward(&b).unwrap();
        g.backward().unwrap();
        // 2(ŷ−y)·w with ŷ = 2
        assert_eq!(g.gradient(x).unwrap().data(), &[0.0, -2.0]);
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let (mut g, w, x, y) = linear_square_graph();
        let b = Bindings::new()
            .with(w, Tensor::vector(vec![0.1, 0.7]))
            .with(x, Tensor::vector(vec![1.3, 2.9]))
            .with(y, Tensor::scalar(3.1));
        let a = g.forward(&b).unwrap();
        let c = g.forward(&b).unwrap();
        assert_eq!(a.to_bits(), c.to_bits());
    }
}
