//! Reverse-mode automatic differentiation on an append-only graph.
//!
//! The backward pass does not write raw gradient buffers: it appends new
//! graph nodes built from the same primitive set. Every primitive's adjoint
//! is therefore itself differentiable, which is what makes gradients of
//! Jacobian norms with respect to parameters available (double backward).

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Primitive operation kinds. Attributes that shape the output (scale
/// factor, target shapes, gather indices) live on the variant so a graph
/// can be re-executed from its records alone.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Constant,
    Add,
    Subtract,
    Multiply,
    Scale(f64),
    Square,
    Relu,
    Step,
    Exp,
    Log,
    Recip,
    Matmul,
    Transpose,
    Sum,
    Mean,
    SumAxis0,
    SumAxis1,
    BcastAxis0 { rows: usize },
    BcastAxis1 { cols: usize },
    BcastScalar { shape: Vec<usize> },
    GatherRow { indices: Vec<usize> },
    ScatterRow { indices: Vec<usize>, cols: usize },
    LogSoftmax,
    Reshape { shape: Vec<usize> },
    Conv2d,
    Pad2d { ph: usize, pw: usize },
    Crop2d { ph: usize, pw: usize },
    FlipHw,
    SwapIo,
    AvgPool2d,
    Upsample2d,
    BcastChan { batch: usize, h: usize, w: usize },
    SumChan,
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation record. Inputs always precede outputs, so the
/// node order is a topological order and reverse iteration is a valid
/// backward schedule.
pub struct Graph {
    nodes: Vec<Node>,
    // set while a non-create_graph backward appends adjoint nodes
    detach_new_nodes: bool,
}

/// Gradients of one backward pass: leaf id -> node id of its gradient.
/// Every requested leaf has an entry; unreachable leaves map to zeros.
pub struct GradMap {
    grads: BTreeMap<NodeId, NodeId>,
}

impl GradMap {
    pub fn grad_id(&self, leaf: NodeId) -> NodeId {
        *self
            .grads
            .get(&leaf)
            .unwrap_or_else(|| panic!("no gradient recorded for node {leaf}"))
    }

    pub fn grad<'g>(&self, graph: &'g Graph, leaf: NodeId) -> &'g Tensor {
        graph.value(self.grad_id(leaf))
    }

    pub fn entries(&self) -> impl Iterator<Item = (NodeId, NodeId)> + '_ {
        self.grads.iter().map(|(&l, &g)| (l, g))
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            detach_new_nodes: false,
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.insert(Node {
            op: Op::Leaf,
            inputs: vec![],
            value,
            requires_grad: true,
        })
    }

    /// Non-differentiable input (data batches, masks, projection vectors).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.insert(Node {
            op: Op::Constant,
            inputs: vec![],
            value,
            requires_grad: false,
        })
    }

    pub fn constant_scalar(&mut self, v: f64) -> Result<NodeId> {
        Ok(self.constant(Tensor::scalar(v)?))
    }

    fn insert(&mut self, mut node: Node) -> NodeId {
        if self.detach_new_nodes {
            node.requires_grad = false;
        }
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        for &i in &inputs {
            if i >= self.nodes.len() {
                return Err(Error::InvalidArgument(format!("unknown node id {i}")));
            }
        }
        let value = eval_op(&self.nodes, &op, &inputs)?;
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        Ok(self.insert(Node {
            op,
            inputs,
            value,
            requires_grad,
        }))
    }

    // elementwise

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add, vec![a, b])
    }

    pub fn subtract(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Subtract, vec![a, b])
    }

    pub fn multiply(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Multiply, vec![a, b])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        if !c.is_finite() {
            return Err(Error::NonFinite("scale factor"));
        }
        self.push(Op::Scale(c), vec![a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Square, vec![a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Relu, vec![a])
    }

    /// Heaviside step with step(0) = 0, matching the ReLU subgradient
    /// convention. Derivative is zero everywhere.
    pub fn step(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Step, vec![a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Exp, vec![a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Log, vec![a])
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Recip, vec![a])
    }

    // linear algebra

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Matmul, vec![a, b])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Transpose, vec![a])
    }

    // reductions and broadcasts

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum, vec![a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Mean, vec![a])
    }

    pub fn sum_axis0(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumAxis0, vec![a])
    }

    pub fn sum_axis1(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumAxis1, vec![a])
    }

    pub fn bcast_axis0(&mut self, a: NodeId, rows: usize) -> Result<NodeId> {
        self.push(Op::BcastAxis0 { rows }, vec![a])
    }

    pub fn bcast_axis1(&mut self, a: NodeId, cols: usize) -> Result<NodeId> {
        self.push(Op::BcastAxis1 { cols }, vec![a])
    }

    pub fn bcast_scalar(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(
            Op::BcastScalar {
                shape: shape.to_vec(),
            },
            vec![a],
        )
    }

    /// Per-row element selection: out[b, 0] = a[b, indices[b]].
    pub fn gather_row(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        self.push(
            Op::GatherRow {
                indices: indices.to_vec(),
            },
            vec![a],
        )
    }

    pub fn scatter_row(&mut self, a: NodeId, indices: &[usize], cols: usize) -> Result<NodeId> {
        self.push(
            Op::ScatterRow {
                indices: indices.to_vec(),
                cols,
            },
            vec![a],
        )
    }

    /// Row-wise log softmax, computed with the max-shift for stability.
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::LogSoftmax, vec![a])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(
            Op::Reshape {
                shape: shape.to_vec(),
            },
            vec![a],
        )
    }

    /// Collapse all trailing axes: [B, d1, d2, ..] -> [B, d1*d2*..].
    pub fn flatten(&mut self, a: NodeId) -> Result<NodeId> {
        let shape = self.value(a).shape().to_vec();
        if shape.is_empty() {
            return Err(Error::shape("flatten", "scalar input".to_string()));
        }
        let rest: usize = shape[1..].iter().product();
        self.reshape(a, &[shape[0], rest])
    }

    // convolution stack (valid padding, stride 1)

    pub fn conv2d(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        self.push(Op::Conv2d, vec![x, kernel])
    }

    pub fn pad2d(&mut self, a: NodeId, ph: usize, pw: usize) -> Result<NodeId> {
        self.push(Op::Pad2d { ph, pw }, vec![a])
    }

    pub fn crop2d(&mut self, a: NodeId, ph: usize, pw: usize) -> Result<NodeId> {
        self.push(Op::Crop2d { ph, pw }, vec![a])
    }

    pub fn flip_hw(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::FlipHw, vec![a])
    }

    pub fn swap_io(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SwapIo, vec![a])
    }

    pub fn avgpool2d(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::AvgPool2d, vec![a])
    }

    pub fn upsample2d(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Upsample2d, vec![a])
    }

    pub fn bcast_chan(&mut self, a: NodeId, batch: usize, h: usize, w: usize) -> Result<NodeId> {
        self.push(Op::BcastChan { batch, h, w }, vec![a])
    }

    pub fn sum_chan(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumChan, vec![a])
    }

    /// clamp(v, 0, 1) = relu(v) - relu(v - 1), with gradient 1 strictly
    /// inside the interval and 0 outside.
    pub fn clamp01(&mut self, a: NodeId) -> Result<NodeId> {
        let lo = self.relu(a)?;
        let shape = self.value(a).shape().to_vec();
        let one = self.constant(Tensor::filled(&shape, 1.0));
        let shifted = self.subtract(a, one)?;
        let hi = self.relu(shifted)?;
        self.subtract(lo, hi)
    }

    /// Re-executes every non-input node from its op record. Outputs are
    /// bit-identical to the original construction.
    pub fn replay(&mut self) -> Result<()> {
        for id in 0..self.nodes.len() {
            match self.nodes[id].op {
                Op::Leaf | Op::Constant => {}
                _ => {
                    let op = self.nodes[id].op.clone();
                    let inputs = self.nodes[id].inputs.clone();
                    let value = eval_op(&self.nodes, &op, &inputs)?;
                    self.nodes[id].value = value;
                }
            }
        }
        Ok(())
    }

    /// Reverse-mode sweep from a scalar output. Adjoints are appended as
    /// graph nodes; with `create_graph` they stay differentiable, without
    /// it they are detached so later sweeps will not traverse them.
    pub fn backward(
        &mut self,
        output: NodeId,
        leaves: &[NodeId],
        create_graph: bool,
    ) -> Result<GradMap> {
        if output >= self.nodes.len() {
            return Err(Error::InvalidArgument(format!("unknown node id {output}")));
        }
        if !self.nodes[output].value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", self.nodes[output].value.shape()),
            ));
        }
        for &l in leaves {
            if l >= self.nodes.len() {
                return Err(Error::InvalidArgument(format!("unknown leaf id {l}")));
            }
        }

        let prev_detach = self.detach_new_nodes;
        self.detach_new_nodes = !create_graph;
        let result = self.backward_inner(output, leaves);
        self.detach_new_nodes = prev_detach;
        result
    }

    fn backward_inner(&mut self, output: NodeId, leaves: &[NodeId]) -> Result<GradMap> {
        let mut adj: Vec<Option<NodeId>> = vec![None; output + 1];
        let seed_shape = self.nodes[output].value.shape().to_vec();
        adj[output] = Some(self.constant(Tensor::filled(&seed_shape, 1.0)));

        for id in (0..=output).rev() {
            let Some(g) = adj[id] else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            let op = self.nodes[id].op.clone();
            let inputs = self.nodes[id].inputs.clone();
            let contributions = self.adjoints(&op, &inputs, id, g)?;
            for (input, contrib) in contributions {
                adj[input] = Some(match adj[input] {
                    Some(existing) => self.add(existing, contrib)?,
                    None => contrib,
                });
            }
        }

        let mut grads = BTreeMap::new();
        for &leaf in leaves {
            let gid = match adj.get(leaf).copied().flatten() {
                Some(g) => g,
                // leaf not reachable from the output: zero gradient
                None => {
                    let shape = self.nodes[leaf].value.shape().to_vec();
                    self.constant(Tensor::zeros(&shape))
                }
            };
            grads.insert(leaf, gid);
        }
        Ok(GradMap { grads })
    }

    /// Adjoint contributions of one node: (input id, contribution node).
    /// Inputs that do not require gradients are skipped.
    fn adjoints(
        &mut self,
        op: &Op,
        inputs: &[NodeId],
        out: NodeId,
        g: NodeId,
    ) -> Result<Vec<(NodeId, NodeId)>> {
        let mut res = Vec::new();
        let needs = |graph: &Graph, i: usize| graph.nodes[inputs[i]].requires_grad;
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Add => {
                if needs(self, 0) {
                    res.push((inputs[0], g));
                }
                if needs(self, 1) {
                    res.push((inputs[1], g));
                }
            }
            Op::Subtract => {
                if needs(self, 0) {
                    res.push((inputs[0], g));
                }
                if needs(self, 1) {
                    let neg = self.scale(g, -1.0)?;
                    res.push((inputs[1], neg));
                }
            }
            Op::Multiply => {
                if needs(self, 0) {
                    let c = self.multiply(g, inputs[1])?;
                    res.push((inputs[0], c));
                }
                if needs(self, 1) {
                    let c = self.multiply(g, inputs[0])?;
                    res.push((inputs[1], c));
                }
            }
            Op::Scale(c) => {
                if needs(self, 0) {
                    let s = self.scale(g, *c)?;
                    res.push((inputs[0], s));
                }
            }
            Op::Square => {
                if needs(self, 0) {
                    let ga = self.multiply(g, inputs[0])?;
                    let c = self.scale(ga, 2.0)?;
                    res.push((inputs[0], c));
                }
            }
            Op::Relu => {
                if needs(self, 0) {
                    let mask = self.step(inputs[0])?;
                    let c = self.multiply(g, mask)?;
                    res.push((inputs[0], c));
                }
            }
            // zero derivative everywhere it exists
            Op::Step => {}
            Op::Exp => {
                if needs(self, 0) {
                    let c = self.multiply(g, out)?;
                    res.push((inputs[0], c));
                }
            }
            Op::Log => {
                if needs(self, 0) {
                    let inv = self.recip(inputs[0])?;
                    let c = self.multiply(g, inv)?;
                    res.push((inputs[0], c));
                }
            }
            Op::Recip => {
                if needs(self, 0) {
                    let sq = self.square(out)?;
                    let gc = self.multiply(g, sq)?;
                    let c = self.scale(gc, -1.0)?;
                    res.push((inputs[0], c));
                }
            }
            Op::Matmul => {
                if needs(self, 0) {
                    let bt = self.transpose(inputs[1])?;
                    let c = self.matmul(g, bt)?;
                    res.push((inputs[0], c));
                }
                if needs(self, 1) {
                    let at = self.transpose(inputs[0])?;
                    let c = self.matmul(at, g)?;
                    res.push((inputs[1], c));
                }
            }
            Op::Transpose => {
                if needs(self, 0) {
                    let c = self.transpose(g)?;
                    res.push((inputs[0], c));
                }
            }
            Op::Sum => {
                if needs(self, 0) {
                    let shape = self.nodes[inputs[0]].value.shape().to_vec();
                    let c = self.bcast_scalar(g, &shape)?;
                    res.push((inputs[0], c));
                }
            }
            Op::Mean => {
                if needs(self, 0) {
                    let shape = self.nodes[inputs[0]].value.shape().to_vec();
                    let n = self.nodes[inputs[0]].value.len() as f64;
                    let b = self.bcast_scalar(g, &shape)?;
                    let c = self.scale(b, 1.0 / n)?;
                    res.push((inputs[0], c));
                }
            }
            Op::SumAxis0 => {
                if needs(self, 0) {
                    let rows = self.nodes[inputs[0]].value.rows();
                    let c = self.bcast_axis0(g, rows)?;
                    res.push((inputs[0], c));
                }
            }
            Op::SumAxis1 => {
                if needs(self, 0) {
                    let cols = self.nodes[inputs[0]].value.cols();
                    let c = self.bcast_axis1(g, cols)?;
                    res.push((inputs[0], c));
                }
            }
            Op::BcastAxis0 { .. } => {
                if needs(self, 0) {
                    let c = self.sum_axis0(g)?;
                    res.push((inputs[0], c));
                }
            }
            Op::BcastAxis1 { .. } => {
                if needs(self, 0) {
                    let c = self.sum_axis1(g)?;
                    res.push((inputs[0], c));
                }
            }
            Op::BcastScalar { .. } => {
                if needs(self, 0) {
                    let c = self.sum(g)?;
                    res.push((inputs[0], c));
                }
            }
            Op::GatherRow { indices } => {
                if needs(self, 0) {
                    let cols = self.nodes[inputs[0]].value.cols();
                    let idx = indices.clone();
                    let c = self.scatter_row(g, &idx, cols)?;
                    res.push((inputs[0], c));
                }
            }
            Op::ScatterRow { indices, .. } => {
                if needs(self, 0) {
                    let idx = indices.clone();
                    let c = self.gather_row(g, &idx)?;
                    res.push((inputs[0], c));
                }
            }
            Op::LogSoftmax => {
                if needs(self, 0) {
                    let cols = self.nodes[out].value.cols();
                    let probs = self.exp(out)?;
                    let rowsum = self.sum_axis1(g)?;
                    let spread = self.bcast_axis1(rowsum, cols)?;
                    let correction = self.multiply(probs, spread)?;
                    let c = self.subtract(g, correction)?;
                    res.push((inputs[0], c));
                }
            }
            Op::Reshape { .. } => {
                if needs(self, 0) {
                    let shape = self.nodes[inputs[0]].value.shape().to_vec();
                    let c = self.reshape(g, &shape)?;
                    res.push((inputs[0], c));
                }
            }
            Op::Conv2d => {
                let kshape = self.nodes[inputs[1]].value.shape().to_vec();
                let (kh, kw) = (kshape[2], kshape[3]);
                if needs(self, 0) {
                    let padded = self.pad2d(g, kh - 1, kw - 1)?;
                    let flipped = self.flip_hw(inputs[1])?;
                    let swapped = self.swap_io(flipped)?;
                    let c = self.conv2d(padded, swapped)?;
                    res.push((inputs[0], c));
                }
                if needs(self, 1) {
                    let xs = self.swap_io(inputs[0])?;
                    let gs = self.swap_io(g)?;
                    let conv = self.conv2d(xs, gs)?;
                    let c = self.swap_io(conv)?;
                    res.push((inputs[1], c));
                }
            }
            Op::Pad2d { ph, pw } => {
                if needs(self, 0) {
                    let c = self.crop2d(g, *ph, *pw)?;
                    res.push((inputs[0], c));
                }
            }
            Op::Crop2d { ph, pw } => {
                if needs(self, 0) {
                    let c = self.pad2d(g, *ph, *pw)?;
                    res.push((inputs[0], c));
                }
            }
            Op::FlipHw => {
                if needs(self, 0) {
                    let c = self.flip_hw(g)?;
                    res.push((inputs[0], c));
                }
            }
            Op::SwapIo => {
                if needs(self, 0) {
                    let c = self.swap_io(g)?;
                    res.push((inputs[0], c));
                }
            }
            Op::AvgPool2d => {
                if needs(self, 0) {
                    let up = self.upsample2d(g)?;
                    let c = self.scale(up, 0.25)?;
                    res.push((inputs[0], c));
                }
            }
            Op::Upsample2d => {
                if needs(self, 0) {
                    let down = self.avgpool2d(g)?;
                    let c = self.scale(down, 4.0)?;
                    res.push((inputs[0], c));
                }
            }
            Op::BcastChan { .. } => {
                if needs(self, 0) {
                    let c = self.sum_chan(g)?;
                    res.push((inputs[0], c));
                }
            }
            Op::SumChan => {
                if needs(self, 0) {
                    let shape = self.nodes[inputs[0]].value.shape().to_vec();
                    let c = self.bcast_chan(g, shape[0], shape[2], shape[3])?;
                    res.push((inputs[0], c));
                }
            }
        }
        Ok(res)
    }
}

fn want_rank2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, format!("expected rank 2, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn want_rank4(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize, usize)> {
    if t.shape().len() != 4 {
        return Err(Error::shape(op, format!("expected rank 4, got {:?}", t.shape())));
    }
    let s = t.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

fn same_shape(a: &Tensor, b: &Tensor, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn eval_op(nodes: &[Node], op: &Op, inputs: &[NodeId]) -> Result<Tensor> {
    let val = |i: usize| &nodes[inputs[i]].value;
    match op {
        Op::Leaf | Op::Constant => unreachable!("inputs are inserted, not evaluated"),
        Op::Add => {
            let (a, b) = (val(0), val(1));
            same_shape(a, b, "add")?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        }
        Op::Subtract => {
            let (a, b) = (val(0), val(1));
            same_shape(a, b, "subtract")?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        }
        Op::Multiply => {
            let (a, b) = (val(0), val(1));
            same_shape(a, b, "multiply")?;
            let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        }
        Op::Scale(c) => {
            let a = val(0);
            let data = a.data().iter().map(|x| x * c).collect();
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        }
        Op::Square => {
            let a = val(0);
            let data = a.data().iter().map(|x| x * x).collect();
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        }
        Op::Relu => {
            let a = val(0);
            let data = a.data().iter().map(|x| x.max(0.0)).collect();
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        }
        Op::Step => {
            let a = val(0);
            let data = a
                .data()
                .iter()
                .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
                .collect();
            Ok(Tensor::from_parts(a.shape().to_vec(), data))
        }
        Op::Exp => {
            let a = val(0);
            let out = Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| x.exp()).collect());
            out.check_finite("exp")?;
            Ok(out)
        }
        Op::Log => {
            let a = val(0);
            let out = Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| x.ln()).collect());
            out.check_finite("log")?;
            Ok(out)
        }
        Op::Recip => {
            let a = val(0);
            let out = Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| 1.0 / x).collect());
            out.check_finite("recip")?;
            Ok(out)
        }
        Op::Matmul => {
            let (a, b) = (val(0), val(1));
            let (ar, ac) = want_rank2(a, "matmul")?;
            let (br, bc) = want_rank2(b, "matmul")?;
            if ac != br {
                return Err(Error::shape(
                    "matmul",
                    format!("{ar}x{ac} . {br}x{bc}"),
                ));
            }
            let (ad, bd) = (a.data(), b.data());
            let mut out = vec![0.0; ar * bc];
            for i in 0..ar {
                let arow = &ad[i * ac..(i + 1) * ac];
                let orow = &mut out[i * bc..(i + 1) * bc];
                for (k, &aik) in arow.iter().enumerate() {
                    let brow = &bd[k * bc..(k + 1) * bc];
                    for j in 0..bc {
                        orow[j] += aik * brow[j];
                    }
                }
            }
            Ok(Tensor::from_parts(vec![ar, bc], out))
        }
        Op::Transpose => {
            let a = val(0);
            let (r, c) = want_rank2(a, "transpose")?;
            let ad = a.data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = ad[i * c + j];
                }
            }
            Ok(Tensor::from_parts(vec![c, r], out))
        }
        Op::Sum => {
            let a = val(0);
            Ok(Tensor::from_parts(vec![], vec![a.data().iter().sum()]))
        }
        Op::Mean => {
            let a = val(0);
            let n = a.len() as f64;
            Ok(Tensor::from_parts(
                vec![],
                vec![a.data().iter().sum::<f64>() / n],
            ))
        }
        Op::SumAxis0 => {
            let a = val(0);
            let (r, c) = want_rank2(a, "sum_axis0")?;
            let mut out = vec![0.0; c];
            for i in 0..r {
                for j in 0..c {
                    out[j] += a.data()[i * c + j];
                }
            }
            Ok(Tensor::from_parts(vec![1, c], out))
        }
        Op::SumAxis1 => {
            let a = val(0);
            let (r, c) = want_rank2(a, "sum_axis1")?;
            let mut out = vec![0.0; r];
            for i in 0..r {
                out[i] = a.data()[i * c..(i + 1) * c].iter().sum();
            }
            Ok(Tensor::from_parts(vec![r, 1], out))
        }
        Op::BcastAxis0 { rows } => {
            let a = val(0);
            let (r, c) = want_rank2(a, "bcast_axis0")?;
            if r != 1 {
                return Err(Error::shape("bcast_axis0", format!("expected 1 row, got {r}")));
            }
            let mut out = Vec::with_capacity(rows * c);
            for _ in 0..*rows {
                out.extend_from_slice(a.data());
            }
            Ok(Tensor::from_parts(vec![*rows, c], out))
        }
        Op::BcastAxis1 { cols } => {
            let a = val(0);
            let (r, c) = want_rank2(a, "bcast_axis1")?;
            if c != 1 {
                return Err(Error::shape("bcast_axis1", format!("expected 1 col, got {c}")));
            }
            let mut out = Vec::with_capacity(r * cols);
            for i in 0..r {
                let v = a.data()[i];
                out.extend(std::iter::repeat(v).take(*cols));
            }
            Ok(Tensor::from_parts(vec![r, *cols], out))
        }
        Op::BcastScalar { shape } => {
            let a = val(0);
            if !a.is_scalar() {
                return Err(Error::shape(
                    "bcast_scalar",
                    format!("expected scalar, got {:?}", a.shape()),
                ));
            }
            Ok(Tensor::filled(shape, a.item()))
        }
        Op::GatherRow { indices } => {
            let a = val(0);
            let (r, c) = want_rank2(a, "gather_row")?;
            if indices.len() != r {
                return Err(Error::shape(
                    "gather_row",
                    format!("{} indices for {r} rows", indices.len()),
                ));
            }
            let mut out = Vec::with_capacity(r);
            for (i, &idx) in indices.iter().enumerate() {
                if idx >= c {
                    return Err(Error::InvalidArgument(format!(
                        "gather_row index {idx} out of range for {c} columns"
                    )));
                }
                out.push(a.data()[i * c + idx]);
            }
            Ok(Tensor::from_parts(vec![r, 1], out))
        }
        Op::ScatterRow { indices, cols } => {
            let a = val(0);
            let (r, c) = want_rank2(a, "scatter_row")?;
            if c != 1 || indices.len() != r {
                return Err(Error::shape(
                    "scatter_row",
                    format!("input {r}x{c}, {} indices", indices.len()),
                ));
            }
            let mut out = vec![0.0; r * cols];
            for (i, &idx) in indices.iter().enumerate() {
                if idx >= *cols {
                    return Err(Error::InvalidArgument(format!(
                        "scatter_row index {idx} out of range for {cols} columns"
                    )));
                }
                out[i * cols + idx] = a.data()[i];
            }
            Ok(Tensor::from_parts(vec![r, *cols], out))
        }
        Op::LogSoftmax => {
            let a = val(0);
            let (r, c) = want_rank2(a, "log_softmax")?;
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                let row = &a.data()[i * c..(i + 1) * c];
                let m = row.iter().fold(f64::NEG_INFINITY, |acc, &v| acc.max(v));
                let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                for j in 0..c {
                    out[i * c + j] = row[j] - m - lse;
                }
            }
            Ok(Tensor::from_parts(vec![r, c], out))
        }
        Op::Reshape { shape } => val(0).reshaped(shape.clone()),
        Op::Conv2d => {
            let (x, k) = (val(0), val(1));
            let (b, ic, h, w) = want_rank4(x, "conv2d")?;
            let (oc, kic, kh, kw) = want_rank4(k, "conv2d")?;
            if ic != kic {
                return Err(Error::shape(
                    "conv2d",
                    format!("input channels {ic} vs kernel channels {kic}"),
                ));
            }
            if h < kh || w < kw {
                return Err(Error::shape(
                    "conv2d",
                    format!("image {h}x{w} smaller than kernel {kh}x{kw}"),
                ));
            }
            let (oh, ow) = (h - kh + 1, w - kw + 1);
            let (xd, kd) = (x.data(), k.data());
            let mut out = vec![0.0; b * oc * oh * ow];
            for bi in 0..b {
                for o in 0..oc {
                    let obase = ((bi * oc) + o) * oh * ow;
                    for c in 0..ic {
                        let xbase = ((bi * ic) + c) * h * w;
                        let kbase = ((o * kic) + c) * kh * kw;
                        for p in 0..kh {
                            for q in 0..kw {
                                let kv = kd[kbase + p * kw + q];
                                if kv == 0.0 {
                                    continue;
                                }
                                for i in 0..oh {
                                    let xrow = xbase + (i + p) * w + q;
                                    let orow = obase + i * ow;
                                    for j in 0..ow {
                                        out[orow + j] += kv * xd[xrow + j];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Ok(Tensor::from_parts(vec![b, oc, oh, ow], out))
        }
        Op::Pad2d { ph, pw } => {
            let a = val(0);
            let (b, c, h, w) = want_rank4(a, "pad2d")?;
            let (nh, nw) = (h + 2 * ph, w + 2 * pw);
            let mut out = vec![0.0; b * c * nh * nw];
            for bi in 0..b {
                for ci in 0..c {
                    for i in 0..h {
                        let src = ((bi * c + ci) * h + i) * w;
                        let dst = ((bi * c + ci) * nh + i + ph) * nw + pw;
                        out[dst..dst + w].copy_from_slice(&a.data()[src..src + w]);
                    }
                }
            }
            Ok(Tensor::from_parts(vec![b, c, nh, nw], out))
        }
        Op::Crop2d { ph, pw } => {
            let a = val(0);
            let (b, c, h, w) = want_rank4(a, "crop2d")?;
            if h <= 2 * ph || w <= 2 * pw {
                return Err(Error::shape(
                    "crop2d",
                    format!("cannot crop {ph}/{pw} from {h}x{w}"),
                ));
            }
            let (nh, nw) = (h - 2 * ph, w - 2 * pw);
            let mut out = vec![0.0; b * c * nh * nw];
            for bi in 0..b {
                for ci in 0..c {
                    for i in 0..nh {
                        let src = ((bi * c + ci) * h + i + ph) * w + pw;
                        let dst = ((bi * c + ci) * nh + i) * nw;
                        out[dst..dst + nw].copy_from_slice(&a.data()[src..src + nw]);
                    }
                }
            }
            Ok(Tensor::from_parts(vec![b, c, nh, nw], out))
        }
        Op::FlipHw => {
            let a = val(0);
            let (b, c, h, w) = want_rank4(a, "flip_hw")?;
            let mut out = vec![0.0; a.len()];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * h * w;
                    for i in 0..h {
                        for j in 0..w {
                            out[base + i * w + j] = a.data()[base + (h - 1 - i) * w + (w - 1 - j)];
                        }
                    }
                }
            }
            Ok(Tensor::from_parts(vec![b, c, h, w], out))
        }
        Op::SwapIo => {
            let a = val(0);
            let (d0, d1, h, w) = want_rank4(a, "swap_io")?;
            let mut out = vec![0.0; a.len()];
            let hw = h * w;
            for i0 in 0..d0 {
                for i1 in 0..d1 {
                    let src = (i0 * d1 + i1) * hw;
                    let dst = (i1 * d0 + i0) * hw;
                    out[dst..dst + hw].copy_from_slice(&a.data()[src..src + hw]);
                }
            }
            Ok(Tensor::from_parts(vec![d1, d0, h, w], out))
        }
        Op::AvgPool2d => {
            let a = val(0);
            let (b, c, h, w) = want_rank4(a, "avgpool2d")?;
            if h % 2 != 0 || w % 2 != 0 {
                return Err(Error::shape(
                    "avgpool2d",
                    format!("extents must be even, got {h}x{w}"),
                ));
            }
            let (oh, ow) = (h / 2, w / 2);
            let mut out = vec![0.0; b * c * oh * ow];
            for bi in 0..b {
                for ci in 0..c {
                    let ibase = (bi * c + ci) * h * w;
                    let obase = (bi * c + ci) * oh * ow;
                    for i in 0..oh {
                        for j in 0..ow {
                            let p = ibase + 2 * i * w + 2 * j;
                            out[obase + i * ow + j] =
                                0.25 * (a.data()[p] + a.data()[p + 1] + a.data()[p + w] + a.data()[p + w + 1]);
                        }
                    }
                }
            }
            Ok(Tensor::from_parts(vec![b, c, oh, ow], out))
        }
        Op::Upsample2d => {
            let a = val(0);
            let (b, c, h, w) = want_rank4(a, "upsample2d")?;
            let (oh, ow) = (2 * h, 2 * w);
            let mut out = vec![0.0; b * c * oh * ow];
            for bi in 0..b {
                for ci in 0..c {
                    let ibase = (bi * c + ci) * h * w;
                    let obase = (bi * c + ci) * oh * ow;
                    for i in 0..h {
                        for j in 0..w {
                            let v = a.data()[ibase + i * w + j];
                            let p = obase + 2 * i * ow + 2 * j;
                            out[p] = v;
                            out[p + 1] = v;
                            out[p + ow] = v;
                            out[p + ow + 1] = v;
                        }
                    }
                }
            }
            Ok(Tensor::from_parts(vec![b, c, oh, ow], out))
        }
        Op::BcastChan { batch, h, w } => {
            let a = val(0);
            if a.shape().len() != 1 {
                return Err(Error::shape(
                    "bcast_chan",
                    format!("expected rank 1, got {:?}", a.shape()),
                ));
            }
            let c = a.shape()[0];
            let mut out = Vec::with_capacity(batch * c * h * w);
            for _ in 0..*batch {
                for ci in 0..c {
                    out.extend(std::iter::repeat(a.data()[ci]).take(h * w));
                }
            }
            Ok(Tensor::from_parts(vec![*batch, c, *h, *w], out))
        }
        Op::SumChan => {
            let a = val(0);
            let (b, c, h, w) = want_rank4(a, "sum_chan")?;
            let mut out = vec![0.0; c];
            for bi in 0..b {
                for ci in 0..c {
                    let base = (bi * c + ci) * h * w;
                    out[ci] += a.data()[base..base + h * w].iter().sum::<f64>();
                }
            }
            Ok(Tensor::from_parts(vec![c], out))
        }
    }
}
