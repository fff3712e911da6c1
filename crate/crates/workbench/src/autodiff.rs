//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is a topologically ordered tape of primitive operations built
//! once via [`GraphBuilder`] and then evaluated many times with different
//! input bindings. Backward overrides are first-class: any node can have its
//! true local Jacobian replaced by an identity map, a fixed linear map, or a
//! trajectory average over recorded iterates, which is how differentiable
//! approximations of non-differentiable defense stages are expressed.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub type NodeId = usize;

/// Primitive operations supported by the tape.
///
/// Dense layers only; no convolutions. Value-dependent selections
/// (`MaxExcluding`, `KthLargest`) read their index from the parent value at
/// evaluation time and route the gradient to that coordinate, like max-pooling.
#[derive(Debug, Clone)]
pub enum OpKind {
    /// Placeholder bound at evaluation time to `inputs[slot]`.
    Input { slot: usize, shape: Vec<usize> },
    Constant(Tensor),
    /// parents: [x (n), w (m x n), b (m)] -> w x + b
    Affine,
    Relu,
    Tanh,
    Softplus,
    /// Elementwise natural logarithm.
    Ln,
    Softmax,
    LogSoftmax,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar(f64),
    /// parents: [x (any shape), s (scalar)] -> x * s
    ScaleBy,
    Sum,
    Mean,
    L2Norm,
    Clamp { lo: f64, hi: f64 },
    Concat,
    /// Scalar pick of coordinate `i`.
    Select(usize),
    /// max_{j != i} x_j
    MaxExcluding(usize),
    /// k-th largest entry, 1-based.
    KthLargest(usize),
}

/// Replacement rule for a node's backward pass.
#[derive(Debug, Clone)]
pub enum BackwardOverride {
    /// Pass the incoming adjoint straight to the (single) parent.
    Identity,
    /// Treat the node as the fixed linear map `M` (out x in); parent adjoint
    /// is `M^T g`.
    CustomLinear(Tensor),
    /// Replace the node value by each recorded iterate in turn, re-evaluate
    /// everything downstream, and average the resulting adjoints at this node.
    TrajectoryAverage(Vec<Tensor>),
}

#[derive(Debug, Clone)]
struct Node {
    kind: OpKind,
    parents: Vec<NodeId>,
    shape: Vec<usize>,
    backward_override: Option<BackwardOverride>,
}

#[derive(Debug, Clone, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    input_slots: Vec<(NodeId, Vec<usize>)>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        GraphBuilder::default()
    }

    fn push(&mut self, kind: OpKind, parents: Vec<NodeId>) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(Node { kind, parents, shape: Vec::new(), backward_override: None });
        id
    }

    pub fn input(&mut self, shape: Vec<usize>) -> NodeId {
        let slot = self.input_slots.len();
        let id = self.push(OpKind::Input { slot, shape: shape.clone() }, vec![]);
        self.input_slots.push((id, shape));
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(OpKind::Constant(value), vec![])
    }

    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        self.push(OpKind::Affine, vec![x, w, b])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::Relu, vec![x])
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::Tanh, vec![x])
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::Softplus, vec![x])
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::Ln, vec![x])
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::Softmax, vec![x])
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::LogSoftmax, vec![x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(OpKind::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(OpKind::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(OpKind::Mul, vec![a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(OpKind::Div, vec![a, b])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(OpKind::Scale(c), vec![x])
    }

    pub fn add_scalar(&mut self, x: NodeId, c: f64) -> NodeId {
        self.push(OpKind::AddScalar(c), vec![x])
    }

    /// Multiplies `x` elementwise by the scalar node `s`.
    pub fn scale_by(&mut self, x: NodeId, s: NodeId) -> NodeId {
        self.push(OpKind::ScaleBy, vec![x, s])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::Sum, vec![x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::Mean, vec![x])
    }

    pub fn l2_norm(&mut self, x: NodeId) -> NodeId {
        self.push(OpKind::L2Norm, vec![x])
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        self.push(OpKind::Clamp { lo, hi }, vec![x])
    }

    pub fn concat(&mut self, parts: Vec<NodeId>) -> NodeId {
        self.push(OpKind::Concat, parts)
    }

    pub fn select(&mut self, x: NodeId, i: usize) -> NodeId {
        self.push(OpKind::Select(i), vec![x])
    }

    pub fn max_excluding(&mut self, x: NodeId, i: usize) -> NodeId {
        self.push(OpKind::MaxExcluding(i), vec![x])
    }

    pub fn kth_largest(&mut self, x: NodeId, k: usize) -> NodeId {
        self.push(OpKind::KthLargest(k), vec![x])
    }

    /// Validates shapes node by node and seals the graph.
    pub fn finish(mut self, output: NodeId) -> Result<Graph> {
        for i in 0..self.nodes.len() {
            let shape = infer_shape(&self.nodes, i)?;
            self.nodes[i].shape = shape;
        }
        if output >= self.nodes.len() {
            return Err(Error::invalid(format!("output node {output} out of range")));
        }
        let n = self.nodes.len();
        Ok(Graph {
            nodes: self.nodes,
            input_slots: self.input_slots,
            output,
            values: vec![None; n],
            evaluated: false,
            forward_calls: 0,
            backward_calls: 0,
        })
    }
}

fn infer_shape(nodes: &[Node], id: usize) -> Result<Vec<usize>> {
    let node = &nodes[id];
    let pshape = |p: usize| nodes[node.parents[p]].shape.clone();
    let err = |detail: String| Error::ShapeMismatch { node: id, detail };
    let numel = |s: &[usize]| s.iter().product::<usize>();
    match &node.kind {
        OpKind::Input { shape, .. } => Ok(shape.clone()),
        OpKind::Constant(t) => Ok(t.shape().to_vec()),
        OpKind::Affine => {
            let (x, w, b) = (pshape(0), pshape(1), pshape(2));
            if w.len() != 2 || x.len() != 1 || b.len() != 1 || w[1] != x[0] || w[0] != b[0] {
                return Err(err(format!("affine shapes x={x:?} w={w:?} b={b:?}")));
            }
            Ok(vec![w[0]])
        }
        OpKind::Relu
        | OpKind::Tanh
        | OpKind::Softplus
        | OpKind::Ln
        | OpKind::Softmax
        | OpKind::LogSoftmax
        | OpKind::Scale(_)
        | OpKind::AddScalar(_)
        | OpKind::Clamp { .. } => Ok(pshape(0)),
        OpKind::ScaleBy => {
            let (x, s) = (pshape(0), pshape(1));
            if numel(&s) != 1 {
                return Err(err(format!("scale_by needs a scalar multiplier, got {s:?}")));
            }
            Ok(x)
        }
        OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Div => {
            let (a, b) = (pshape(0), pshape(1));
            if numel(&a) != numel(&b) {
                return Err(err(format!("elementwise operands {a:?} vs {b:?}")));
            }
            Ok(a)
        }
        OpKind::Sum | OpKind::Mean | OpKind::L2Norm => Ok(vec![]),
        OpKind::Concat => {
            let total: usize = node.parents.iter().map(|&p| numel(&nodes[p].shape)).sum();
            Ok(vec![total])
        }
        OpKind::Select(i) | OpKind::MaxExcluding(i) => {
            let x = pshape(0);
            if *i >= numel(&x) {
                return Err(err(format!("index {i} out of range for {x:?}")));
            }
            Ok(vec![])
        }
        OpKind::KthLargest(k) => {
            let x = pshape(0);
            if *k == 0 || *k > numel(&x) {
                return Err(err(format!("order statistic {k} out of range for {x:?}")));
            }
            Ok(vec![])
        }
    }
}

/// A sealed computation graph with value caches and call counters.
#[derive(Debug, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
    input_slots: Vec<(NodeId, Vec<usize>)>,
    output: NodeId,
    values: Vec<Option<Tensor>>,
    evaluated: bool,
    forward_calls: u64,
    backward_calls: u64,
}

impl Graph {
    pub fn num_inputs(&self) -> usize {
        self.input_slots.len()
    }

    pub fn node_shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn forward_calls(&self) -> u64 {
        self.forward_calls
    }

    pub fn backward_calls(&self) -> u64 {
        self.backward_calls
    }

    pub fn node_value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id).and_then(|v| v.as_ref())
    }

    /// Attaches a backward override to `node`. Forward evaluation is unchanged.
    pub fn attach_override(&mut self, node: NodeId, ov: BackwardOverride) -> Result<()> {
        if node >= self.nodes.len() {
            return Err(Error::invalid(format!("node {node} out of range")));
        }
        let shape = self.nodes[node].shape.clone();
        let numel: usize = shape.iter().product();
        match &ov {
            BackwardOverride::Identity | BackwardOverride::TrajectoryAverage(_) => {
                if self.nodes[node].parents.len() != 1 {
                    return Err(Error::ShapeMismatch {
                        node,
                        detail: "override requires exactly one parent".into(),
                    });
                }
                let parent = self.nodes[node].parents[0];
                let pn: usize = self.nodes[parent].shape.iter().product();
                if pn != numel {
                    return Err(Error::ShapeMismatch {
                        node,
                        detail: format!("override needs matching shapes, {pn} vs {numel}"),
                    });
                }
                if let BackwardOverride::TrajectoryAverage(iterates) = &ov {
                    if iterates.is_empty() {
                        return Err(Error::invalid("trajectory override needs iterates"));
                    }
                    if iterates.iter().any(|t| t.len() != numel) {
                        return Err(Error::ShapeMismatch {
                            node,
                            detail: "trajectory iterate shape mismatch".into(),
                        });
                    }
                }
            }
            BackwardOverride::CustomLinear(m) => {
                if self.nodes[node].parents.len() != 1 {
                    return Err(Error::ShapeMismatch {
                        node,
                        detail: "override requires exactly one parent".into(),
                    });
                }
                let parent = self.nodes[node].parents[0];
                let pn: usize = self.nodes[parent].shape.iter().product();
                if m.shape().len() != 2 || m.shape()[0] != numel || m.shape()[1] != pn {
                    return Err(Error::ShapeMismatch {
                        node,
                        detail: format!("linear override shape {:?}", m.shape()),
                    });
                }
            }
        }
        self.nodes[node].backward_override = Some(ov);
        Ok(())
    }

    /// Evaluates the whole tape under the given input bindings.
    pub fn forward_eval(&mut self, inputs: &[Tensor]) -> Result<Tensor> {
        if inputs.len() != self.input_slots.len() {
            return Err(Error::invalid(format!(
                "expected {} inputs, got {}",
                self.input_slots.len(),
                inputs.len()
            )));
        }
        for (slot, (node, shape)) in self.input_slots.iter().enumerate() {
            if inputs[slot].shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    node: *node,
                    detail: format!(
                        "input slot {slot}: expected {:?}, got {:?}",
                        shape,
                        inputs[slot].shape()
                    ),
                });
            }
        }
        for i in 0..self.nodes.len() {
            let value = eval_node(&self.nodes, &self.values, i, inputs)?;
            if !value.is_finite() {
                return Err(Error::NonFinite { node: i, op: format!("{:?}", op_name(&self.nodes[i].kind)) });
            }
            self.values[i] = Some(value);
        }
        self.evaluated = true;
        self.forward_calls += 1;
        Ok(self.values[self.output].clone().unwrap())
    }

    /// Gradient of the (scalar) output with respect to input slot `wrt`.
    pub fn backward_grad(&mut self, wrt: usize) -> Result<Tensor> {
        let grads = self.backward_inputs()?;
        grads
            .into_iter()
            .nth(wrt)
            .ok_or_else(|| Error::invalid(format!("input slot {wrt} out of range")))
    }

    /// Gradients of the scalar output with respect to every input slot, in one
    /// reverse sweep. Counts as a single backward call.
    pub fn backward_inputs(&mut self) -> Result<Vec<Tensor>> {
        if !self.evaluated {
            return Err(Error::NotEvaluated);
        }
        let out_shape = self.nodes[self.output].shape.clone();
        if !out_shape.is_empty() && out_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarOutput(out_shape));
        }
        let adj = self.adjoint_sweep(self.output, Tensor::scalar(1.0), None)?;
        self.backward_calls += 1;
        let mut grads = Vec::with_capacity(self.input_slots.len());
        for (node, shape) in self.input_slots.clone() {
            grads.push(match &adj[node] {
                Some(g) => g.clone(),
                None => Tensor::zeros(shape),
            });
        }
        Ok(grads)
    }

    /// Reverse sweep seeded at `from` with adjoint `seed`; honors overrides.
    /// When `collect_at` is set, that node's adjoint is accumulated but not
    /// propagated further (used by trajectory replays).
    fn adjoint_sweep(
        &mut self,
        from: NodeId,
        seed: Tensor,
        collect_at: Option<NodeId>,
    ) -> Result<Vec<Option<Tensor>>> {
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[from] = Some(seed);
        for i in (0..=from).rev() {
            if collect_at == Some(i) {
                continue;
            }
            let Some(g) = adj[i].clone() else { continue };
            let node = self.nodes[i].clone();
            match &node.backward_override {
                Some(BackwardOverride::Identity) => {
                    accumulate(&mut adj, node.parents[0], reshape_like(&g, &self.nodes[node.parents[0]].shape));
                }
                Some(BackwardOverride::CustomLinear(m)) => {
                    let parent = node.parents[0];
                    let pn: usize = self.nodes[parent].shape.iter().product();
                    let out = m.shape()[0];
                    let mut pg = vec![0.0; pn];
                    for r in 0..out {
                        let gr = g.data()[r];
                        for c in 0..pn {
                            pg[c] += m.data()[r * pn + c] * gr;
                        }
                    }
                    accumulate(
                        &mut adj,
                        parent,
                        Tensor::new(self.nodes[parent].shape.clone(), pg).unwrap(),
                    );
                }
                Some(BackwardOverride::TrajectoryAverage(iterates)) => {
                    let iterates = iterates.clone();
                    let avg = self.trajectory_average_adjoint(i, &iterates)?;
                    accumulate(&mut adj, node.parents[0], reshape_like(&avg, &self.nodes[node.parents[0]].shape));
                }
                None => {
                    let values = &self.values;
                    backward_node(&self.nodes, values, i, &g, &mut adj)?;
                }
            }
        }
        Ok(adj)
    }

    /// Mean adjoint at `node` when its value is replaced by each iterate in
    /// turn and everything downstream is re-evaluated.
    fn trajectory_average_adjoint(&mut self, node: NodeId, iterates: &[Tensor]) -> Result<Tensor> {
        let original = self.values[node].clone().ok_or(Error::NotEvaluated)?;
        let shape = self.nodes[node].shape.clone();
        let mut total = Tensor::zeros(shape.clone());
        let result = (|| -> Result<Tensor> {
            for iterate in iterates {
                let replaced = reshape_like(iterate, &shape);
                self.replay_downstream(node, replaced)?;
                let adj = self.adjoint_sweep(self.output, Tensor::scalar(1.0), Some(node))?;
                if let Some(g) = &adj[node] {
                    total = total.add(g);
                }
            }
            Ok(total.scale(1.0 / iterates.len() as f64))
        })();
        // Restore caches regardless of outcome.
        self.replay_downstream(node, original)?;
        result
    }

    /// Overwrites the cached value of `node` and recomputes every later node.
    fn replay_downstream(&mut self, node: NodeId, value: Tensor) -> Result<()> {
        self.values[node] = Some(value);
        for i in node + 1..self.nodes.len() {
            if matches!(self.nodes[i].kind, OpKind::Input { .. }) {
                continue;
            }
            let v = eval_node(&self.nodes, &self.values, i, &[])?;
            if !v.is_finite() {
                return Err(Error::NonFinite { node: i, op: op_name(&self.nodes[i].kind).into() });
            }
            self.values[i] = Some(v);
        }
        Ok(())
    }
}

fn reshape_like(t: &Tensor, shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), t.data().to_vec()).unwrap()
}

fn accumulate(adj: &mut [Option<Tensor>], node: NodeId, g: Tensor) {
    match &mut adj[node] {
        Some(existing) => *existing = existing.add(&g),
        slot => *slot = Some(g),
    }
}

fn op_name(kind: &OpKind) -> &'static str {
    match kind {
        OpKind::Input { .. } => "input",
        OpKind::Constant(_) => "constant",
        OpKind::Affine => "affine",
        OpKind::Relu => "relu",
        OpKind::Tanh => "tanh",
        OpKind::Softplus => "softplus",
        OpKind::Ln => "ln",
        OpKind::Softmax => "softmax",
        OpKind::LogSoftmax => "log_softmax",
        OpKind::Add => "add",
        OpKind::Sub => "sub",
        OpKind::Mul => "mul",
        OpKind::Div => "div",
        OpKind::Scale(_) => "scale",
        OpKind::AddScalar(_) => "add_scalar",
        OpKind::ScaleBy => "scale_by",
        OpKind::Sum => "sum",
        OpKind::Mean => "mean",
        OpKind::L2Norm => "l2_norm",
        OpKind::Clamp { .. } => "clamp",
        OpKind::Concat => "concat",
        OpKind::Select(_) => "select",
        OpKind::MaxExcluding(_) => "max_excluding",
        OpKind::KthLargest(_) => "kth_largest",
    }
}

fn eval_node(
    nodes: &[Node],
    values: &[Option<Tensor>],
    id: usize,
    inputs: &[Tensor],
) -> Result<Tensor> {
    let node = &nodes[id];
    let parent = |p: usize| values[node.parents[p]].as_ref().unwrap();
    Ok(match &node.kind {
        OpKind::Input { slot, .. } => inputs[*slot].clone(),
        OpKind::Constant(t) => t.clone(),
        OpKind::Affine => {
            let (x, w, b) = (parent(0), parent(1), parent(2));
            let (m, n) = (w.shape()[0], w.shape()[1]);
            let mut out = vec![0.0; m];
            for r in 0..m {
                let row = &w.data()[r * n..(r + 1) * n];
                out[r] = row.iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>() + b.data()[r];
            }
            Tensor::vector(out)
        }
        OpKind::Relu => parent(0).map(|v| v.max(0.0)),
        OpKind::Tanh => parent(0).map(f64::tanh),
        OpKind::Softplus => parent(0).map(|v| v.max(0.0) + (-v.abs()).exp().ln_1p()),
        OpKind::Ln => parent(0).map(f64::ln),
        OpKind::Softmax => softmax(parent(0)),
        OpKind::LogSoftmax => {
            let x = parent(0);
            let m = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + x.data().iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            x.map(|v| v - lse)
        }
        OpKind::Add => parent(0).add(parent(1)),
        OpKind::Sub => parent(0).sub(parent(1)),
        OpKind::Mul => parent(0).zip(parent(1), |a, b| a * b),
        OpKind::Div => parent(0).zip(parent(1), |a, b| a / b),
        OpKind::Scale(c) => parent(0).scale(*c),
        OpKind::AddScalar(c) => parent(0).map(|v| v + c),
        OpKind::ScaleBy => {
            let s = parent(1).data()[0];
            parent(0).scale(s)
        }
        OpKind::Sum => Tensor::scalar(parent(0).data().iter().sum()),
        OpKind::Mean => {
            let x = parent(0);
            Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
        }
        OpKind::L2Norm => Tensor::scalar(parent(0).l2_norm()),
        OpKind::Clamp { lo, hi } => parent(0).map(|v| v.clamp(*lo, *hi)),
        OpKind::Concat => {
            let mut data = Vec::new();
            for &p in &node.parents {
                data.extend_from_slice(values[p].as_ref().unwrap().data());
            }
            Tensor::vector(data)
        }
        OpKind::Select(i) => Tensor::scalar(parent(0).data()[*i]),
        OpKind::MaxExcluding(i) => {
            let x = parent(0);
            let v = x
                .data()
                .iter()
                .enumerate()
                .filter(|(j, _)| j != i)
                .map(|(_, &v)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            Tensor::scalar(v)
        }
        OpKind::KthLargest(k) => {
            let x = parent(0);
            Tensor::scalar(x.data()[kth_largest_index(x, *k)])
        }
    })
}

fn softmax(x: &Tensor) -> Tensor {
    let m = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.data().iter().map(|v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    Tensor::vector(exps.iter().map(|e| e / z).collect())
}

fn kth_largest_index(x: &Tensor, k: usize) -> usize {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x.data()[b].partial_cmp(&x.data()[a]).unwrap().then(a.cmp(&b)));
    idx[k - 1]
}

fn backward_node(
    nodes: &[Node],
    values: &[Option<Tensor>],
    id: usize,
    g: &Tensor,
    adj: &mut [Option<Tensor>],
) -> Result<()> {
    let node = &nodes[id];
    let pval = |p: usize| values[node.parents[p]].as_ref().unwrap();
    let own = values[id].as_ref().unwrap();
    match &node.kind {
        OpKind::Input { .. } | OpKind::Constant(_) => {}
        OpKind::Affine => {
            let (x, w) = (pval(0), pval(1));
            let (m, n) = (w.shape()[0], w.shape()[1]);
            let mut gx = vec![0.0; n];
            let mut gw = vec![0.0; m * n];
            for r in 0..m {
                let gr = g.data()[r];
                for c in 0..n {
                    gx[c] += w.data()[r * n + c] * gr;
                    gw[r * n + c] = gr * x.data()[c];
                }
            }
            accumulate(adj, node.parents[0], Tensor::new(x.shape().to_vec(), gx).unwrap());
            accumulate(adj, node.parents[1], Tensor::matrix(m, n, gw).unwrap());
            accumulate(adj, node.parents[2], Tensor::vector(g.data().to_vec()));
        }
        OpKind::Relu => {
            let x = pval(0);
            accumulate(adj, node.parents[0], g.zip(x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
        }
        OpKind::Tanh => {
            accumulate(adj, node.parents[0], g.zip(own, |gv, t| gv * (1.0 - t * t)));
        }
        OpKind::Softplus => {
            let x = pval(0);
            accumulate(adj, node.parents[0], g.zip(x, |gv, xv| gv / (1.0 + (-xv).exp())));
        }
        OpKind::Ln => {
            let x = pval(0);
            accumulate(adj, node.parents[0], g.zip(x, |gv, xv| gv / xv));
        }
        OpKind::Softmax => {
            let s = own;
            let inner: f64 = g.dot(s);
            accumulate(adj, node.parents[0], s.zip(g, |sv, gv| sv * (gv - inner)));
        }
        OpKind::LogSoftmax => {
            let x = pval(0);
            let s = softmax(x);
            let gsum: f64 = g.data().iter().sum();
            accumulate(adj, node.parents[0], g.zip(&s, |gv, sv| gv - sv * gsum));
        }
        OpKind::Add => {
            accumulate(adj, node.parents[0], g.clone());
            accumulate(adj, node.parents[1], reshape_like(g, &nodes[node.parents[1]].shape));
        }
        OpKind::Sub => {
            accumulate(adj, node.parents[0], g.clone());
            accumulate(adj, node.parents[1], reshape_like(&g.scale(-1.0), &nodes[node.parents[1]].shape));
        }
        OpKind::Mul => {
            let (a, b) = (pval(0), pval(1));
            accumulate(adj, node.parents[0], g.zip(b, |gv, bv| gv * bv));
            accumulate(adj, node.parents[1], reshape_like(&g.zip(a, |gv, av| gv * av), &nodes[node.parents[1]].shape));
        }
        OpKind::Div => {
            let (a, b) = (pval(0), pval(1));
            accumulate(adj, node.parents[0], g.zip(b, |gv, bv| gv / bv));
            let mut gb = Tensor::zeros_like(b);
            for i in 0..gb.len() {
                gb.data_mut()[i] = -g.data()[i] * a.data()[i] / (b.data()[i] * b.data()[i]);
            }
            accumulate(adj, node.parents[1], gb);
        }
        OpKind::Scale(c) => accumulate(adj, node.parents[0], g.scale(*c)),
        OpKind::AddScalar(_) => accumulate(adj, node.parents[0], g.clone()),
        OpKind::ScaleBy => {
            let (x, s) = (pval(0), pval(1));
            let sv = s.data()[0];
            accumulate(adj, node.parents[0], g.scale(sv));
            let gs = g.dot(x);
            accumulate(
                adj,
                node.parents[1],
                Tensor::new(nodes[node.parents[1]].shape.clone(), vec![gs]).unwrap(),
            );
        }
        OpKind::Sum => {
            let g0 = g.scalar_value();
            let shape = nodes[node.parents[0]].shape.clone();
            let n: usize = shape.iter().product();
            accumulate(adj, node.parents[0], Tensor::new(shape, vec![g0; n]).unwrap());
        }
        OpKind::Mean => {
            let shape = nodes[node.parents[0]].shape.clone();
            let n: usize = shape.iter().product();
            let g0 = g.scalar_value() / n as f64;
            accumulate(adj, node.parents[0], Tensor::new(shape, vec![g0; n]).unwrap());
        }
        OpKind::L2Norm => {
            let x = pval(0);
            let norm = own.scalar_value();
            let g0 = g.scalar_value();
            let gx = if norm > 0.0 { x.scale(g0 / norm) } else { Tensor::zeros_like(x) };
            accumulate(adj, node.parents[0], gx);
        }
        OpKind::Clamp { lo, hi } => {
            let x = pval(0);
            accumulate(
                adj,
                node.parents[0],
                g.zip(x, |gv, xv| if xv > *lo && xv < *hi { gv } else { 0.0 }),
            );
        }
        OpKind::Concat => {
            let mut offset = 0;
            for &p in &node.parents {
                let shape = nodes[p].shape.clone();
                let n: usize = shape.iter().product();
                let part = Tensor::new(shape, g.data()[offset..offset + n].to_vec()).unwrap();
                accumulate(adj, p, part);
                offset += n;
            }
        }
        OpKind::Select(i) => {
            let mut gx = Tensor::zeros_like(pval(0));
            gx.data_mut()[*i] = g.scalar_value();
            accumulate(adj, node.parents[0], gx);
        }
        OpKind::MaxExcluding(i) => {
            let x = pval(0);
            let mut best = usize::MAX;
            for j in 0..x.len() {
                if j != *i && (best == usize::MAX || x.data()[j] > x.data()[best]) {
                    best = j;
                }
            }
            let mut gx = Tensor::zeros_like(x);
            gx.data_mut()[best] = g.scalar_value();
            accumulate(adj, node.parents[0], gx);
        }
        OpKind::KthLargest(k) => {
            let x = pval(0);
            let mut gx = Tensor::zeros_like(x);
            gx.data_mut()[kth_largest_index(x, *k)] = g.scalar_value();
            accumulate(adj, node.parents[0], gx);
        }
    }
    Ok(())
}

/// Central-difference gradient estimate; the test oracle for every gradient
/// path in the crate.
pub fn finite_diff_gradient(
    mut fun: impl FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if h <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut grad = Tensor::zeros_like(x);
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = fun(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = fun(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::invalid("objective returned a non-finite value"));
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn identity_linear_graph(x0: Vec<f64>) -> (Graph, Tensor) {
        let n = x0.len();
        let mut b = GraphBuilder::new();
        let x = b.input(vec![n]);
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        let wc = b.constant(Tensor::matrix(n, n, w).unwrap());
        let bc = b.constant(Tensor::vector(vec![0.0; n]));
        let y = b.affine(x, wc, bc);
        (b.finish(y).unwrap(), Tensor::vector(x0))
    }

    #[test]
    fn identity_affine_passes_through() {
        let (mut g, x) = identity_linear_graph(vec![1.0, 2.0]);
        let out = g.forward_eval(&[x]).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0]);
        assert_eq!(g.forward_calls(), 1);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut b = GraphBuilder::new();
        let x = b.input(vec![3]);
        let s = b.softmax(x);
        let mut g = b.finish(s).unwrap();
        let out = g.forward_eval(&[Tensor::vector(vec![0.0, 0.0, 0.0])]).unwrap();
        for &v in out.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_reports_node() {
        let mut b = GraphBuilder::new();
        let x = b.input(vec![2]);
        let y = b.input(vec![3]);
        let bad = b.add(x, y);
        match b.finish(bad) {
            Err(Error::ShapeMismatch { node, .. }) => assert_eq!(node, 2),
            other => panic!("expected shape mismatch, got {other:?}"),
        }
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut b = GraphBuilder::new();
        let x = b.input(vec![4]);
        let s = b.sum(x);
        let mut g = b.finish(s).unwrap();
        g.forward_eval(&[Tensor::vector(vec![1.0, -2.0, 0.5, 3.0])]).unwrap();
        let grad = g.backward_grad(0).unwrap();
        assert_eq!(grad.data(), &[1.0, 1.0, 1.0, 1.0]);
        assert_eq!(g.backward_calls(), 1);
    }

    #[test]
    fn squared_norm_gradient() {
        let mut b = GraphBuilder::new();
        let x = b.input(vec![2]);
        let sq = b.mul(x, x);
        let s = b.sum(sq);
        let mut g = b.finish(s).unwrap();
        g.forward_eval(&[Tensor::vector(vec![3.0, -1.0])]).unwrap();
        let grad = g.backward_grad(0).unwrap();
        assert_eq!(grad.data(), &[6.0, -2.0]);
    }

    #[test]
    fn backward_before_forward_rejected() {
        let mut b = GraphBuilder::new();
        let x = b.input(vec![2]);
        let s = b.sum(x);
        let mut g = b.finish(s).unwrap();
        assert!(matches!(g.backward_grad(0), Err(Error::NotEvaluated)));
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut b = GraphBuilder::new();
        let x = b.input(vec![2]);
        let y = b.relu(x);
        let mut g = b.finish(y).unwrap();
        g.forward_eval(&[Tensor::vector(vec![1.0, 2.0])]).unwrap();
        assert!(matches!(g.backward_grad(0), Err(Error::NonScalarOutput(_))));
    }

    /// Random dense net: affine/tanh layers ending in a cross-entropy-style
    /// scalar. Used for the gradient-vs-finite-difference checks.
    fn random_mlp_graph(rng: &mut ChaCha8Rng, din: usize, widths: &[usize]) -> Graph {
        let mut b = GraphBuilder::new();
        let x = b.input(vec![din]);
        let mut h = x;
        let mut prev = din;
        for &w in widths {
            let wt = Tensor::matrix(
                w,
                prev,
                (0..w * prev).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let bt = Tensor::vector((0..w).map(|_| rng.gen_range(-0.5..0.5)).collect());
            let wc = b.constant(wt);
            let bc = b.constant(bt);
            h = b.affine(h, wc, bc);
            h = b.tanh(h);
            prev = w;
        }
        let ls = b.log_softmax(h);
        let picked = b.select(ls, 0);
        let loss = b.scale(picked, -1.0);
        b.finish(loss).unwrap()
    }

    #[test]
    fn forward_matches_straight_line_reevaluation() {
        // Re-evaluate the same arithmetic without the tape.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut b = GraphBuilder::new();
        let x = b.input(vec![3]);
        let w1: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b1: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wc = b.constant(Tensor::matrix(2, 3, w1.clone()).unwrap());
        let bc = b.constant(Tensor::vector(b1.clone()));
        let a = b.affine(x, wc, bc);
        let t = b.tanh(a);
        let s = b.sum(t);
        let mut g = b.finish(s).unwrap();
        let xv = vec![0.3, -0.7, 0.9];
        let out = g.forward_eval(&[Tensor::vector(xv.clone())]).unwrap();

        let mut expect = 0.0;
        for r in 0..2 {
            let mut acc = b1[r];
            for c in 0..3 {
                acc += w1[r * 3 + c] * xv[c];
            }
            expect += acc.tanh();
        }
        assert!((out.scalar_value() - expect).abs() < 1e-12);
    }

    #[test]
    fn mlp_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let mut g = random_mlp_graph(&mut rng, 4, &[6, 5, 3]);
            let x = Tensor::vector((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
            g.forward_eval(&[x.clone()]).unwrap();
            let grad = g.backward_grad(0).unwrap();
            let mut probe_graph = g.clone();
            let fd = finite_diff_gradient(
                |p| Ok(probe_graph.forward_eval(&[p.clone()])?.scalar_value()),
                &x,
                1e-5,
            )
            .unwrap();
            let scale = grad.linf_norm().max(1.0);
            assert!(
                grad.max_abs_diff(&fd) / scale < 1e-4,
                "trial {trial}: gradient mismatch"
            );
        }
    }

    #[test]
    fn scale_by_and_ln_gradients_match_finite_differences() {
        // f(x) = sum(ln(x) * ||x||), exercising both new ops together.
        let build = || {
            let mut b = GraphBuilder::new();
            let x = b.input(vec![3]);
            let lx = b.ln(x);
            let n = b.l2_norm(x);
            let scaled = b.scale_by(lx, n);
            let s = b.sum(scaled);
            b.finish(s).unwrap()
        };
        let x = Tensor::vector(vec![0.5, 1.5, 2.0]);
        let mut g = build();
        g.forward_eval(&[x.clone()]).unwrap();
        let grad = g.backward_grad(0).unwrap();
        let mut probe = build();
        let fd = finite_diff_gradient(
            |p| Ok(probe.forward_eval(&[p.clone()])?.scalar_value()),
            &x,
            1e-6,
        )
        .unwrap();
        assert!(grad.max_abs_diff(&fd) < 1e-5);
    }

    #[test]
    fn scale_by_requires_scalar_multiplier() {
        let mut b = GraphBuilder::new();
        let x = b.input(vec![3]);
        let y = b.input(vec![3]);
        let bad = b.scale_by(x, y);
        assert!(b.finish(bad).is_err());
    }

    #[test]
    fn finite_diff_on_product() {
        let x = Tensor::vector(vec![2.0, 5.0]);
        let fd = finite_diff_gradient(|p| Ok(p.data()[0] * p.data()[1]), &x, 1e-5).unwrap();
        assert!((fd.data()[0] - 5.0).abs() < 1e-6);
        assert!((fd.data()[1] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_rejects_bad_step_and_nonfinite() {
        let x = Tensor::vector(vec![1.0]);
        assert!(finite_diff_gradient(|p| Ok(p.data()[0]), &x, 0.0).is_err());
        assert!(finite_diff_gradient(|_| Ok(f64::NAN), &x, 1e-4).is_err());
    }

    #[test]
    fn identity_override_skips_projection() {
        // f = clamp o g with a straight-through clamp: gradient equals the
        // gradient of g alone.
        let mut b = GraphBuilder::new();
        let x = b.input(vec![2]);
        let scaled = b.scale(x, 3.0);
        let clamped = b.clamp(scaled, -0.5, 0.5);
        let s = b.sum(clamped);
        let mut g = b.finish(s).unwrap();
        let xv = Tensor::vector(vec![1.0, -2.0]); // both outside the clamp box
        g.forward_eval(&[xv.clone()]).unwrap();
        let masked = g.backward_grad(0).unwrap();
        assert_eq!(masked.data(), &[0.0, 0.0]);

        g.attach_override(clamped, BackwardOverride::Identity).unwrap();
        let before = g.forward_eval(&[xv.clone()]).unwrap();
        let through = g.backward_grad(0).unwrap();
        assert_eq!(through.data(), &[3.0, 3.0]);
        // Forward output untouched by the override.
        let after = g.forward_eval(&[xv]).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn custom_linear_override_applies_declared_jacobian() {
        let mut b = GraphBuilder::new();
        let x = b.input(vec![2]);
        let r = b.relu(x);
        let s = b.sum(r);
        let mut g = b.finish(s).unwrap();
        g.attach_override(
            r,
            BackwardOverride::CustomLinear(Tensor::matrix(2, 2, vec![2.0, 0.0, 0.0, 4.0]).unwrap()),
        )
        .unwrap();
        g.forward_eval(&[Tensor::vector(vec![-1.0, 1.0])]).unwrap();
        let grad = g.backward_grad(0).unwrap();
        assert_eq!(grad.data(), &[2.0, 4.0]);
    }

    #[test]
    fn trajectory_average_matches_explicit_mean() {
        // classifier = tanh(W h + b), loss = -log_softmax[0]; the "purifier"
        // node carries a trajectory override over six iterates. The gradient
        // must equal the mean of the six per-iterate classifier gradients.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: Vec<f64> = (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f64> = (0..3).map(|_| rng.gen_range(-0.5..0.5)).collect();

        let build = || {
            let mut b = GraphBuilder::new();
            let x = b.input(vec![3]);
            let purified = b.clamp(x, 0.0, 1.0); // stand-in purification node
            let wc = b.constant(Tensor::matrix(3, 3, w.clone()).unwrap());
            let bc = b.constant(Tensor::vector(bias.clone()));
            let z = b.affine(purified, wc, bc);
            let ls = b.log_softmax(z);
            let p = b.select(ls, 0);
            let loss = b.scale(p, -1.0);
            (b.finish(loss).unwrap(), purified)
        };

        let iterates: Vec<Tensor> = (0..6)
            .map(|_| Tensor::vector((0..3).map(|_| rng.gen_range(0.05..0.95)).collect()))
            .collect();

        let (mut g, purify_node) = build();
        g.attach_override(purify_node, BackwardOverride::TrajectoryAverage(iterates.clone()))
            .unwrap();
        let x0 = Tensor::vector(vec![0.2, 0.8, 0.4]);
        g.forward_eval(&[x0.clone()]).unwrap();
        let traj_grad = g.backward_grad(0).unwrap();

        // Oracle: evaluate the classifier gradient explicitly at each iterate.
        let mut mean = Tensor::zeros(vec![3]);
        for it in &iterates {
            let (mut plain, node) = build();
            plain.attach_override(node, BackwardOverride::Identity).unwrap();
            plain.forward_eval(&[it.clone()]).unwrap();
            mean = mean.add(&plain.backward_grad(0).unwrap());
        }
        mean = mean.scale(1.0 / iterates.len() as f64);
        assert!(traj_grad.max_abs_diff(&mean) < 1e-10);

        // And the forward value is still the plain forward value.
        let out_with = g.forward_eval(&[x0.clone()]).unwrap();
        let (mut plain, _) = build();
        let out_plain = plain.forward_eval(&[x0]).unwrap();
        assert_eq!(out_with, out_plain);
    }

    #[test]
    fn override_shape_checks() {
        let mut b = GraphBuilder::new();
        let x = b.input(vec![3]);
        let wc = b.constant(Tensor::matrix(2, 3, vec![1.0; 6]).unwrap());
        let bc = b.constant(Tensor::vector(vec![0.0; 2]));
        let y = b.affine(x, wc, bc);
        let s = b.sum(y);
        let mut g = b.finish(s).unwrap();
        // Affine changes dimension, so identity is incompatible; it also has
        // three parents.
        assert!(g.attach_override(y, BackwardOverride::Identity).is_err());
        assert!(g
            .attach_override(y, BackwardOverride::TrajectoryAverage(vec![]))
            .is_err());
    }

    #[test]
    fn nonfinite_evaluation_aborts_with_node() {
        let mut b = GraphBuilder::new();
        let x = b.input(vec![2]);
        let d = b.div(x, x);
        let s = b.sum(d);
        let mut g = b.finish(s).unwrap();
        match g.forward_eval(&[Tensor::vector(vec![0.0, 1.0])]) {
            Err(Error::NonFinite { node, .. }) => assert_eq!(node, 1),
            other => panic!("expected non-finite abort, got {other:?}"),
        }
    }
}
