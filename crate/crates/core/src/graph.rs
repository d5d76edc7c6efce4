//! Static computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] is an immutable list of nodes in topological order: a node may
//! only reference nodes created before it, so every graph is acyclic by
//! construction. Leaves are named inputs, named parameters, or constants.
//! Tensors are bound to leaf names at call time through [`Bindings`], which
//! keeps graphs shareable across threads and evaluation reentrant.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::tensor::{col2im, gemm, im2col, Tensor};

const CHANNEL_NORM_EPS: f64 = 1e-10;
const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Input(String),
    Param(String),
    Constant(Tensor),
    /// `[m, k] x [k, n] -> [m, n]`
    MatMul,
    /// `[c, h, w] (*) [o, c, k, k] -> [o, h, w]`, same padding, stride 1, odd `k`.
    Conv2d,
    /// Nearest-neighbour upsampling by 2 on `[c, h, w]`.
    Upsample2,
    /// Average pooling over 2x2 windows on `[c, h, w]`.
    AvgPool2,
    Add,
    Sub,
    Mul,
    Scale(f64),
    /// `[m, n] + [n]`, the bias of a dense layer.
    AddRow,
    /// `[c, h, w] * [c]`
    ScaleChannels,
    /// `[c, h, w] + [c]`
    ShiftChannels,
    Relu,
    Sigmoid,
    Mean,
    SumSquares,
    /// Unit L2 norm across channels at every pixel of `[c, h, w]`.
    ChannelNormalize,
    /// Zero mean, unit variance over the spatial extent of each channel.
    InstanceNormalize,
    /// Row `i` of `[m, n]` as `[1, n]`.
    Row(usize),
    Reshape(Vec<usize>),
    /// Mean binary cross-entropy of logits against targets of the same shape.
    BceWithLogits,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Constant(_) => "constant",
            Op::MatMul => "matmul",
            Op::Conv2d => "conv2d",
            Op::Upsample2 => "upsample2",
            Op::AvgPool2 => "avg_pool2",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddRow => "add_row",
            Op::ScaleChannels => "scale_channels",
            Op::ShiftChannels => "shift_channels",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Mean => "mean",
            Op::SumSquares => "sum_squares",
            Op::ChannelNormalize => "channel_normalize",
            Op::InstanceNormalize => "instance_normalize",
            Op::Row(_) => "row",
            Op::Reshape(_) => "reshape",
            Op::BceWithLogits => "bce_with_logits",
        }
    }

    fn leaf_name(&self) -> Option<&str> {
        match self {
            Op::Input(n) | Op::Param(n) => Some(n),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
}

/// Named parameter tensors, ordered by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Unbound(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Copies every entry of `other` whose name starts with `prefix`.
    pub fn extend_prefixed(&mut self, other: &ParamSet, prefix: &str) {
        for (k, v) in other.iter() {
            if k.starts_with(prefix) {
                self.insert(k, v.clone());
            }
        }
    }
}

impl FromIterator<(String, Tensor)> for ParamSet {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            tensors: iter.into_iter().collect(),
        }
    }
}

/// Leaf-name to tensor bindings for one call.
#[derive(Clone, Default)]
pub struct Bindings<'a> {
    map: BTreeMap<&'a str, &'a Tensor>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(mut self, name: &'a str, t: &'a Tensor) -> Self {
        self.map.insert(name, t);
        self
    }

    pub fn insert(&mut self, name: &'a str, t: &'a Tensor) {
        self.map.insert(name, t);
    }

    pub fn bind_params(mut self, params: &'a ParamSet) -> Self {
        for (k, v) in params.iter() {
            self.map.insert(k, v);
        }
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor> {
        self.map.get(name).copied()
    }
}

/// All node values of one forward pass.
pub struct Evaluation {
    values: Vec<Tensor>,
    // im2col buffers kept for the convolution backward pass
    aux: Vec<Option<Vec<f64>>>,
}

impl Evaluation {
    pub fn get(&self, node: NodeId) -> &Tensor {
        &self.values[node.0]
    }
}

/// Loss value plus gradients keyed by leaf name.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub value: f64,
    pub grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }
}

#[derive(Clone, Debug, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    outputs: Vec<(String, NodeId)>,
}

macro_rules! unary {
    ($($fn_name:ident => $op:expr),* $(,)?) => {
        $(pub fn $fn_name(&mut self, x: NodeId) -> NodeId {
            self.push($op, vec![x])
        })*
    };
}

macro_rules! binary {
    ($($fn_name:ident => $op:expr),* $(,)?) => {
        $(pub fn $fn_name(&mut self, a: NodeId, b: NodeId) -> NodeId {
            self.push($op, vec![a, b])
        })*
    };
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> NodeId {
        debug_assert!(inputs.iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(Node { op, inputs });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input(name.to_string()), Vec::new())
    }

    pub fn param(&mut self, name: &str) -> NodeId {
        self.push(Op::Param(name.to_string()), Vec::new())
    }

    pub fn constant(&mut self, t: Tensor) -> NodeId {
        self.push(Op::Constant(t), Vec::new())
    }

    unary! {
        upsample2 => Op::Upsample2,
        avg_pool2 => Op::AvgPool2,
        relu => Op::Relu,
        sigmoid => Op::Sigmoid,
        mean => Op::Mean,
        sum_squares => Op::SumSquares,
        channel_normalize => Op::ChannelNormalize,
        instance_normalize => Op::InstanceNormalize,
    }

    binary! {
        matmul => Op::MatMul,
        conv2d => Op::Conv2d,
        add => Op::Add,
        sub => Op::Sub,
        mul => Op::Mul,
        add_row => Op::AddRow,
        scale_channels => Op::ScaleChannels,
        shift_channels => Op::ShiftChannels,
        bce_with_logits => Op::BceWithLogits,
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        self.push(Op::Scale(s), vec![x])
    }

    pub fn row(&mut self, x: NodeId, i: usize) -> NodeId {
        self.push(Op::Row(i), vec![x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        self.push(Op::Reshape(shape.to_vec()), vec![x])
    }

    /// Mean squared difference of two same-shaped nodes.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    pub fn output(&mut self, name: &str, node: NodeId) {
        self.outputs.push((name.to_string(), node));
    }

    pub fn build(self) -> Graph {
        Graph {
            nodes: self.nodes,
            outputs: self.outputs,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    outputs: Vec<(String, NodeId)>,
}

fn shape_err(node: usize, op: &Op, detail: String) -> Error {
    Error::Shape {
        node,
        op: op.name(),
        detail,
    }
}

impl Graph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, node: NodeId) -> &Op {
        &self.nodes[node.0].op
    }

    pub fn output_node(&self, name: &str) -> Option<NodeId> {
        self.outputs.iter().find(|(n, _)| n == name).map(|(_, id)| *id)
    }

    /// Names of all input and parameter leaves.
    pub fn leaf_names(&self) -> BTreeSet<&str> {
        self.nodes.iter().filter_map(|n| n.op.leaf_name()).collect()
    }

    /// Evaluates the graph and returns its named outputs.
    pub fn evaluate(&self, bindings: &Bindings) -> Result<BTreeMap<String, Tensor>> {
        let ev = self.forward(bindings)?;
        Ok(self
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), ev.values[id.0].clone()))
            .collect())
    }

    /// Evaluates every node.
    pub fn forward(&self, bindings: &Bindings) -> Result<Evaluation> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut aux = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let (value, extra) = forward_node(idx, node, &values, bindings)?;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    node: idx,
                    op: node.op.name(),
                });
            }
            values.push(value);
            aux.push(extra);
        }
        Ok(Evaluation { values, aux })
    }

    /// Scalar value of `output` and its gradient with respect to each leaf
    /// named in `wrt`. Names bound but unused by the graph get a zero gradient.
    pub fn gradient(&self, bindings: &Bindings, output: NodeId, wrt: &[&str]) -> Result<Gradients> {
        let ev = self.forward(bindings)?;
        let out = &ev.values[output.0];
        if out.rank() != 0 {
            return Err(Error::NotScalar(out.shape().to_vec()));
        }
        let value = out.item();
        let grads = self.vjp(&ev, bindings, output, Tensor::scalar(1.0), wrt)?;
        Ok(Gradients { value, grads })
    }

    /// Vector-Jacobian product of `output` against `cotangent`.
    pub fn vjp(
        &self,
        ev: &Evaluation,
        bindings: &Bindings,
        output: NodeId,
        cotangent: Tensor,
        wrt: &[&str],
    ) -> Result<BTreeMap<String, Tensor>> {
        let out_shape = ev.values[output.0].shape();
        if cotangent.shape() != out_shape {
            return Err(Error::invalid(format!(
                "cotangent shape {:?} does not match output {:?}",
                cotangent.shape(),
                out_shape
            )));
        }
        let wanted: BTreeSet<&str> = wrt.iter().copied().collect();
        let leaves = self.leaf_names();
        for name in &wanted {
            if !leaves.contains(name) && bindings.get(name).is_none() {
                return Err(Error::UnknownName(name.to_string()));
            }
        }

        // needs[i]: node i depends on a requested leaf
        let mut needs = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            needs[i] = match node.op.leaf_name() {
                Some(name) => wanted.contains(name),
                None => node.inputs.iter().any(|j| needs[j.0]),
            };
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if needs[output.0] {
            grads[output.0] = Some(cotangent);
        }
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.op.leaf_name().is_some() {
                grads[idx] = Some(g);
                continue;
            }
            let input_needs: Vec<bool> = node.inputs.iter().map(|j| needs[j.0]).collect();
            let input_grads = backward_node(node, &ev.values, &ev.aux[idx], &ev.values[idx], &g, &input_needs);
            for (slot, ig) in node.inputs.iter().zip(input_grads) {
                if let Some(ig) = ig {
                    match &mut grads[slot.0] {
                        Some(acc) => acc.add_assign(&ig),
                        empty => *empty = Some(ig),
                    }
                }
            }
        }

        let mut result = BTreeMap::new();
        for name in wanted {
            let mut acc: Option<Tensor> = None;
            for (i, node) in self.nodes.iter().enumerate() {
                if node.op.leaf_name() == Some(name) {
                    if let Some(g) = grads[i].take() {
                        match &mut acc {
                            Some(a) => a.add_assign(&g),
                            None => acc = Some(g),
                        }
                    }
                }
            }
            let g = match acc {
                Some(g) => g,
                None => {
                    let bound = bindings.get(name).ok_or_else(|| Error::Unbound(name.to_string()))?;
                    Tensor::zeros(bound.shape())
                }
            };
            result.insert(name.to_string(), g);
        }
        Ok(result)
    }
}

fn forward_node(idx: usize, node: &Node, values: &[Tensor], bindings: &Bindings) -> Result<(Tensor, Option<Vec<f64>>)> {
    let op = &node.op;
    let arg = |i: usize| &values[node.inputs[i].0];
    let err = |detail: String| shape_err(idx, op, detail);
    let out = match op {
        Op::Input(name) | Op::Param(name) => bindings
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Unbound(name.clone()))?,
        Op::Constant(t) => t.clone(),
        Op::MatMul => {
            let (a, b) = (arg(0), arg(1));
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(err(format!("{:?} x {:?}", a.shape(), b.shape())));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, &mut c, false);
            Tensor::new(vec![m, n], c)?
        }
        Op::Conv2d => {
            let (x, w) = (arg(0), arg(1));
            if x.rank() != 3
                || w.rank() != 4
                || w.shape()[1] != x.shape()[0]
                || w.shape()[2] != w.shape()[3]
                || w.shape()[2] % 2 == 0
            {
                return Err(err(format!("image {:?}, kernel {:?}", x.shape(), w.shape())));
            }
            let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (o, k) = (w.shape()[0], w.shape()[2]);
            let cols = im2col(x.data(), c, h, wd, k);
            let mut y = vec![0.0; o * h * wd];
            gemm(o, c * k * k, h * wd, w.data(), false, &cols, false, &mut y, false);
            return Ok((Tensor::new(vec![o, h, wd], y)?, Some(cols)));
        }
        Op::Upsample2 => {
            let x = arg(0);
            if x.rank() != 3 {
                return Err(err(format!("{:?}", x.shape())));
            }
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut y = vec![0.0; c * 4 * h * w];
            let xd = x.data();
            for ci in 0..c {
                for yy in 0..2 * h {
                    for xx in 0..2 * w {
                        y[(ci * 2 * h + yy) * 2 * w + xx] = xd[(ci * h + yy / 2) * w + xx / 2];
                    }
                }
            }
            Tensor::new(vec![c, 2 * h, 2 * w], y)?
        }
        Op::AvgPool2 => {
            let x = arg(0);
            if x.rank() != 3 || x.shape()[1] % 2 != 0 || x.shape()[2] % 2 != 0 {
                return Err(err(format!("{:?}", x.shape())));
            }
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (ho, wo) = (h / 2, w / 2);
            let mut y = vec![0.0; c * ho * wo];
            let xd = x.data();
            for ci in 0..c {
                for yy in 0..h {
                    for xx in 0..w {
                        y[(ci * ho + yy / 2) * wo + xx / 2] += 0.25 * xd[(ci * h + yy) * w + xx];
                    }
                }
            }
            Tensor::new(vec![c, ho, wo], y)?
        }
        Op::Add | Op::Sub | Op::Mul | Op::BceWithLogits => {
            let (a, b) = (arg(0), arg(1));
            if a.shape() != b.shape() {
                return Err(err(format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            let (ad, bd) = (a.data(), b.data());
            match op {
                Op::Add => Tensor::new(a.shape().to_vec(), ad.iter().zip(bd).map(|(x, y)| x + y).collect())?,
                Op::Sub => Tensor::new(a.shape().to_vec(), ad.iter().zip(bd).map(|(x, y)| x - y).collect())?,
                Op::Mul => Tensor::new(a.shape().to_vec(), ad.iter().zip(bd).map(|(x, y)| x * y).collect())?,
                _ => {
                    let n = ad.len() as f64;
                    let total: f64 = ad.iter().zip(bd).map(|(&l, &t)| softplus(l) - t * l).sum();
                    Tensor::scalar(total / n)
                }
            }
        }
        Op::Scale(s) => arg(0).map(|v| v * s),
        Op::AddRow => {
            let (x, b) = (arg(0), arg(1));
            if x.rank() != 2 || b.len() != x.shape()[1] {
                return Err(err(format!("{:?} + {:?}", x.shape(), b.shape())));
            }
            let n = x.shape()[1];
            let mut y = x.data().to_vec();
            for row in y.chunks_mut(n) {
                for (v, bias) in row.iter_mut().zip(b.data()) {
                    *v += bias;
                }
            }
            Tensor::new(x.shape().to_vec(), y)?
        }
        Op::ScaleChannels | Op::ShiftChannels => {
            let (x, s) = (arg(0), arg(1));
            if x.rank() != 3 || s.len() != x.shape()[0] {
                return Err(err(format!("{:?} with {:?}", x.shape(), s.shape())));
            }
            let plane = x.shape()[1] * x.shape()[2];
            let mut y = x.data().to_vec();
            for (c, chunk) in y.chunks_mut(plane).enumerate() {
                let sv = s.data()[c];
                if matches!(op, Op::ScaleChannels) {
                    chunk.iter_mut().for_each(|v| *v *= sv);
                } else {
                    chunk.iter_mut().for_each(|v| *v += sv);
                }
            }
            Tensor::new(x.shape().to_vec(), y)?
        }
        Op::Relu => arg(0).map(|v| v.max(0.0)),
        Op::Sigmoid => arg(0).map(sigmoid),
        Op::Mean => {
            let x = arg(0);
            Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64)
        }
        Op::SumSquares => Tensor::scalar(arg(0).sum_squares()),
        Op::ChannelNormalize => {
            let x = arg(0);
            if x.rank() != 3 {
                return Err(err(format!("{:?}", x.shape())));
            }
            let (c, plane) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
            let xd = x.data();
            let mut y = vec![0.0; xd.len()];
            for p in 0..plane {
                let ss: f64 = (0..c).map(|ci| xd[ci * plane + p].powi(2)).sum();
                let inv = 1.0 / (ss + CHANNEL_NORM_EPS).sqrt();
                for ci in 0..c {
                    y[ci * plane + p] = xd[ci * plane + p] * inv;
                }
            }
            Tensor::new(x.shape().to_vec(), y)?
        }
        Op::InstanceNormalize => {
            let x = arg(0);
            if x.rank() != 3 {
                return Err(err(format!("{:?}", x.shape())));
            }
            let plane = x.shape()[1] * x.shape()[2];
            let mut y = x.data().to_vec();
            for chunk in y.chunks_mut(plane) {
                let mean = chunk.iter().sum::<f64>() / plane as f64;
                let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane as f64;
                let inv = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
                chunk.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            }
            Tensor::new(x.shape().to_vec(), y)?
        }
        Op::Row(i) => {
            let x = arg(0);
            if x.rank() != 2 || *i >= x.shape()[0] {
                return Err(err(format!("row {i} of {:?}", x.shape())));
            }
            let n = x.shape()[1];
            Tensor::new(vec![1, n], x.data()[i * n..(i + 1) * n].to_vec())?
        }
        Op::Reshape(shape) => {
            let x = arg(0);
            if shape.iter().product::<usize>() != x.len() {
                return Err(err(format!("{:?} -> {:?}", x.shape(), shape)));
            }
            Tensor::new(shape.clone(), x.data().to_vec())?
        }
    };
    Ok((out, None))
}

fn backward_node(
    node: &Node,
    values: &[Tensor],
    aux: &Option<Vec<f64>>,
    out: &Tensor,
    g: &Tensor,
    needs: &[bool],
) -> Vec<Option<Tensor>> {
    let arg = |i: usize| &values[node.inputs[i].0];
    let gd = g.data();
    let like = |t: &Tensor, data: Vec<f64>| Tensor::new(t.shape().to_vec(), data).expect("gradient shape");
    match &node.op {
        Op::Input(_) | Op::Param(_) | Op::Constant(_) => vec![],
        Op::MatMul => {
            let (a, b) = (arg(0), arg(1));
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let da = needs[0].then(|| {
                let mut d = vec![0.0; m * k];
                gemm(m, n, k, gd, false, b.data(), true, &mut d, false);
                like(a, d)
            });
            let db = needs[1].then(|| {
                let mut d = vec![0.0; k * n];
                gemm(k, m, n, a.data(), true, gd, false, &mut d, false);
                like(b, d)
            });
            vec![da, db]
        }
        Op::Conv2d => {
            let (x, w) = (arg(0), arg(1));
            let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (o, k) = (w.shape()[0], w.shape()[2]);
            let cols = aux.as_ref().expect("conv columns");
            let ckk = c * k * k;
            let hw = h * wd;
            let dx = needs[0].then(|| {
                let mut dcols = vec![0.0; ckk * hw];
                gemm(ckk, o, hw, w.data(), true, gd, false, &mut dcols, false);
                like(x, col2im(&dcols, c, h, wd, k))
            });
            let dw = needs[1].then(|| {
                let mut d = vec![0.0; o * ckk];
                gemm(o, hw, ckk, gd, false, cols, true, &mut d, false);
                like(w, d)
            });
            vec![dx, dw]
        }
        Op::Upsample2 => {
            let x = arg(0);
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let mut d = vec![0.0; x.len()];
            for ci in 0..c {
                for yy in 0..2 * h {
                    for xx in 0..2 * w {
                        d[(ci * h + yy / 2) * w + xx / 2] += gd[(ci * 2 * h + yy) * 2 * w + xx];
                    }
                }
            }
            vec![Some(like(x, d))]
        }
        Op::AvgPool2 => {
            let x = arg(0);
            let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (ho, wo) = (h / 2, w / 2);
            let mut d = vec![0.0; x.len()];
            for ci in 0..c {
                for yy in 0..h {
                    for xx in 0..w {
                        d[(ci * h + yy) * w + xx] = 0.25 * gd[(ci * ho + yy / 2) * wo + xx / 2];
                    }
                }
            }
            vec![Some(like(x, d))]
        }
        Op::Add => vec![needs[0].then(|| g.clone()), needs[1].then(|| g.clone())],
        Op::Sub => vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))],
        Op::Mul => {
            let (a, b) = (arg(0), arg(1));
            let da = needs[0].then(|| like(a, gd.iter().zip(b.data()).map(|(g, y)| g * y).collect()));
            let db = needs[1].then(|| like(b, gd.iter().zip(a.data()).map(|(g, x)| g * x).collect()));
            vec![da, db]
        }
        Op::BceWithLogits => {
            let (l, t) = (arg(0), arg(1));
            let scale = gd[0] / l.len() as f64;
            let dl = needs[0].then(|| {
                like(
                    l,
                    l.data()
                        .iter()
                        .zip(t.data())
                        .map(|(&z, &y)| scale * (sigmoid(z) - y))
                        .collect(),
                )
            });
            let dt = needs[1].then(|| like(t, l.data().iter().map(|&z| -scale * z).collect()));
            vec![dl, dt]
        }
        Op::Scale(s) => vec![Some(g.map(|v| v * s))],
        Op::AddRow => {
            let b = arg(1);
            let n = b.len();
            let db = needs[1].then(|| {
                let mut d = vec![0.0; n];
                for row in gd.chunks(n) {
                    for (acc, v) in d.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                like(b, d)
            });
            vec![needs[0].then(|| g.clone()), db]
        }
        Op::ScaleChannels => {
            let (x, s) = (arg(0), arg(1));
            let plane = x.shape()[1] * x.shape()[2];
            let dx = needs[0].then(|| {
                let mut d = gd.to_vec();
                for (c, chunk) in d.chunks_mut(plane).enumerate() {
                    let sv = s.data()[c];
                    chunk.iter_mut().for_each(|v| *v *= sv);
                }
                like(x, d)
            });
            let ds = needs[1].then(|| {
                let d = gd
                    .chunks(plane)
                    .zip(x.data().chunks(plane))
                    .map(|(gc, xc)| gc.iter().zip(xc).map(|(a, b)| a * b).sum())
                    .collect();
                like(s, d)
            });
            vec![dx, ds]
        }
        Op::ShiftChannels => {
            let (x, b) = (arg(0), arg(1));
            let plane = x.shape()[1] * x.shape()[2];
            let db = needs[1].then(|| like(b, gd.chunks(plane).map(|c| c.iter().sum()).collect()));
            vec![needs[0].then(|| g.clone()), db]
        }
        Op::Relu => {
            let x = arg(0);
            vec![Some(like(
                x,
                gd.iter()
                    .zip(x.data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect(),
            ))]
        }
        Op::Sigmoid => vec![Some(like(
            out,
            gd.iter().zip(out.data()).map(|(g, y)| g * y * (1.0 - y)).collect(),
        ))],
        Op::Mean => {
            let x = arg(0);
            vec![Some(Tensor::filled(x.shape(), gd[0] / x.len() as f64))]
        }
        Op::SumSquares => {
            let x = arg(0);
            vec![Some(x.map(|v| 2.0 * v * gd[0]))]
        }
        Op::ChannelNormalize => {
            let x = arg(0);
            let (c, plane) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
            let (xd, yd) = (x.data(), out.data());
            let mut d = vec![0.0; x.len()];
            for p in 0..plane {
                let ss: f64 = (0..c).map(|ci| xd[ci * plane + p].powi(2)).sum();
                let inv = 1.0 / (ss + CHANNEL_NORM_EPS).sqrt();
                let dot: f64 = (0..c).map(|ci| gd[ci * plane + p] * yd[ci * plane + p]).sum();
                for ci in 0..c {
                    let i = ci * plane + p;
                    d[i] = (gd[i] - yd[i] * dot) * inv;
                }
            }
            vec![Some(like(x, d))]
        }
        Op::InstanceNormalize => {
            let x = arg(0);
            let plane = x.shape()[1] * x.shape()[2];
            let n = plane as f64;
            let mut d = vec![0.0; x.len()];
            for (((dc, gc), yc), xc) in d
                .chunks_mut(plane)
                .zip(gd.chunks(plane))
                .zip(out.data().chunks(plane))
                .zip(x.data().chunks(plane))
            {
                let mean = xc.iter().sum::<f64>() / n;
                let var = xc.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let inv = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
                let g_mean = gc.iter().sum::<f64>() / n;
                let gy_mean = gc.iter().zip(yc).map(|(a, b)| a * b).sum::<f64>() / n;
                for ((dv, gv), yv) in dc.iter_mut().zip(gc).zip(yc) {
                    *dv = inv * (gv - g_mean - yv * gy_mean);
                }
            }
            vec![Some(like(x, d))]
        }
        Op::Row(i) => {
            let x = arg(0);
            let n = x.shape()[1];
            let mut d = vec![0.0; x.len()];
            d[i * n..(i + 1) * n].copy_from_slice(gd);
            vec![Some(like(x, d))]
        }
        Op::Reshape(_) => {
            let x = arg(0);
            vec![Some(like(x, gd.to_vec()))]
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}
