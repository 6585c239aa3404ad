//! Static computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is built once (append-only, so it is acyclic by construction),
//! holds named parameters and running-statistic buffers, and can then be
//! evaluated or differentiated any number of times. Evaluation is lazy: only
//! ancestors of the fetched nodes run. A graph may hold several loss roots;
//! `gradients` differentiates one root at a time, which is how the trainer
//! alternates discriminator and generator objectives over a single graph.

use indexmap::IndexMap;

use super::kernels;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug)]
pub enum Op {
    /// Placeholder bound at evaluation time.
    Input(String),
    /// Trainable parameter reference; gradients accumulate to it.
    Param(String),
    /// Reads a parameter's current value but contributes no gradient to it.
    /// Gradients still flow through to upstream nodes.
    Frozen(String),
    Const(Tensor),
    /// inputs: [x, w, b]; zero "same" padding of kh/2, kw/2.
    Conv2d { stride: usize },
    Upsample2x,
    Relu,
    LeakyRelu(f64),
    Abs,
    /// inputs: [x, gamma, beta]; train mode uses batch statistics and emits
    /// running-stat updates, eval mode reads the named buffers.
    BatchNorm {
        mean_buf: String,
        var_buf: String,
        eps: f64,
        momentum: f64,
    },
    MaxPool2x2,
    /// (N, C, H, W) -> (N, C)
    GlobalAvgPool,
    /// Softmax over the last dimension.
    Softmax,
    Add,
    Sub,
    Mul,
    /// y = scale * x + shift
    Affine { scale: f64, shift: f64 },
    /// y = ln(max(x, floor))
    Ln { floor: f64 },
    /// Drops the last dimension by summation.
    SumLastDim,
    /// Full reduction to a rank-0 scalar.
    Mean,
    Sum,
    StopGradient,
    /// inputs: [a, b] with shapes (N, Ca, H, W) and (N, Cb, H, W).
    ConcatChannels,
    /// inputs: [raw, source, mask]; y = mask * raw + (1 - mask) * source with
    /// mask (N, 1, H, W) broadcast over channels. Exactly binary mask values
    /// reproduce raw/source bit-for-bit.
    Blend,
    Clamp01,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Frozen(_) => "frozen",
            Op::Const(_) => "const",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x => "upsample2x",
            Op::Relu => "relu",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Abs => "abs",
            Op::BatchNorm { .. } => "batch_norm",
            Op::MaxPool2x2 => "max_pool2x2",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Softmax => "softmax",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Affine { .. } => "affine",
            Op::Ln { .. } => "ln",
            Op::SumLastDim => "sum_last_dim",
            Op::Mean => "mean",
            Op::Sum => "sum",
            Op::StopGradient => "stop_gradient",
            Op::ConcatChannels => "concat_channels",
            Op::Blend => "blend",
            Op::Clamp01 => "clamp01",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
}

/// Running-statistic update emitted by a train-mode batch-norm evaluation.
/// Committed as `buffer = (1 - momentum) * buffer + momentum * value`, in
/// emission order.
#[derive(Clone, Debug)]
pub struct BufferUpdate {
    pub name: String,
    pub value: Tensor,
    pub momentum: f64,
}

enum Aux {
    None,
    BatchNorm {
        mean: Vec<f64>,
        var: Vec<f64>,
        from_batch: bool,
    },
    MaxPool {
        argmax: Vec<u32>,
    },
}

pub struct Evaluation {
    values: Vec<Option<Tensor>>,
    aux: Vec<Aux>,
    pub buffer_updates: Vec<BufferUpdate>,
}

impl Evaluation {
    pub fn value(&self, id: NodeId) -> &Tensor {
        self.values[id]
            .as_ref()
            .expect("node was not part of the evaluated subgraph")
    }

    pub fn try_value(&self, id: NodeId) -> Option<&Tensor> {
        self.values.get(id).and_then(|v| v.as_ref())
    }
}

pub struct GradientResult {
    pub loss_value: f64,
    /// One gradient tensor per parameter, in registration order; parameters
    /// the loss does not reach get exact zeros.
    pub grads: IndexMap<String, Tensor>,
    pub evaluation: Evaluation,
}

#[derive(Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: IndexMap<String, Tensor>,
    buffers: IndexMap<String, Tensor>,
    outputs: IndexMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>) -> NodeId {
        for &i in &inputs {
            assert!(i < self.nodes.len(), "graph input id out of range");
        }
        self.nodes.push(Node { op, inputs });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, name: &str) -> NodeId {
        self.push(Op::Input(name.to_string()), vec![])
    }

    /// Register a trainable parameter and return a node referencing it.
    pub fn param(&mut self, name: &str, init: Tensor) -> NodeId {
        assert!(
            !self.params.contains_key(name),
            "parameter '{name}' registered twice"
        );
        self.params.insert(name.to_string(), init);
        self.push(Op::Param(name.to_string()), vec![])
    }

    /// Additional trainable reference to an already-registered parameter
    /// (weight sharing).
    pub fn param_ref(&mut self, name: &str) -> NodeId {
        assert!(self.params.contains_key(name), "unknown parameter '{name}'");
        self.push(Op::Param(name.to_string()), vec![])
    }

    /// Reference a parameter without routing gradients into it.
    pub fn frozen_ref(&mut self, name: &str) -> NodeId {
        assert!(self.params.contains_key(name), "unknown parameter '{name}'");
        self.push(Op::Frozen(name.to_string()), vec![])
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const(value), vec![])
    }

    pub fn register_buffer(&mut self, name: &str, init: Tensor) {
        assert!(
            !self.buffers.contains_key(name),
            "buffer '{name}' registered twice"
        );
        self.buffers.insert(name.to_string(), init);
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> NodeId {
        self.push(Op::Conv2d { stride }, vec![x, w, b])
    }

    pub fn upsample2x(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Upsample2x, vec![x])
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Relu, vec![x])
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        self.push(Op::LeakyRelu(slope), vec![x])
    }

    pub fn abs(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Abs, vec![x])
    }

    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean_buf: &str,
        var_buf: &str,
        eps: f64,
        momentum: f64,
    ) -> NodeId {
        assert!(self.buffers.contains_key(mean_buf) && self.buffers.contains_key(var_buf));
        self.push(
            Op::BatchNorm {
                mean_buf: mean_buf.to_string(),
                var_buf: var_buf.to_string(),
                eps,
                momentum,
            },
            vec![x, gamma, beta],
        )
    }

    pub fn max_pool2x2(&mut self, x: NodeId) -> NodeId {
        self.push(Op::MaxPool2x2, vec![x])
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        self.push(Op::GlobalAvgPool, vec![x])
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Softmax, vec![x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul, vec![a, b])
    }

    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> NodeId {
        self.push(Op::Affine { scale, shift }, vec![x])
    }

    pub fn ln(&mut self, x: NodeId, floor: f64) -> NodeId {
        self.push(Op::Ln { floor }, vec![x])
    }

    pub fn sum_last_dim(&mut self, x: NodeId) -> NodeId {
        self.push(Op::SumLastDim, vec![x])
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Mean, vec![x])
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Sum, vec![x])
    }

    pub fn stop_gradient(&mut self, x: NodeId) -> NodeId {
        self.push(Op::StopGradient, vec![x])
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::ConcatChannels, vec![a, b])
    }

    pub fn blend(&mut self, raw: NodeId, source: NodeId, mask: NodeId) -> NodeId {
        self.push(Op::Blend, vec![raw, source, mask])
    }

    pub fn clamp01(&mut self, x: NodeId) -> NodeId {
        self.push(Op::Clamp01, vec![x])
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    pub fn output_id(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn params(&self) -> &IndexMap<String, Tensor> {
        &self.params
    }

    pub fn buffers(&self) -> &IndexMap<String, Tensor> {
        &self.buffers
    }

    pub fn param_scalar_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::InvalidTensor(format!(
                "parameter '{name}' has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn set_buffer(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .buffers
            .get_mut(name)
            .ok_or_else(|| Error::UnknownBuffer(name.to_string()))?;
        if slot.shape() != value.shape() {
            return Err(Error::InvalidTensor(format!(
                "buffer '{name}' has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn param_tensor(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn param_data_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        self.params
            .get_mut(name)
            .map(Tensor::data_mut)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn commit_buffer_updates(&mut self, updates: &[BufferUpdate]) {
        for u in updates {
            let buf = self
                .buffers
                .get_mut(&u.name)
                .expect("buffer update for unregistered buffer");
            for (dst, src) in buf.data_mut().iter_mut().zip(u.value.data()) {
                *dst = (1.0 - u.momentum) * *dst + u.momentum * src;
            }
        }
    }

    fn ancestors(&self, roots: &[NodeId]) -> Vec<bool> {
        let mut needed = vec![false; self.nodes.len()];
        let mut stack: Vec<NodeId> = roots.to_vec();
        while let Some(id) = stack.pop() {
            if needed[id] {
                continue;
            }
            needed[id] = true;
            stack.extend(&self.nodes[id].inputs);
        }
        needed
    }

    fn shape_err(&self, node: NodeId, detail: String) -> Error {
        Error::ShapeMismatch {
            node,
            op: self.nodes[node].op.name().to_string(),
            detail,
        }
    }

    /// Run the subgraph feeding `fetches`. Deterministic: identical inputs,
    /// parameters, and buffers produce bit-identical values.
    pub fn evaluate(
        &self,
        fetches: &[NodeId],
        inputs: &IndexMap<String, Tensor>,
        mode: Mode,
    ) -> Result<Evaluation> {
        let needed = self.ancestors(fetches);
        let mut ev = Evaluation {
            values: (0..self.nodes.len()).map(|_| None).collect(),
            aux: (0..self.nodes.len()).map(|_| Aux::None).collect(),
            buffer_updates: Vec::new(),
        };
        for id in 0..self.nodes.len() {
            if !needed[id] {
                continue;
            }
            self.eval_node(id, inputs, mode, &mut ev)?;
        }
        Ok(ev)
    }

    /// Evaluate selected graph outputs by name.
    pub fn evaluate_named(
        &self,
        names: &[&str],
        inputs: &IndexMap<String, Tensor>,
        mode: Mode,
    ) -> Result<(IndexMap<String, Tensor>, Evaluation)> {
        let mut ids = Vec::new();
        for n in names {
            let id = self
                .outputs
                .get(*n)
                .copied()
                .ok_or_else(|| Error::InvalidArgument(format!("unknown graph output '{n}'")))?;
            ids.push(id);
        }
        let ev = self.evaluate(&ids, inputs, mode)?;
        let mut out = IndexMap::new();
        for (n, id) in names.iter().zip(ids) {
            out.insert(n.to_string(), ev.value(id).clone());
        }
        Ok((out, ev))
    }

    fn eval_node(
        &self,
        id: NodeId,
        inputs: &IndexMap<String, Tensor>,
        mode: Mode,
        ev: &mut Evaluation,
    ) -> Result<()> {
        let node = &self.nodes[id];
        let val = |ev: &Evaluation, i: usize| -> Tensor { ev.value(node.inputs[i]).clone() };
        let out = match &node.op {
            Op::Input(name) => inputs
                .get(name)
                .cloned()
                .ok_or_else(|| Error::UnboundInput(name.clone()))?,
            Op::Param(name) | Op::Frozen(name) => self
                .params
                .get(name)
                .cloned()
                .ok_or_else(|| Error::UnknownParam(name.clone()))?,
            Op::Const(t) => t.clone(),
            Op::Conv2d { stride } => {
                let (x, w, b) = (
                    ev.value(node.inputs[0]),
                    ev.value(node.inputs[1]),
                    ev.value(node.inputs[2]),
                );
                kernels::conv2d_forward(x, w, b, *stride)
                    .map_err(|e| self.shape_err(id, e.to_string()))?
            }
            Op::Upsample2x => kernels::upsample2x_forward(ev.value(node.inputs[0]))
                .map_err(|e| self.shape_err(id, e.to_string()))?,
            Op::Relu => val(ev, 0).map(|v| if v > 0.0 { v } else { 0.0 }),
            Op::LeakyRelu(slope) => {
                let s = *slope;
                val(ev, 0).map(|v| if v > 0.0 { v } else { s * v })
            }
            Op::Abs => val(ev, 0).map(f64::abs),
            Op::BatchNorm {
                mean_buf,
                var_buf,
                eps,
                momentum,
            } => {
                let x = ev.value(node.inputs[0]);
                let gamma = ev.value(node.inputs[1]).data().to_vec();
                let beta = ev.value(node.inputs[2]).data().to_vec();
                let c = x.shape()[1];
                if gamma.len() != c || beta.len() != c {
                    return Err(self.shape_err(
                        id,
                        format!("gamma/beta length {} vs {c} channels", gamma.len()),
                    ));
                }
                let (mean, var) = match mode {
                    Mode::Train => {
                        let stats =
                            kernels::batch_stats(x).map_err(|e| self.shape_err(id, e.to_string()))?;
                        ev.buffer_updates.push(BufferUpdate {
                            name: mean_buf.clone(),
                            value: Tensor::from_vec(vec![c], stats.mean.clone())?,
                            momentum: *momentum,
                        });
                        ev.buffer_updates.push(BufferUpdate {
                            name: var_buf.clone(),
                            value: Tensor::from_vec(vec![c], stats.var.clone())?,
                            momentum: *momentum,
                        });
                        (stats.mean, stats.var)
                    }
                    Mode::Eval => {
                        let mean = self
                            .buffers
                            .get(mean_buf)
                            .ok_or_else(|| Error::UnknownBuffer(mean_buf.clone()))?
                            .data()
                            .to_vec();
                        let var = self
                            .buffers
                            .get(var_buf)
                            .ok_or_else(|| Error::UnknownBuffer(var_buf.clone()))?
                            .data()
                            .to_vec();
                        (mean, var)
                    }
                };
                let y = kernels::batchnorm_apply(x, &gamma, &beta, &mean, &var, *eps)
                    .map_err(|e| self.shape_err(id, e.to_string()))?;
                ev.aux[id] = Aux::BatchNorm {
                    mean,
                    var,
                    from_batch: mode == Mode::Train,
                };
                y
            }
            Op::MaxPool2x2 => {
                let (y, argmax) = kernels::maxpool2x2_forward(ev.value(node.inputs[0]))
                    .map_err(|e| self.shape_err(id, e.to_string()))?;
                ev.aux[id] = Aux::MaxPool { argmax };
                y
            }
            Op::GlobalAvgPool => {
                let x = ev.value(node.inputs[0]);
                let (n, c, h, w) = x.dims4().map_err(|e| self.shape_err(id, e.to_string()))?;
                let plane = (h * w) as f64;
                let mut y = Tensor::zeros(&[n, c]);
                for p in 0..n * c {
                    y.data_mut()[p] =
                        x.data()[p * h * w..(p + 1) * h * w].iter().sum::<f64>() / plane;
                }
                y
            }
            Op::Softmax => {
                let x = ev.value(node.inputs[0]);
                if x.shape().is_empty() {
                    return Err(self.shape_err(id, "softmax needs rank >= 1".into()));
                }
                let k = *x.shape().last().unwrap();
                let mut y = x.clone();
                for row in y.data_mut().chunks_exact_mut(k) {
                    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for v in row.iter_mut() {
                        *v = (*v - m).exp();
                        z += *v;
                    }
                    for v in row.iter_mut() {
                        *v /= z;
                    }
                }
                y
            }
            Op::Add | Op::Sub | Op::Mul => {
                let a = ev.value(node.inputs[0]);
                let b = ev.value(node.inputs[1]);
                if a.shape() != b.shape() {
                    return Err(
                        self.shape_err(id, format!("{:?} vs {:?}", a.shape(), b.shape()))
                    );
                }
                let mut y = a.clone();
                match node.op {
                    Op::Add => {
                        for (v, s) in y.data_mut().iter_mut().zip(b.data()) {
                            *v += s;
                        }
                    }
                    Op::Sub => {
                        for (v, s) in y.data_mut().iter_mut().zip(b.data()) {
                            *v -= s;
                        }
                    }
                    _ => {
                        for (v, s) in y.data_mut().iter_mut().zip(b.data()) {
                            *v *= s;
                        }
                    }
                }
                y
            }
            Op::Affine { scale, shift } => {
                let (a, b) = (*scale, *shift);
                val(ev, 0).map(|v| a * v + b)
            }
            Op::Ln { floor } => {
                let f = *floor;
                val(ev, 0).map(|v| v.max(f).ln())
            }
            Op::SumLastDim => {
                let x = ev.value(node.inputs[0]);
                if x.shape().is_empty() {
                    return Err(self.shape_err(id, "sum_last_dim needs rank >= 1".into()));
                }
                let k = *x.shape().last().unwrap();
                let outer = x.numel() / k;
                let shape: Vec<usize> = x.shape()[..x.shape().len() - 1].to_vec();
                let mut data = Vec::with_capacity(outer);
                for row in x.data().chunks_exact(k) {
                    data.push(row.iter().sum());
                }
                Tensor::from_vec(shape, data)?
            }
            Op::Mean => {
                let x = ev.value(node.inputs[0]);
                Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64)
            }
            Op::Sum => {
                let x = ev.value(node.inputs[0]);
                Tensor::scalar(x.data().iter().sum::<f64>())
            }
            Op::StopGradient => val(ev, 0),
            Op::ConcatChannels => {
                let a = ev.value(node.inputs[0]);
                let b = ev.value(node.inputs[1]);
                let (n, ca, h, w) = a.dims4().map_err(|e| self.shape_err(id, e.to_string()))?;
                let (nb, cb, hb, wb) = b.dims4().map_err(|e| self.shape_err(id, e.to_string()))?;
                if (n, h, w) != (nb, hb, wb) {
                    return Err(
                        self.shape_err(id, format!("{:?} vs {:?}", a.shape(), b.shape()))
                    );
                }
                let mut y = Tensor::zeros(&[n, ca + cb, h, w]);
                let plane = h * w;
                for i in 0..n {
                    let dst = &mut y.data_mut()[i * (ca + cb) * plane..];
                    dst[..ca * plane]
                        .copy_from_slice(&a.data()[i * ca * plane..(i + 1) * ca * plane]);
                    dst[ca * plane..(ca + cb) * plane]
                        .copy_from_slice(&b.data()[i * cb * plane..(i + 1) * cb * plane]);
                }
                y
            }
            Op::Blend => {
                let raw = ev.value(node.inputs[0]);
                let src = ev.value(node.inputs[1]);
                let mask = ev.value(node.inputs[2]);
                let (n, c, h, w) = raw.dims4().map_err(|e| self.shape_err(id, e.to_string()))?;
                if src.shape() != raw.shape() || mask.shape() != [n, 1, h, w] {
                    return Err(self.shape_err(
                        id,
                        format!(
                            "raw {:?}, source {:?}, mask {:?}",
                            raw.shape(),
                            src.shape(),
                            mask.shape()
                        ),
                    ));
                }
                let plane = h * w;
                let mut y = raw.clone();
                for i in 0..n {
                    let m = &mask.data()[i * plane..(i + 1) * plane];
                    for ch in 0..c {
                        let base = (i * c + ch) * plane;
                        let yd = &mut y.data_mut()[base..base + plane];
                        let sd = &src.data()[base..base + plane];
                        for j in 0..plane {
                            if m[j] == 0.0 {
                                yd[j] = sd[j];
                            } else if m[j] != 1.0 {
                                yd[j] = m[j] * yd[j] + (1.0 - m[j]) * sd[j];
                            }
                        }
                    }
                }
                y
            }
            Op::Clamp01 => val(ev, 0).map(|v| v.clamp(0.0, 1.0)),
        };
        ev.values[id] = Some(out);
        Ok(())
    }

    /// Forward plus reverse pass for a scalar loss node. Returns one gradient
    /// per registered parameter (zeros where the loss does not reach).
    pub fn gradients(
        &self,
        loss: NodeId,
        inputs: &IndexMap<String, Tensor>,
        mode: Mode,
    ) -> Result<GradientResult> {
        let ev = self.evaluate(&[loss], inputs, mode)?;
        let loss_t = ev.value(loss);
        if !loss_t.shape().is_empty() {
            return Err(Error::NonScalarLoss(loss));
        }
        let loss_value = loss_t.item();

        let needed = self.ancestors(&[loss]);
        let mut adjoint: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoint[loss] = Some(Tensor::scalar(1.0));

        for id in (0..self.nodes.len()).rev() {
            if !needed[id] || adjoint[id].is_none() {
                continue;
            }
            let g = adjoint[id].take().unwrap();
            self.backward_node(id, &g, &ev, &mut adjoint)?;
            if matches!(self.nodes[id].op, Op::Param(_)) {
                adjoint[id] = Some(g); // keep for accumulation below
            }
        }

        let mut grads: IndexMap<String, Tensor> = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
            .collect();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                if let Some(g) = &adjoint[id] {
                    let acc = grads.get_mut(name).unwrap();
                    for (dst, src) in acc.data_mut().iter_mut().zip(g.data()) {
                        *dst += src;
                    }
                }
            }
        }
        Ok(GradientResult {
            loss_value,
            grads,
            evaluation: ev,
        })
    }

    fn accumulate(adjoint: &mut Vec<Option<Tensor>>, id: NodeId, g: Tensor) {
        match &mut adjoint[id] {
            Some(acc) => {
                for (dst, src) in acc.data_mut().iter_mut().zip(g.data()) {
                    *dst += src;
                }
            }
            slot => *slot = Some(g),
        }
    }

    fn backward_node(
        &self,
        id: NodeId,
        g: &Tensor,
        ev: &Evaluation,
        adjoint: &mut Vec<Option<Tensor>>,
    ) -> Result<()> {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        match &node.op {
            Op::Input(_) | Op::Param(_) | Op::Frozen(_) | Op::Const(_) | Op::StopGradient => {
                // StopGradient intentionally drops its adjoint.
                if matches!(node.op, Op::StopGradient) {
                    return Ok(());
                }
            }
            Op::Conv2d { stride } => {
                let x = ev.value(ins[0]);
                let w = ev.value(ins[1]);
                let (gx, gw, gb) = kernels::conv2d_backward(x, w, g, *stride)?;
                Self::accumulate(adjoint, ins[0], gx);
                Self::accumulate(adjoint, ins[1], gw);
                Self::accumulate(adjoint, ins[2], gb);
            }
            Op::Upsample2x => {
                Self::accumulate(adjoint, ins[0], kernels::upsample2x_backward(g)?);
            }
            Op::Relu => {
                let x = ev.value(ins[0]);
                let mut gx = g.clone();
                for (gv, &xv) in gx.data_mut().iter_mut().zip(x.data()) {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                Self::accumulate(adjoint, ins[0], gx);
            }
            Op::LeakyRelu(slope) => {
                let x = ev.value(ins[0]);
                let mut gx = g.clone();
                for (gv, &xv) in gx.data_mut().iter_mut().zip(x.data()) {
                    if xv <= 0.0 {
                        *gv *= slope;
                    }
                }
                Self::accumulate(adjoint, ins[0], gx);
            }
            Op::Abs => {
                let x = ev.value(ins[0]);
                let mut gx = g.clone();
                for (gv, &xv) in gx.data_mut().iter_mut().zip(x.data()) {
                    *gv *= if xv > 0.0 {
                        1.0
                    } else if xv < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                }
                Self::accumulate(adjoint, ins[0], gx);
            }
            Op::BatchNorm { eps, .. } => {
                let x = ev.value(ins[0]);
                let gamma = ev.value(ins[1]).data();
                let Aux::BatchNorm {
                    mean,
                    var,
                    from_batch,
                } = &ev.aux[id]
                else {
                    unreachable!("batch-norm aux missing");
                };
                let (gx, ggamma, gbeta) = if *from_batch {
                    kernels::batchnorm_backward_train(x, gamma, mean, var, *eps, g)?
                } else {
                    kernels::batchnorm_backward_eval(x, gamma, mean, var, *eps, g)?
                };
                Self::accumulate(adjoint, ins[0], gx);
                Self::accumulate(adjoint, ins[1], Tensor::from_vec(vec![ggamma.len()], ggamma)?);
                Self::accumulate(adjoint, ins[2], Tensor::from_vec(vec![gbeta.len()], gbeta)?);
            }
            Op::MaxPool2x2 => {
                let x = ev.value(ins[0]);
                let Aux::MaxPool { argmax } = &ev.aux[id] else {
                    unreachable!("max-pool aux missing");
                };
                Self::accumulate(adjoint, ins[0], kernels::maxpool2x2_backward(x.shape(), g, argmax)?);
            }
            Op::GlobalAvgPool => {
                let x = ev.value(ins[0]);
                let (n, c, h, w) = x.dims4()?;
                let scale = 1.0 / (h * w) as f64;
                let mut gx = Tensor::zeros(x.shape());
                for p in 0..n * c {
                    let gv = g.data()[p] * scale;
                    gx.data_mut()[p * h * w..(p + 1) * h * w].fill(gv);
                }
                Self::accumulate(adjoint, ins[0], gx);
            }
            Op::Softmax => {
                // gx = y * (g - sum(g * y)) per row
                let y = ev.value(id);
                let k = *y.shape().last().unwrap();
                let mut gx = y.clone();
                let gd = g.data();
                let yd = y.data();
                let gxd = gx.data_mut();
                for r in 0..yd.len() / k {
                    let base = r * k;
                    let mut dot = 0.0;
                    for j in 0..k {
                        dot += gd[base + j] * yd[base + j];
                    }
                    for j in 0..k {
                        gxd[base + j] = yd[base + j] * (gd[base + j] - dot);
                    }
                }
                Self::accumulate(adjoint, ins[0], gx);
            }
            Op::Add => {
                Self::accumulate(adjoint, ins[0], g.clone());
                Self::accumulate(adjoint, ins[1], g.clone());
            }
            Op::Sub => {
                Self::accumulate(adjoint, ins[0], g.clone());
                Self::accumulate(adjoint, ins[1], g.map(|v| -v));
            }
            Op::Mul => {
                let a = ev.value(ins[0]);
                let b = ev.value(ins[1]);
                let mut ga = g.clone();
                for (gv, bv) in ga.data_mut().iter_mut().zip(b.data()) {
                    *gv *= bv;
                }
                let mut gb = g.clone();
                for (gv, av) in gb.data_mut().iter_mut().zip(a.data()) {
                    *gv *= av;
                }
                Self::accumulate(adjoint, ins[0], ga);
                Self::accumulate(adjoint, ins[1], gb);
            }
            Op::Affine { scale, .. } => {
                Self::accumulate(adjoint, ins[0], g.map(|v| scale * v));
            }
            Op::Ln { floor } => {
                let x = ev.value(ins[0]);
                let mut gx = g.clone();
                for (gv, &xv) in gx.data_mut().iter_mut().zip(x.data()) {
                    *gv = if xv > *floor { *gv / xv } else { 0.0 };
                }
                Self::accumulate(adjoint, ins[0], gx);
            }
            Op::SumLastDim => {
                let x = ev.value(ins[0]);
                let k = *x.shape().last().unwrap();
                let mut gx = Tensor::zeros(x.shape());
                for (row, &gv) in gx.data_mut().chunks_exact_mut(k).zip(g.data()) {
                    row.fill(gv);
                }
                Self::accumulate(adjoint, ins[0], gx);
            }
            Op::Mean => {
                let x = ev.value(ins[0]);
                let gv = g.item() / x.numel() as f64;
                Self::accumulate(adjoint, ins[0], Tensor::filled(x.shape(), gv));
            }
            Op::Sum => {
                let x = ev.value(ins[0]);
                Self::accumulate(adjoint, ins[0], Tensor::filled(x.shape(), g.item()));
            }
            Op::ConcatChannels => {
                let a = ev.value(ins[0]);
                let b = ev.value(ins[1]);
                let (n, ca, h, w) = a.dims4()?;
                let cb = b.shape()[1];
                let plane = h * w;
                let mut ga = Tensor::zeros(a.shape());
                let mut gb = Tensor::zeros(b.shape());
                for i in 0..n {
                    let src = &g.data()[i * (ca + cb) * plane..(i + 1) * (ca + cb) * plane];
                    ga.data_mut()[i * ca * plane..(i + 1) * ca * plane]
                        .copy_from_slice(&src[..ca * plane]);
                    gb.data_mut()[i * cb * plane..(i + 1) * cb * plane]
                        .copy_from_slice(&src[ca * plane..]);
                }
                Self::accumulate(adjoint, ins[0], ga);
                Self::accumulate(adjoint, ins[1], gb);
            }
            Op::Blend => {
                let raw = ev.value(ins[0]);
                let src = ev.value(ins[1]);
                let mask = ev.value(ins[2]);
                let (n, c, h, w) = raw.dims4()?;
                let plane = h * w;
                let mut graw = Tensor::zeros(raw.shape());
                let mut gsrc = Tensor::zeros(src.shape());
                let mut gmask = Tensor::zeros(mask.shape());
                for i in 0..n {
                    let m = &mask.data()[i * plane..(i + 1) * plane];
                    let gm = &mut gmask.data_mut()[i * plane..(i + 1) * plane];
                    for ch in 0..c {
                        let base = (i * c + ch) * plane;
                        let gd = &g.data()[base..base + plane];
                        let rw = &raw.data()[base..base + plane];
                        let sr = &src.data()[base..base + plane];
                        let gr = &mut graw.data_mut()[base..base + plane];
                        let gs = &mut gsrc.data_mut()[base..base + plane];
                        for j in 0..plane {
                            gr[j] += gd[j] * m[j];
                            gs[j] += gd[j] * (1.0 - m[j]);
                            gm[j] += gd[j] * (rw[j] - sr[j]);
                        }
                    }
                }
                Self::accumulate(adjoint, ins[0], graw);
                Self::accumulate(adjoint, ins[1], gsrc);
                Self::accumulate(adjoint, ins[2], gmask);
            }
            Op::Clamp01 => {
                let x = ev.value(ins[0]);
                let mut gx = g.clone();
                for (gv, &xv) in gx.data_mut().iter_mut().zip(x.data()) {
                    if !(0.0..=1.0).contains(&xv) {
                        *gv = 0.0;
                    }
                }
                Self::accumulate(adjoint, ins[0], gx);
            }
        }
        Ok(())
    }
}
