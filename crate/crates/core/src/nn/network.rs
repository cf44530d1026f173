use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::layer::{Activation, Layer, PaddingMode};
use crate::error::{Error, Result};
use crate::tensor::{col2im, gemm, gemm_tn, gemm_tn_acc, im2col, transpose_into, ConvGeometry, Scalar, Tensor};

/// Where a node reads from: the network input or an earlier node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Port {
    Input,
    Node(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node<T> {
    pub name: String,
    pub layer: Layer<T>,
    pub inputs: Vec<Port>,
}

/// Conv layers of one ResNet stage whose outputs are summed into a shared
/// stream. Output pruning must keep the same filters in all of them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResidualGroup {
    pub stage: usize,
    /// Every producer of the summed stream, including the projection.
    pub members: Vec<String>,
    pub projection: Option<String>,
}

/// A directed acyclic graph of layers in topological order. The last node is
/// the classifier; its softmax (if any) is folded into the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    input_shape: Vec<usize>,
    nodes: Vec<Node<T>>,
    residual_groups: Vec<ResidualGroup>,
    shapes: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch normalization.
    Train,
    /// Moving statistics in batch normalization.
    Eval,
}

#[derive(Debug, Clone)]
enum Aux<T> {
    None,
    Argmax(Vec<u32>),
    BatchNorm { xhat: Vec<T>, inv_std: Vec<T>, mean: Vec<T>, var: Vec<T> },
    Projected(Vec<T>),
}

/// Everything a backward pass needs from the matching forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<T> {
    mode: Mode,
    batch: usize,
    input: Tensor<T>,
    outputs: Vec<Tensor<T>>,
    aux: Vec<Aux<T>>,
}

impl<T: Scalar> ForwardCache<T> {
    /// Classifier output before any softmax, `N×classes`.
    pub fn logits(&self) -> &Tensor<T> {
        self.outputs.last().expect("network has nodes")
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Output of node `idx` for the whole batch.
    pub fn output(&self, idx: usize) -> &Tensor<T> {
        &self.outputs[idx]
    }

    pub fn port(&self, port: Port) -> &Tensor<T> {
        match port {
            Port::Input => &self.input,
            Port::Node(i) => &self.outputs[i],
        }
    }
}

/// Parameter gradients, one list per node in `Layer::params` order.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub per_node: Vec<Vec<Tensor<T>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub total: usize,
}

fn batched(batch: usize, per_sample: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(per_sample.len() + 1);
    s.push(batch);
    s.extend_from_slice(per_sample);
    s
}

impl<T: Scalar> Network<T> {
    /// Validates node wiring, names, shapes and residual groups.
    pub fn new(input_shape: Vec<usize>, nodes: Vec<Node<T>>, residual_groups: Vec<ResidualGroup>) -> Result<Self> {
        if input_shape.is_empty() || input_shape.contains(&0) {
            return Err(Error::shape(format!("invalid input shape {input_shape:?}")));
        }
        let last = nodes.last().ok_or_else(|| Error::shape("network has no layers"))?;
        match &last.layer {
            Layer::Dense(d) if matches!(d.activation, Activation::Softmax | Activation::None) => {}
            Layer::PcaDense(d) if matches!(d.activation, Activation::Softmax | Activation::None) => {}
            _ => {
                return Err(Error::shape(format!(
                    "final layer '{}' must be a dense classifier with softmax or no activation",
                    last.name
                )))
            }
        }
        let mut names = HashMap::new();
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            if names.insert(node.name.clone(), i).is_some() {
                return Err(Error::shape(format!("duplicate layer name '{}'", node.name)));
            }
            if node.inputs.is_empty() {
                return Err(Error::shape(format!("layer '{}' has no inputs", node.name)));
            }
            let mut ins: Vec<&[usize]> = Vec::with_capacity(node.inputs.len());
            for p in &node.inputs {
                match *p {
                    Port::Input => ins.push(&input_shape),
                    Port::Node(j) if j < i => ins.push(&shapes[j]),
                    Port::Node(j) => {
                        return Err(Error::shape(format!(
                            "layer '{}' reads from node {j}, which does not precede it",
                            node.name
                        )))
                    }
                }
            }
            let out = node
                .layer
                .output_shape(&ins)
                .map_err(|e| Error::shape(format!("layer '{}': {}", node.name, strip_prefix(&e))))?;
            shapes.push(out);
        }
        for g in &residual_groups {
            for m in g.members.iter().chain(g.projection.iter()) {
                let idx = names
                    .get(m)
                    .ok_or_else(|| Error::shape(format!("residual group refers to unknown layer '{m}'")))?;
                if !nodes[*idx].layer.is_conv() {
                    return Err(Error::shape(format!("residual group member '{m}' is not a convolution")));
                }
            }
            if let Some(p) = &g.projection {
                if !g.members.contains(p) {
                    return Err(Error::shape(format!("projection '{p}' must also be a group member")));
                }
            }
        }
        Ok(Self {
            input_shape,
            nodes,
            residual_groups,
            shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn nodes(&self) -> &[Node<T>] {
        &self.nodes
    }

    pub fn residual_groups(&self) -> &[ResidualGroup] {
        &self.residual_groups
    }

    pub fn classes(&self) -> usize {
        self.shapes.last().expect("non-empty")[0]
    }

    /// Per-sample output shape of node `idx`.
    pub fn output_shape(&self, idx: usize) -> &[usize] {
        &self.shapes[idx]
    }

    pub fn port_shape(&self, port: Port) -> &[usize] {
        match port {
            Port::Input => &self.input_shape,
            Port::Node(i) => &self.shapes[i],
        }
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// Like [`Network::index_of`] but the error lists the valid names.
    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name).ok_or_else(|| {
            let names: Vec<&str> = self.nodes.iter().map(|n| n.name.as_str()).collect();
            Error::config(format!("unknown layer '{name}'; available: {}", names.join(", ")))
        })
    }

    pub fn layer(&self, name: &str) -> Option<&Layer<T>> {
        self.index_of(name).map(|i| &self.nodes[i].layer)
    }

    /// Names of weight-bearing layers in order.
    pub fn weighted_layers(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter(|n| n.layer.is_weighted())
            .map(|n| n.name.as_str())
            .collect()
    }

    /// Nodes that read the output of `port`.
    pub fn consumers(&self, port: Port) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.inputs.contains(&port))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn group_of(&self, name: &str) -> Option<&ResidualGroup> {
        self.residual_groups.iter().find(|g| g.members.iter().any(|m| m == name))
    }

    /// Replaces layers in place and re-validates the whole graph.
    pub fn with_layers(&self, replacements: Vec<(usize, Layer<T>)>) -> Result<Self> {
        let mut nodes = self.nodes.clone();
        for (i, layer) in replacements {
            nodes[i].layer = layer;
        }
        Network::new(self.input_shape.clone(), nodes, self.residual_groups.clone())
    }

    /// Mutable access for in-place parameter edits. Anything that changes a
    /// tensor shape or the wiring should go through [`Network::with_layers`]
    /// or [`Network::new`] instead.
    pub fn nodes_mut(&mut self) -> &mut [Node<T>] {
        &mut self.nodes
    }

    pub fn count_params(&self) -> ParamCount {
        let mut c = ParamCount { trainable: 0, total: 0 };
        for n in &self.nodes {
            for (_, role, t) in n.layer.tensors() {
                match role {
                    super::TensorRole::Trainable => {
                        c.trainable += t.numel();
                        c.total += t.numel();
                    }
                    super::TensorRole::Frozen => c.total += t.numel(),
                    super::TensorRole::Derived => {}
                }
            }
        }
        c
    }

    /// Converts every tensor to another precision.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let nodes = self
            .nodes
            .iter()
            .map(|n| Node {
                name: n.name.clone(),
                layer: cast_layer(&n.layer),
                inputs: n.inputs.clone(),
            })
            .collect();
        Network {
            input_shape: self.input_shape.clone(),
            nodes,
            residual_groups: self.residual_groups.clone(),
            shapes: self.shapes.clone(),
        }
    }

    fn check_batch(&self, x: &Tensor<T>) -> Result<usize> {
        let s = x.shape();
        if s.len() != self.input_shape.len() + 1 || s[1..] != self.input_shape[..] {
            return Err(Error::shape(format!(
                "batch shape {s:?} does not match network input N×{:?}",
                self.input_shape
            )));
        }
        Ok(s[0])
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<ForwardCache<T>> {
        self.forward_until(x, mode, self.nodes.len())
    }

    /// Evaluates nodes `0..upto` only.
    pub(crate) fn forward_until(&self, x: &Tensor<T>, mode: Mode, upto: usize) -> Result<ForwardCache<T>> {
        let batch = self.check_batch(x)?;
        let mut cache = ForwardCache {
            mode,
            batch,
            input: x.clone(),
            outputs: Vec::with_capacity(upto),
            aux: Vec::with_capacity(upto),
        };
        let last = self.nodes.len() - 1;
        for (i, node) in self.nodes[..upto].iter().enumerate() {
            let (out, aux) = self
                .forward_node(i, node, &cache, mode, i == last)
                .map_err(|e| Error::shape(format!("layer '{}': {}", node.name, strip_prefix(&e))))?;
            cache.outputs.push(out);
            cache.aux.push(aux);
        }
        Ok(cache)
    }

    fn forward_node(
        &self,
        i: usize,
        node: &Node<T>,
        cache: &ForwardCache<T>,
        mode: Mode,
        is_last: bool,
    ) -> Result<(Tensor<T>, Aux<T>)> {
        let batch = cache.batch;
        let in_port = node.inputs[0];
        let x = cache.port(in_port);
        let in_shape = self.port_shape(in_port);
        let out_shape = batched(batch, &self.shapes[i]);
        let act = |a: Activation| if is_last { Activation::None } else { a };
        match &node.layer {
            Layer::Dense(d) => {
                let (m, n) = d.weight.dims2()?;
                let mut out = vec![T::zero(); batch * n];
                gemm(x.data(), d.weight.data(), &mut out, batch, m, n);
                add_bias(&mut out, d.bias.data());
                activate(&mut out, n, act(d.activation));
                Ok((Tensor::new(out_shape, out)?, Aux::None))
            }
            Layer::PcaDense(p) => {
                let (m, me) = p.basis.dims2()?;
                let n = p.weight.shape()[1];
                let z = project_rows(x.data(), p.mean.data(), p.basis.data(), batch, m, me);
                let mut out = vec![T::zero(); batch * n];
                gemm(&z, p.weight.data(), &mut out, batch, me, n);
                add_bias(&mut out, p.bias.data());
                activate(&mut out, n, act(p.activation));
                Ok((Tensor::new(out_shape, out)?, Aux::Projected(z)))
            }
            Layer::Conv2D(c) => {
                let geo = conv_geo(batch, in_shape, c.kernel.shape(), c.stride, c.padding)?;
                let n = c.kernel.shape()[3];
                let mut out = conv_forward(x.data(), &geo, None, c.kernel.data(), n)?;
                if let Some(b) = &c.bias {
                    add_bias(&mut out, b.data());
                }
                activate(&mut out, n, act(c.activation));
                Ok((Tensor::new(out_shape, out)?, Aux::None))
            }
            Layer::PcaConv2D(p) => {
                let (m, me) = p.basis.dims2()?;
                let pixels = x.numel() / m;
                let z = project_rows(x.data(), p.mean.data(), p.basis.data(), pixels, m, me);
                let zshape = [in_shape[0], in_shape[1], me];
                let geo = conv_geo(batch, &zshape, p.kernel.shape(), p.stride, p.padding)?;
                let n = p.kernel.shape()[3];
                let mut out = conv_forward(&z, &geo, Some(p.pad_values.data()), p.kernel.data(), n)?;
                add_bias(&mut out, p.bias.data());
                activate(&mut out, n, act(p.activation));
                Ok((Tensor::new(out_shape, out)?, Aux::Projected(z)))
            }
            Layer::MaxPool2 => {
                let (h, w, m) = (in_shape[0], in_shape[1], in_shape[2]);
                let (out, arg) = crate::tensor::maxpool2_batch(x.data(), (batch, h, w, m));
                Ok((Tensor::new(out_shape, out)?, Aux::Argmax(arg)))
            }
            Layer::GlobalAvgPool => {
                let (h, w, m) = (in_shape[0], in_shape[1], in_shape[2]);
                let out = crate::tensor::global_avg_pool_batch(x.data(), (batch, h, w, m));
                Ok((Tensor::new(out_shape, out)?, Aux::None))
            }
            Layer::Flatten => Ok((Tensor::new(out_shape, x.data().to_vec())?, Aux::None)),
            Layer::Activation(a) => {
                let mut out = x.data().to_vec();
                let width = *in_shape.last().unwrap();
                activate(&mut out, width, act(*a));
                Ok((Tensor::new(out_shape, out)?, Aux::None))
            }
            Layer::Add => {
                let mut out = x.data().to_vec();
                for p in &node.inputs[1..] {
                    for (o, &v) in out.iter_mut().zip(cache.port(*p).data()) {
                        *o += v;
                    }
                }
                Ok((Tensor::new(out_shape, out)?, Aux::None))
            }
            Layer::BatchNorm(bn) => {
                let c = bn.channels();
                let rows = x.numel() / c;
                let eps = T::from_f64_lossy(bn.epsilon);
                let (mean, var) = match mode {
                    Mode::Train => channel_moments(x.data(), c),
                    Mode::Eval => (bn.moving_mean.data().to_vec(), bn.moving_var.data().to_vec()),
                };
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let mut xhat = vec![T::zero(); x.numel()];
                let mut out = vec![T::zero(); x.numel()];
                for r in 0..rows {
                    for ch in 0..c {
                        let k = r * c + ch;
                        let xh = (x.data()[k] - mean[ch]) * inv_std[ch];
                        xhat[k] = xh;
                        out[k] = bn.gamma.data()[ch] * xh + bn.beta.data()[ch];
                    }
                }
                let aux = match mode {
                    Mode::Train => Aux::BatchNorm { xhat, inv_std, mean, var },
                    Mode::Eval => Aux::BatchNorm {
                        xhat: Vec::new(),
                        inv_std,
                        mean,
                        var,
                    },
                };
                Ok((Tensor::new(out_shape, out)?, aux))
            }
        }
    }

    /// Reverse-mode pass from `dlogits` (gradient of the loss with respect to
    /// the pre-softmax classifier output).
    pub fn backward(&self, cache: &ForwardCache<T>, dlogits: &Tensor<T>) -> Result<Gradients<T>> {
        if cache.outputs.len() != self.nodes.len() {
            return Err(Error::shape("forward cache does not cover the whole network"));
        }
        if dlogits.shape() != cache.logits().shape() {
            return Err(Error::shape(format!(
                "logit gradient {:?} does not match logits {:?}",
                dlogits.shape(),
                cache.logits().shape()
            )));
        }
        let batch = cache.batch;
        let last = self.nodes.len() - 1;
        let mut dout: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        dout[last] = Some(dlogits.data().to_vec());
        let mut per_node: Vec<Vec<Tensor<T>>> = vec![Vec::new(); self.nodes.len()];

        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            let Some(mut g) = dout[i].take() else {
                per_node[i] = node.layer.params().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
                continue;
            };
            let in_port = node.inputs[0];
            let x = cache.port(in_port);
            let in_shape = self.port_shape(in_port);
            let need_dx = in_port != Port::Input;
            let out = cache.outputs[i].data();
            let act_of = |a: Activation| if i == last { Activation::None } else { a };
            let mut dx: Option<Vec<T>> = None;
            match &node.layer {
                Layer::Dense(d) => {
                    let (m, n) = d.weight.dims2()?;
                    activate_backward(&mut g, out, n, act_of(d.activation));
                    let (dw, db) = linear_param_grads(x.data(), &g, batch, m, n);
                    if need_dx {
                        dx = Some(matmul_bt(&g, d.weight.data(), batch, n, m));
                    }
                    per_node[i] = vec![Tensor::new(vec![m, n], dw)?, Tensor::new(vec![n], db)?];
                }
                Layer::PcaDense(p) => {
                    let (m, me) = p.basis.dims2()?;
                    let n = p.weight.shape()[1];
                    activate_backward(&mut g, out, n, act_of(p.activation));
                    let Aux::Projected(z) = &cache.aux[i] else { unreachable!() };
                    let (dw, db) = linear_param_grads(z, &g, batch, me, n);
                    if need_dx {
                        let dz = matmul_bt(&g, p.weight.data(), batch, n, me);
                        dx = Some(matmul_bt(&dz, p.basis.data(), batch, me, m));
                    }
                    per_node[i] = vec![Tensor::new(vec![me, n], dw)?, Tensor::new(vec![n], db)?];
                }
                Layer::Conv2D(c) => {
                    let geo = conv_geo(batch, in_shape, c.kernel.shape(), c.stride, c.padding)?;
                    let n = c.kernel.shape()[3];
                    activate_backward(&mut g, out, n, act_of(c.activation));
                    let (dk, d) = conv_backward(x.data(), &geo, None, c.kernel.data(), n, &g, need_dx)?;
                    let mut grads = vec![Tensor::new(c.kernel.shape().to_vec(), dk)?];
                    if c.bias.is_some() {
                        grads.push(Tensor::new(vec![n], bias_grad(&g, n))?);
                    }
                    per_node[i] = grads;
                    dx = d;
                }
                Layer::PcaConv2D(p) => {
                    let (m, me) = p.basis.dims2()?;
                    let zshape = [in_shape[0], in_shape[1], me];
                    let geo = conv_geo(batch, &zshape, p.kernel.shape(), p.stride, p.padding)?;
                    let n = p.kernel.shape()[3];
                    activate_backward(&mut g, out, n, act_of(p.activation));
                    let Aux::Projected(z) = &cache.aux[i] else { unreachable!() };
                    let (dk, dz) = conv_backward(z, &geo, Some(p.pad_values.data()), p.kernel.data(), n, &g, need_dx)?;
                    per_node[i] = vec![Tensor::new(p.kernel.shape().to_vec(), dk)?, Tensor::new(vec![n], bias_grad(&g, n))?];
                    if let Some(dz) = dz {
                        let pixels = z.len() / me;
                        dx = Some(matmul_bt(&dz, p.basis.data(), pixels, me, m));
                    }
                }
                Layer::MaxPool2 => {
                    if need_dx {
                        let Aux::Argmax(arg) = &cache.aux[i] else { unreachable!() };
                        let mut d = vec![T::zero(); x.numel()];
                        for (&a, &gv) in arg.iter().zip(&g) {
                            d[a as usize] += gv;
                        }
                        dx = Some(d);
                    }
                }
                Layer::GlobalAvgPool => {
                    if need_dx {
                        let (h, w, m) = (in_shape[0], in_shape[1], in_shape[2]);
                        let scale = T::from_usize(h * w).unwrap();
                        let mut d = vec![T::zero(); x.numel()];
                        for b in 0..batch {
                            for p in 0..h * w {
                                for c in 0..m {
                                    d[(b * h * w + p) * m + c] = g[b * m + c] / scale;
                                }
                            }
                        }
                        dx = Some(d);
                    }
                }
                Layer::Flatten => dx = Some(g),
                Layer::Activation(a) => {
                    let width = *in_shape.last().unwrap();
                    activate_backward(&mut g, out, width, act_of(*a));
                    dx = Some(g);
                }
                Layer::Add => {
                    for p in &node.inputs {
                        if let Port::Node(j) = *p {
                            accumulate(&mut dout[j], &g);
                        }
                    }
                }
                Layer::BatchNorm(bn) => {
                    let c = bn.channels();
                    let rows = x.numel() / c;
                    let Aux::BatchNorm { xhat, inv_std, .. } = &cache.aux[i] else { unreachable!() };
                    let gamma = bn.gamma.data();
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    match cache.mode {
                        Mode::Train => {
                            for r in 0..rows {
                                for ch in 0..c {
                                    let k = r * c + ch;
                                    dgamma[ch] += g[k] * xhat[k];
                                    dbeta[ch] += g[k];
                                }
                            }
                            if need_dx {
                                let mf = T::from_usize(rows).unwrap();
                                let mut d = vec![T::zero(); x.numel()];
                                for r in 0..rows {
                                    for ch in 0..c {
                                        let k = r * c + ch;
                                        d[k] = gamma[ch] * inv_std[ch] / mf
                                            * (mf * g[k] - dbeta[ch] - xhat[k] * dgamma[ch]);
                                    }
                                }
                                dx = Some(d);
                            }
                        }
                        Mode::Eval => {
                            let Aux::BatchNorm { mean, .. } = &cache.aux[i] else { unreachable!() };
                            for r in 0..rows {
                                for ch in 0..c {
                                    let k = r * c + ch;
                                    dgamma[ch] += g[k] * (x.data()[k] - mean[ch]) * inv_std[ch];
                                    dbeta[ch] += g[k];
                                }
                            }
                            if need_dx {
                                let mut d = g.clone();
                                for r in 0..rows {
                                    for ch in 0..c {
                                        d[r * c + ch] *= gamma[ch] * inv_std[ch];
                                    }
                                }
                                dx = Some(d);
                            }
                        }
                    }
                    per_node[i] = vec![Tensor::new(vec![c], dgamma)?, Tensor::new(vec![c], dbeta)?];
                }
            }
            for (t, (slot, _)) in per_node[i].iter().zip(node.layer.params()) {
                if !t.is_finite() {
                    return Err(Error::numerical(format!(
                        "non-finite gradient for '{}' {slot}",
                        node.name
                    )));
                }
            }
            if let (Some(d), Port::Node(j)) = (dx, in_port) {
                accumulate(&mut dout[j], &d);
            }
        }
        Ok(Gradients { per_node })
    }

    /// Folds the batch statistics of a training forward pass into the moving
    /// averages of every batch normalization layer.
    pub fn update_batchnorm_stats(&mut self, cache: &ForwardCache<T>) {
        if cache.mode != Mode::Train {
            return;
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if let (Layer::BatchNorm(bn), Some(Aux::BatchNorm { mean, var, .. })) = (&mut node.layer, cache.aux.get(i)) {
                let rows = cache.outputs[i].numel() / bn.channels();
                let bessel = if rows > 1 {
                    T::from_usize(rows).unwrap() / T::from_usize(rows - 1).unwrap()
                } else {
                    T::one()
                };
                let mom = T::from_f64_lossy(bn.momentum);
                let keep = T::one() - mom;
                for (mm, &bm) in bn.moving_mean.data_mut().iter_mut().zip(mean) {
                    *mm = *mm * mom + bm * keep;
                }
                for (mv, &bv) in bn.moving_var.data_mut().iter_mut().zip(var) {
                    *mv = *mv * mom + bv * bessel * keep;
                }
            }
        }
    }

    /// Applies softmax to the logits of a forward pass.
    pub fn predict_proba(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.forward(x, Mode::Eval)?;
        let mut p = cache.logits().clone();
        let n = self.classes();
        activate(p.data_mut(), n, Activation::Softmax);
        Ok(p)
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Shape(m) => m.clone(),
        other => other.to_string(),
    }
}

fn cast_layer<T: Scalar, U: Scalar>(l: &Layer<T>) -> Layer<U> {
    use super::layer::*;
    match l {
        Layer::Dense(d) => Layer::Dense(Dense {
            weight: d.weight.cast(),
            bias: d.bias.cast(),
            activation: d.activation,
        }),
        Layer::Conv2D(c) => Layer::Conv2D(Conv2D {
            kernel: c.kernel.cast(),
            bias: c.bias.as_ref().map(|b| b.cast()),
            stride: c.stride,
            padding: c.padding,
            activation: c.activation,
        }),
        Layer::MaxPool2 => Layer::MaxPool2,
        Layer::GlobalAvgPool => Layer::GlobalAvgPool,
        Layer::Flatten => Layer::Flatten,
        Layer::BatchNorm(b) => Layer::BatchNorm(BatchNorm {
            gamma: b.gamma.cast(),
            beta: b.beta.cast(),
            moving_mean: b.moving_mean.cast(),
            moving_var: b.moving_var.cast(),
            momentum: b.momentum,
            epsilon: b.epsilon,
        }),
        Layer::Activation(a) => Layer::Activation(*a),
        Layer::Add => Layer::Add,
        Layer::PcaDense(p) => Layer::PcaDense(PcaDense {
            mean: p.mean.cast(),
            basis: p.basis.cast(),
            weight: p.weight.cast(),
            bias: p.bias.cast(),
            activation: p.activation,
        }),
        Layer::PcaConv2D(p) => Layer::PcaConv2D(PcaConv2D {
            mean: p.mean.cast(),
            basis: p.basis.cast(),
            kernel: p.kernel.cast(),
            bias: p.bias.cast(),
            stride: p.stride,
            padding: p.padding,
            pad_values: p.pad_values.cast(),
            activation: p.activation,
        }),
    }
}

fn conv_geo(batch: usize, in_shape: &[usize], kernel: &[usize], stride: usize, padding: PaddingMode) -> Result<ConvGeometry> {
    ConvGeometry::new(
        batch,
        (in_shape[0], in_shape[1], in_shape[2]),
        (kernel[0], kernel[1]),
        stride,
        padding == PaddingMode::Same,
    )
}

fn accumulate<T: Scalar>(slot: &mut Option<Vec<T>>, g: &[T]) {
    match slot {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &v)| *a += v),
        None => *slot = Some(g.to_vec()),
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_exact_mut(bias.len()) {
        for (o, &b) in row.iter_mut().zip(bias) {
            *o += b;
        }
    }
}

/// `(x − μ)·U` for `rows` row vectors of length `m`.
pub(crate) fn project_rows<T: Scalar>(x: &[T], mean: &[T], basis: &[T], rows: usize, m: usize, me: usize) -> Vec<T> {
    let mut centred = x.to_vec();
    for row in centred.chunks_exact_mut(m) {
        for (v, &mu) in row.iter_mut().zip(mean) {
            *v -= mu;
        }
    }
    let mut z = vec![T::zero(); rows * me];
    gemm(&centred, basis, &mut z, rows, m, me);
    z
}

/// `a·bᵀ` for `a: p×q` and `b: r×q`.
fn matmul_bt<T: Scalar>(a: &[T], b: &[T], p: usize, q: usize, r: usize) -> Vec<T> {
    let mut bt = vec![T::zero(); q * r];
    transpose_into(b, &mut bt, r, q);
    let mut out = vec![T::zero(); p * r];
    gemm(a, &bt, &mut out, p, q, r);
    out
}

/// Weight and bias gradients of `y = x·W + b`.
fn linear_param_grads<T: Scalar>(x: &[T], g: &[T], rows: usize, m: usize, n: usize) -> (Vec<T>, Vec<T>) {
    let mut dw = vec![T::zero(); m * n];
    gemm_tn(x, g, &mut dw, m, rows, n);
    (dw, bias_grad(g, n))
}

fn bias_grad<T: Scalar>(g: &[T], n: usize) -> Vec<T> {
    let mut db = vec![T::zero(); n];
    for row in g.chunks_exact(n) {
        for (d, &v) in db.iter_mut().zip(row) {
            *d += v;
        }
    }
    db
}

/// Unfolded elements per chunk of images in the convolution passes.
const CONV_CHUNK: usize = 1 << 18;

/// Chunks of whole images, each with its own geometry.
fn conv_chunks(geo: &ConvGeometry) -> Vec<(usize, ConvGeometry)> {
    let per_image = geo.out_h * geo.out_w * geo.patch_len();
    let step = (CONV_CHUNK / per_image.max(1)).clamp(1, geo.batch.max(1));
    let mut chunks = Vec::new();
    let mut b0 = 0;
    while b0 < geo.batch {
        let nb = step.min(geo.batch - b0);
        chunks.push((b0, ConvGeometry { batch: nb, ..*geo }));
        b0 += nb;
    }
    chunks
}

/// Convolution of the NHWC batch `x` with a `k1×k2×m×n` kernel, unfolded a
/// few images at a time.
fn conv_forward<T: Scalar>(x: &[T], geo: &ConvGeometry, pad: Option<&[T]>, kernel: &[T], n: usize) -> Result<Vec<T>> {
    let in_image = geo.h * geo.w * geo.channels;
    let out_image = geo.out_h * geo.out_w * n;
    let mut out = vec![T::zero(); geo.patches() * n];
    let mut col = Vec::new();
    for (b0, g) in conv_chunks(geo) {
        col.resize(g.patches() * g.patch_len(), T::zero());
        im2col(&x[b0 * in_image..(b0 + g.batch) * in_image], &g, pad, &mut col);
        gemm(&col, kernel, &mut out[b0 * out_image..(b0 + g.batch) * out_image], g.patches(), g.patch_len(), n);
    }
    Ok(out)
}

/// Kernel gradient and, if asked, input gradient of [`conv_forward`] given
/// the output gradient `g`.
#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    x: &[T],
    geo: &ConvGeometry,
    pad: Option<&[T]>,
    kernel: &[T],
    n: usize,
    g: &[T],
    need_dx: bool,
) -> Result<(Vec<T>, Option<Vec<T>>)> {
    let in_image = geo.h * geo.w * geo.channels;
    let out_image = geo.out_h * geo.out_w * n;
    let k = geo.patch_len();
    let mut dk = vec![T::zero(); k * n];
    let mut kt = vec![T::zero(); k * n];
    transpose_into(kernel, &mut kt, k, n);
    let mut dx = need_dx.then(|| vec![T::zero(); x.len()]);
    let (mut col, mut dcol) = (Vec::new(), Vec::new());
    for (b0, cg) in conv_chunks(geo) {
        let gs = &g[b0 * out_image..(b0 + cg.batch) * out_image];
        col.resize(cg.patches() * k, T::zero());
        im2col(&x[b0 * in_image..(b0 + cg.batch) * in_image], &cg, pad, &mut col);
        gemm_tn_acc(&col, gs, &mut dk, k, cg.patches(), n);
        if let Some(dx) = dx.as_mut() {
            dcol.resize(cg.patches() * k, T::zero());
            gemm(gs, &kt, &mut dcol, cg.patches(), n, k);
            col2im(&dcol, &cg, &mut dx[b0 * in_image..(b0 + cg.batch) * in_image]);
        }
    }
    Ok((dk, dx))
}

/// Per-channel mean and biased variance over all leading positions.
fn channel_moments<T: Scalar>(x: &[T], c: usize) -> (Vec<T>, Vec<T>) {
    let rows = x.len() / c;
    let nf = T::from_usize(rows).unwrap();
    let mut mean = vec![T::zero(); c];
    for row in x.chunks_exact(c) {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= nf);
    let mut var = vec![T::zero(); c];
    for row in x.chunks_exact(c) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    var.iter_mut().for_each(|s| *s /= nf);
    (mean, var)
}

pub(crate) fn activate<T: Scalar>(v: &mut [T], width: usize, a: Activation) {
    match a {
        Activation::None => {}
        Activation::Relu => v.iter_mut().for_each(|x| {
            if *x < T::zero() {
                *x = T::zero()
            }
        }),
        Activation::Sigmoid => v.iter_mut().for_each(|x| *x = T::one() / (T::one() + (-*x).exp())),
        Activation::Softmax => {
            for row in v.chunks_exact_mut(width) {
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x;
                }
                row.iter_mut().for_each(|x| *x /= sum);
            }
        }
    }
}

/// Turns an output gradient into a pre-activation gradient in place.
fn activate_backward<T: Scalar>(g: &mut [T], out: &[T], width: usize, a: Activation) {
    match a {
        Activation::None => {}
        Activation::Relu => g.iter_mut().zip(out).for_each(|(d, &y)| {
            if y <= T::zero() {
                *d = T::zero()
            }
        }),
        Activation::Sigmoid => g.iter_mut().zip(out).for_each(|(d, &y)| *d *= y * (T::one() - y)),
        Activation::Softmax => {
            for (grow, yrow) in g.chunks_exact_mut(width).zip(out.chunks_exact(width)) {
                let dot: T = grow.iter().zip(yrow).map(|(&d, &y)| d * y).sum();
                grow.iter_mut().zip(yrow).for_each(|(d, &y)| *d = y * (*d - dot));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_convolution_matches_one_unfold() {
        // 16×16 images with 3×3×32 patches split into chunks of 3 images.
        let geo = ConvGeometry::new(7, (16, 16, 32), (3, 3), 1, true).unwrap();
        assert!(conv_chunks(&geo).len() > 2);
        let n = 5;
        let x: Vec<f32> = (0..7 * 16 * 16 * 32).map(|i| ((i * 7919) % 211) as f32 / 50.0 - 2.0).collect();
        let kernel: Vec<f32> = (0..geo.patch_len() * n).map(|i| ((i * 104729) % 97) as f32 / 40.0 - 1.2).collect();
        let pad: Vec<f32> = (0..32).map(|c| c as f32 * 0.01).collect();

        let mut col = vec![0.0; geo.patches() * geo.patch_len()];
        im2col(&x, &geo, Some(&pad), &mut col);
        let mut want = vec![0.0; geo.patches() * n];
        gemm(&col, &kernel, &mut want, geo.patches(), geo.patch_len(), n);
        let got = conv_forward(&x, &geo, Some(&pad), &kernel, n).unwrap();
        assert!(want.iter().zip(&got).all(|(a, b)| a.to_bits() == b.to_bits()));

        let g: Vec<f32> = want.iter().map(|v| v.sin()).collect();
        let mut colt = vec![0.0; col.len()];
        transpose_into(&col, &mut colt, geo.patches(), geo.patch_len());
        let mut dk_want = vec![0.0; geo.patch_len() * n];
        gemm(&colt, &g, &mut dk_want, geo.patch_len(), geo.patches(), n);
        let dcol = matmul_bt(&g, &kernel, geo.patches(), n, geo.patch_len());
        let mut dx_want = vec![0.0; x.len()];
        col2im(&dcol, &geo, &mut dx_want);
        let (dk, dx) = conv_backward(&x, &geo, Some(&pad), &kernel, n, &g, true).unwrap();
        assert!(dk_want.iter().zip(&dk).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(dx_want.iter().zip(&dx.unwrap()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
