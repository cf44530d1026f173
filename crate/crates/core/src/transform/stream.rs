use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::{Layer, Network, Port};
use crate::tensor::Scalar;

/// A weighted layer reading a channel stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamConsumer {
    pub node: usize,
    /// Spatial copies of each channel in the consumer's input: 1 unless a
    /// flatten sits in between.
    pub positions: usize,
}

/// Everything tied to one set of output channels.
///
/// Starting from a producer, the stream follows batch norms, activations,
/// pooling and flattening forward to the weighted layers that read it.
/// Additions pull in the other summands, so every producer of a residual
/// stage ends up in the same stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelStream {
    pub producers: Vec<usize>,
    pub batchnorms: Vec<usize>,
    pub consumers: Vec<StreamConsumer>,
}

struct Walk<'a, T> {
    net: &'a Network<T>,
    /// Stream nodes and the spatial multiplicity of their outputs.
    visited: BTreeMap<usize, usize>,
    queue: Vec<usize>,
    producers: Vec<usize>,
    batchnorms: Vec<usize>,
    consumers: Vec<StreamConsumer>,
}

impl<T: Scalar> Walk<'_, T> {
    fn name(&self, i: usize) -> &str {
        &self.net.nodes()[i].name
    }

    fn enter(&mut self, i: usize, positions: usize) {
        if self.visited.insert(i, positions).is_none() {
            self.queue.push(i);
        }
    }

    fn forward(&mut self, j: usize) -> Result<()> {
        let positions = self.visited[&j];
        for c in self.net.consumers(Port::Node(j)) {
            let layer = &self.net.nodes()[c].layer;
            if layer.is_weighted() {
                if layer.is_conv() && positions != 1 {
                    return Err(Error::plan(format!(
                        "convolution '{}' reads flattened channels",
                        self.name(c)
                    )));
                }
                if !self.consumers.iter().any(|s| s.node == c) {
                    self.consumers.push(StreamConsumer { node: c, positions });
                }
                continue;
            }
            match layer {
                Layer::Flatten => {
                    if positions != 1 {
                        return Err(Error::plan(format!("flatten '{}' applied twice", self.name(c))));
                    }
                    let shape = self.net.output_shape(j);
                    let spatial = shape[..shape.len() - 1].iter().product();
                    self.enter(c, spatial);
                }
                Layer::BatchNorm(_) | Layer::MaxPool2 | Layer::GlobalAvgPool | Layer::Add if positions != 1 => {
                    return Err(Error::plan(format!(
                        "layer '{}' after a flatten cannot be followed channel-wise",
                        self.name(c)
                    )));
                }
                Layer::BatchNorm(_) => {
                    if !self.batchnorms.contains(&c) {
                        self.batchnorms.push(c);
                    }
                    self.enter(c, 1);
                }
                Layer::Add => {
                    self.enter(c, 1);
                    for p in self.net.nodes()[c].inputs.clone() {
                        self.backward(p)?;
                    }
                }
                _ => self.enter(c, positions),
            }
        }
        Ok(())
    }

    fn backward(&mut self, port: Port) -> Result<()> {
        let Port::Node(k) = port else {
            return Err(Error::plan("a summed channel stream reaches the network input and cannot be pruned"));
        };
        if self.visited.contains_key(&k) {
            return Ok(());
        }
        let node = &self.net.nodes()[k];
        if node.layer.is_weighted() {
            self.producers.push(k);
            self.enter(k, 1);
            return Ok(());
        }
        match &node.layer {
            Layer::BatchNorm(_) => self.batchnorms.push(k),
            Layer::Activation(_) | Layer::MaxPool2 | Layer::Add => {}
            other => {
                return Err(Error::plan(format!(
                    "cannot trace channels back through {} layer '{}'",
                    other.kind(),
                    node.name
                )))
            }
        }
        self.enter(k, 1);
        for p in node.inputs.clone() {
            self.backward(p)?;
        }
        Ok(())
    }
}

/// Channel stream produced by the weighted layer at node `producer`.
pub fn channel_stream<T: Scalar>(net: &Network<T>, producer: usize) -> Result<ChannelStream> {
    let node = net
        .nodes()
        .get(producer)
        .ok_or_else(|| Error::plan(format!("node {producer} does not exist")))?;
    if !node.layer.is_weighted() {
        return Err(Error::plan(format!("layer '{}' has no outputs to prune", node.name)));
    }
    let mut walk = Walk {
        net,
        visited: BTreeMap::new(),
        queue: Vec::new(),
        producers: vec![producer],
        batchnorms: Vec::new(),
        consumers: Vec::new(),
    };
    walk.enter(producer, 1);
    while let Some(j) = walk.queue.pop() {
        walk.forward(j)?;
    }
    let mut s = ChannelStream {
        producers: walk.producers,
        batchnorms: walk.batchnorms,
        consumers: walk.consumers,
    };
    s.producers.sort_unstable();
    s.batchnorms.sort_unstable();
    s.consumers.sort_by_key(|c| c.node);
    Ok(s)
}
