use std::collections::{BTreeMap, BTreeSet};

use log::{info, warn};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ops::{average_scores, prune_basis, prune_inputs, select_by_scores, to_pca_conv, to_pca_dense, OutputSelection};
use super::plan::{InputConfig, OutputConfig, TransformPlan};
use super::stream::{channel_stream, ChannelStream};
use crate::error::{Error, Result};
use crate::nn::{Layer, Mode, Network, Node, Port};
use crate::pca::{fit_pca, truncate, PcaBasis, CONV_SAMPLE_CAP, DENSE_SAMPLE_BUDGET};
use crate::tensor::{Scalar, Tensor, EIGEN_MAX_DIM};

/// Input width of a plain dense layer or channel depth of a convolution.
fn input_dim<T: Scalar>(layer: &Layer<T>) -> Option<usize> {
    match layer {
        Layer::Dense(d) => Some(d.weight.shape()[0]),
        Layer::Conv2D(c) => Some(c.kernel.shape()[2]),
        _ => None,
    }
}

fn output_dim<T: Scalar>(layer: &Layer<T>) -> Option<usize> {
    match layer {
        Layer::Dense(d) => Some(d.weight.shape()[1]),
        Layer::Conv2D(c) => Some(c.kernel.shape()[3]),
        _ => None,
    }
}

/// Output-transformed streams of a plan, keyed by their lowest producer.
fn plan_streams<T: Scalar>(net: &Network<T>, plan: &TransformPlan) -> Result<Vec<ChannelStream>> {
    let mut done = BTreeSet::new();
    let mut streams = Vec::new();
    for name in plan.output_set() {
        let idx = net.require(name)?;
        if done.contains(&idx) {
            continue;
        }
        let s = channel_stream(net, idx)?;
        done.extend(s.producers.iter().copied());
        streams.push(s);
    }
    streams.sort_by_key(|s| s.producers[0]);
    Ok(streams)
}

/// Checks a plan against a network.
///
/// Every named layer must be a plain dense or convolutional layer; counts
/// must fit the layer; the final classifier keeps all its outputs; layers
/// whose outputs are summed must be pruned together with one configuration;
/// and every layer reading a pruned stream must be input-transformed.
pub fn validate_plan<T: Scalar>(net: &Network<T>, plan: &TransformPlan) -> Result<()> {
    let last = net.nodes().len() - 1;
    for (name, cfg) in &plan.layers {
        let idx = net.require(name)?;
        let layer = &net.nodes()[idx].layer;
        let (Some(m), Some(n)) = (input_dim(layer), output_dim(layer)) else {
            return Err(Error::plan(format!(
                "layer '{name}' is a {} layer; only dense and conv2d layers can be transformed",
                layer.kind()
            )));
        };
        match cfg.input {
            Some(InputConfig::Dims(k)) if k == 0 || k > m => {
                return Err(Error::plan(format!("layer '{name}': input dimension {k} outside [1, {m}]")));
            }
            Some(InputConfig::Threshold { threshold }) if !(threshold >= 0.0) => {
                return Err(Error::plan(format!("layer '{name}': negative variance threshold {threshold}")));
            }
            _ => {}
        }
        match cfg.output {
            Some(_) if idx == last => {
                return Err(Error::plan(format!("layer '{name}' is the final classifier; its outputs cannot be pruned")));
            }
            Some(OutputConfig::Keep(k)) if k == 0 || k > n => {
                return Err(Error::plan(format!("layer '{name}': keep count {k} outside [1, {n}]")));
            }
            Some(OutputConfig::Threshold { threshold }) if !(threshold >= 0.0) => {
                return Err(Error::plan(format!("layer '{name}': negative output threshold {threshold}")));
            }
            _ => {}
        }
    }
    for s in plan_streams(net, plan)? {
        let names: Vec<&str> = s.producers.iter().map(|&p| net.nodes()[p].name.as_str()).collect();
        let cfg = plan.output_config(names[0]);
        for &other in &names[1..] {
            match plan.output_config(other) {
                None => {
                    return Err(Error::plan(format!(
                        "residual group partial membership: '{}' is in O but '{other}', whose output is summed with it, is not",
                        names[0]
                    )))
                }
                c if c != cfg => {
                    return Err(Error::plan(format!(
                        "layers summed together need one output configuration, but '{}' and '{other}' differ",
                        names[0]
                    )))
                }
                _ => {}
            }
        }
        if s.consumers.is_empty() {
            return Err(Error::plan(format!("layer '{}' is in O but no weighted layer reads its output", names[0])));
        }
        for c in &s.consumers {
            let cname = &net.nodes()[c.node].name;
            if plan.input_config(cname).is_none() {
                return Err(Error::plan(format!(
                    "layer '{}' is in O but its consumer '{cname}' is not in I (if i is in O then i+1 must be in I)",
                    names[0]
                )));
            }
        }
    }
    Ok(())
}

/// How activations are sampled for fitting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    /// Images passed through the network (dense layers see one vector each).
    pub dense_budget: usize,
    /// Pixel vectors kept per convolution layer.
    pub conv_cap: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            dense_budget: DENSE_SAMPLE_BUDGET,
            conv_cap: CONV_SAMPLE_CAP,
            batch_size: 250,
            seed: 0,
        }
    }
}

/// Fits and truncates the PCA basis of every layer in I.
///
/// `samples` is a batch of network inputs; at most `dense_budget` of them
/// are used. Convolution inputs are subsampled pixel-wise to `conv_cap`
/// vectors, spread evenly over the batches. Dense inputs wider than the
/// eigensolver limit are fitted on at most that many vectors. Layers reading
/// the same node share one fit.
pub fn fit_plan_bases<T: Scalar>(
    net: &Network<T>,
    plan: &TransformPlan,
    samples: &Tensor<T>,
    opts: &FitOptions,
) -> Result<BTreeMap<String, PcaBasis>> {
    validate_plan(net, plan)?;
    let total = samples.shape().first().copied().unwrap_or(0).min(opts.dense_budget);
    if total < 2 {
        return Err(Error::dataset(format!("{total} samples available for PCA; at least 2 are needed")));
    }
    if opts.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }

    let mut ports: BTreeMap<Port, Vec<String>> = BTreeMap::new();
    for name in plan.input_set() {
        let idx = net.require(name)?;
        ports.entry(net.nodes()[idx].inputs[0]).or_default().push(name.to_string());
    }
    let upto = ports
        .keys()
        .filter_map(|p| match p {
            Port::Node(i) => Some(i + 1),
            Port::Input => None,
        })
        .max()
        .unwrap_or(0);

    let mut rows: BTreeMap<Port, Vec<T>> = BTreeMap::new();
    let mut start = 0;
    while start < total {
        let end = (start + opts.batch_size).min(total);
        let idx: Vec<usize> = (start..end).collect();
        let batch = samples.select_rows(&idx)?;
        let cache = net.forward_until(&batch, Mode::Eval, upto)?;
        for (&port, names) in &ports {
            let t = cache.port(port);
            let width = *t.shape().last().unwrap();
            let per_image = t.numel() / (end - start) / width;
            let acc = rows.entry(port).or_default();
            if t.rank() == 4 {
                let quota = opts.conv_cap * end / total - opts.conv_cap * start / total;
                let pixels = per_image * (end - start);
                if quota >= pixels {
                    acc.extend_from_slice(t.data());
                } else {
                    let seed = opts.seed ^ (start as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ port_salt(port);
                    let mut pick = sample(&mut ChaCha8Rng::seed_from_u64(seed), pixels, quota).into_vec();
                    pick.sort_unstable();
                    for p in pick {
                        acc.extend_from_slice(&t.data()[p * width..(p + 1) * width]);
                    }
                }
            } else {
                let limit = if width > EIGEN_MAX_DIM { EIGEN_MAX_DIM } else { usize::MAX };
                let have = acc.len() / width;
                let take = (end - start).min(limit.saturating_sub(have));
                if take < end - start && have + take == limit {
                    info!("layer '{}': {width}-wide inputs fitted on {limit} samples", names[0]);
                }
                acc.extend_from_slice(&t.data()[..take * width]);
            }
        }
        start = end;
    }

    let mut out = BTreeMap::new();
    for (port, names) in ports {
        let data = rows.remove(&port).unwrap_or_default();
        let width = *net.port_shape(port).last().unwrap();
        let x = Tensor::new(vec![data.len() / width, width], data)?;
        let basis = fit_pca(&x)?;
        for name in names {
            let cfg = plan.input_config(&name).expect("layer is in I");
            let b = truncate(&basis, cfg.into()).map_err(|e| Error::plan(format!("layer '{name}': {e}")))?;
            info!("layer '{name}': {} of {} input directions kept", b.retained.unwrap_or(0), b.dim());
            out.insert(name, b);
        }
    }
    Ok(out)
}

fn port_salt(port: Port) -> u64 {
    match port {
        Port::Input => 0x5151,
        Port::Node(i) => (i as u64 + 1).wrapping_mul(0xD1B5_4A32_D192_ED03),
    }
}

/// A transformed network and what changed.
#[derive(Debug, Clone)]
pub struct Transformed<T> {
    pub network: Network<T>,
    /// Layers whose parameters were replaced or resized.
    pub changed: Vec<String>,
    /// Kept outputs per pruned stream, keyed by every producer's name.
    pub selections: BTreeMap<String, OutputSelection>,
    /// Bases used by the input transforms, after output pruning.
    pub bases: BTreeMap<String, PcaBasis>,
}

impl<T> Transformed<T> {
    /// `m_e` per input-transformed layer.
    pub fn effective_dims(&self) -> BTreeMap<String, usize> {
        self.bases
            .iter()
            .map(|(k, b)| (k.clone(), b.retained.unwrap_or(0)))
            .collect()
    }
}

/// Fits the bases on `samples` and applies the plan.
pub fn apply_plan<T: Scalar>(
    net: &Network<T>,
    plan: &TransformPlan,
    samples: &Tensor<T>,
    opts: &FitOptions,
) -> Result<Transformed<T>> {
    let bases = fit_plan_bases(net, plan, samples, opts)?;
    apply_plan_with_bases(net, plan, &bases)
}

/// Applies a plan with already fitted, truncated bases.
///
/// Output transforms run first: for each pruned stream the kept channels
/// are chosen from the consumers' bases (averaged over distinct inputs),
/// then producers, batch norms, consumer weights and consumer bases are cut.
/// Every layer in I is then rewritten in its (possibly pruned) basis.
pub fn apply_plan_with_bases<T: Scalar>(
    net: &Network<T>,
    plan: &TransformPlan,
    bases: &BTreeMap<String, PcaBasis>,
) -> Result<Transformed<T>> {
    validate_plan(net, plan)?;
    let mut bases_by_node: BTreeMap<usize, PcaBasis> = BTreeMap::new();
    for name in plan.input_set() {
        let idx = net.require(name)?;
        let b = bases
            .get(name)
            .ok_or_else(|| Error::plan(format!("no PCA basis for layer '{name}'")))?;
        let m = input_dim(&net.nodes()[idx].layer).expect("validated");
        if b.dim() != m {
            return Err(Error::shape(format!("layer '{name}': basis dimension {} but {m} inputs", b.dim())));
        }
        if b.retained.is_none() {
            return Err(Error::plan(format!("basis for layer '{name}' has not been truncated")));
        }
        bases_by_node.insert(idx, b.clone());
    }

    let mut nodes: Vec<Node<T>> = net.nodes().to_vec();
    let mut changed = BTreeSet::new();
    let mut selections = BTreeMap::new();
    for s in plan_streams(net, plan)? {
        let cfg = plan
            .output_config(&net.nodes()[s.producers[0]].name)
            .expect("validated");
        let mut distinct: Vec<(Port, usize, Tensor<f64>, usize)> = Vec::new();
        for c in &s.consumers {
            let b = &bases_by_node[&c.node];
            let port = net.nodes()[c.node].inputs[0];
            let me = b.retained.expect("checked");
            if !distinct.iter().any(|(p, k, _, _)| *p == port && *k == me) {
                distinct.push((port, me, b.u()?, c.positions));
            }
        }
        let scored: Vec<(&Tensor<f64>, usize)> = distinct.iter().map(|(_, _, u, p)| (u, *p)).collect();
        let sel = select_by_scores(&average_scores(&scored)?, cfg)?;

        for &p in &s.producers {
            match &mut nodes[p].layer {
                Layer::Dense(d) => {
                    d.weight = d.weight.select_last(&sel.indices)?;
                    d.bias = d.bias.select_last(&sel.indices)?;
                }
                Layer::Conv2D(c) => {
                    c.kernel = c.kernel.select_last(&sel.indices)?;
                    c.bias = c.bias.as_ref().map(|b| b.select_last(&sel.indices)).transpose()?;
                }
                other => unreachable!("producer of kind {}", other.kind()),
            }
            changed.insert(p);
            selections.insert(nodes[p].name.clone(), sel.clone());
        }
        for &b in &s.batchnorms {
            if let Layer::BatchNorm(bn) = &mut nodes[b].layer {
                for t in [&mut bn.gamma, &mut bn.beta, &mut bn.moving_mean, &mut bn.moving_var] {
                    *t = t.select_last(&sel.indices)?;
                }
            }
            changed.insert(b);
        }
        for c in &s.consumers {
            let rows = sel.expand(c.positions);
            match &mut nodes[c.node].layer {
                Layer::Dense(d) => d.weight = prune_inputs(&d.weight, &rows)?,
                Layer::Conv2D(k) => k.kernel = prune_inputs(&k.kernel, &rows)?,
                other => unreachable!("consumer of kind {}", other.kind()),
            }
            let basis = bases_by_node.get_mut(&c.node).expect("validated");
            let me = basis.retained.expect("checked");
            *basis = prune_basis(basis, &rows)?;
            if me > rows.len() {
                warn!(
                    "layer '{}': {me} directions kept over only {} remaining inputs",
                    nodes[c.node].name,
                    rows.len()
                );
            }
            changed.insert(c.node);
        }
    }

    for (&idx, basis) in &bases_by_node {
        let layer = match &nodes[idx].layer {
            Layer::Dense(d) => Layer::PcaDense(to_pca_dense(d, basis)?),
            Layer::Conv2D(c) => Layer::PcaConv2D(to_pca_conv(c, basis)?),
            other => unreachable!("input transform of {}", other.kind()),
        };
        nodes[idx].layer = layer;
        changed.insert(idx);
    }

    let network = Network::new(net.input_shape().to_vec(), nodes, net.residual_groups().to_vec())?;
    Ok(Transformed {
        changed: changed.iter().map(|&i| network.nodes()[i].name.clone()).collect(),
        bases: bases_by_node
            .into_iter()
            .map(|(i, b)| (network.nodes()[i].name.clone(), b))
            .collect(),
        network,
        selections,
    })
}
