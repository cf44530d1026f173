use std::collections::BTreeMap;

use super::network::{Mode, Network, Port};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Records the inputs seen by the named layers over a stream of batches.
///
/// Each layer's input is the output of the node it reads from (or the raw
/// batch), so captures come after any preceding activation or pooling.
/// Rows are stacked in batch order and cut at `max_samples`; convolution
/// inputs keep their `N×h×w×m` layout.
pub fn capture_activations<T: Scalar, I>(
    net: &Network<T>,
    batches: I,
    layers: &[&str],
    max_samples: usize,
) -> Result<BTreeMap<String, Tensor<T>>>
where
    I: IntoIterator<Item = Tensor<T>>,
{
    let mut targets = Vec::with_capacity(layers.len());
    for &name in layers {
        let idx = net.require(name)?;
        let node = &net.nodes()[idx];
        if node.inputs.len() != 1 {
            return Err(Error::config(format!("layer '{name}' has several inputs; nothing single to capture")));
        }
        targets.push((name.to_string(), node.inputs[0]));
    }
    let upto = targets
        .iter()
        .filter_map(|(_, p)| match p {
            Port::Node(i) => Some(i + 1),
            Port::Input => None,
        })
        .max()
        .unwrap_or(0);

    let mut rows: BTreeMap<String, (Vec<T>, usize)> = BTreeMap::new();
    let mut seen = 0;
    for batch in batches {
        if seen >= max_samples {
            break;
        }
        let take = (max_samples - seen).min(batch.shape().first().copied().unwrap_or(0));
        let cache = net.forward_until(&batch, Mode::Eval, upto)?;
        for (name, port) in &targets {
            let t = cache.port(*port);
            let per = t.numel() / cache.batch();
            let entry = rows.entry(name.clone()).or_default();
            entry.0.extend_from_slice(&t.data()[..take * per]);
            entry.1 += take;
        }
        seen += take;
    }
    if seen < 2 {
        return Err(Error::dataset(format!("captured {seen} samples; at least 2 are needed")));
    }
    let mut out = BTreeMap::new();
    for (name, port) in targets {
        let (data, n) = rows.remove(&name).expect("captured every target");
        let mut shape = vec![n];
        shape.extend_from_slice(net.port_shape(port));
        out.insert(name, Tensor::new(shape, data)?);
    }
    Ok(out)
}
