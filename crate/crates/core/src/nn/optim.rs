use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::loss::softmax_cross_entropy;
use super::network::{ForwardCache, Gradients, Network};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerConfig {
    /// `v ← μ·v − lr·g; w ← w + v`
    Sgd {
        learning_rate: f64,
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        learning_rate: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-7
}

impl OptimizerConfig {
    pub fn sgd(learning_rate: f64, momentum: f64) -> Self {
        OptimizerConfig::Sgd { learning_rate, momentum }
    }

    pub fn adam(learning_rate: f64) -> Self {
        OptimizerConfig::Adam {
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }

    pub fn learning_rate(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { learning_rate, .. } | OptimizerConfig::Adam { learning_rate, .. } => learning_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { learning_rate, momentum } => {
                learning_rate >= 0.0 && (0.0..1.0).contains(&momentum)
            }
            OptimizerConfig::Adam {
                learning_rate,
                beta1,
                beta2,
                epsilon,
            } => learning_rate >= 0.0 && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && epsilon > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Per-tensor optimizer state. `first` is the SGD velocity or the Adam first
/// moment; `second` is the Adam second moment (empty for SGD).
#[derive(Debug, Clone, PartialEq)]
pub struct SlotState<T> {
    pub layer_kind: String,
    pub shape: Vec<usize>,
    pub step: u64,
    pub first: Vec<T>,
    pub second: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer<T> {
    config: OptimizerConfig,
    slots: BTreeMap<(String, String), SlotState<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            slots: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn learning_rate(&self) -> f64 {
        self.config.learning_rate()
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        match &mut self.config {
            OptimizerConfig::Sgd { learning_rate, .. } | OptimizerConfig::Adam { learning_rate, .. } => {
                *learning_rate = lr
            }
        }
    }

    /// State keyed by (layer name, slot name).
    pub fn slots(&self) -> &BTreeMap<(String, String), SlotState<T>> {
        &self.slots
    }

    pub(crate) fn from_parts(config: OptimizerConfig, slots: BTreeMap<(String, String), SlotState<T>>) -> Self {
        Self { config, slots }
    }

    /// Drops all state held for the named layer.
    pub fn reset_layer(&mut self, name: &str) {
        self.slots.retain(|(layer, _), _| layer != name);
    }

    /// Updates one tensor in place. State is reinitialized whenever the
    /// stored kind or shape no longer matches.
    pub fn update(&mut self, layer: &str, slot: &str, layer_kind: &str, param: &mut Tensor<T>, grad: &Tensor<T>) -> Result<()> {
        if param.shape() != grad.shape() {
            return Err(Error::shape(format!(
                "gradient {:?} for '{layer}' {slot} does not match parameter {:?}",
                grad.shape(),
                param.shape()
            )));
        }
        let key = (layer.to_string(), slot.to_string());
        let fresh = |second: bool| SlotState {
            layer_kind: layer_kind.to_string(),
            shape: param.shape().to_vec(),
            step: 0,
            first: vec![T::zero(); param.numel()],
            second: if second { vec![T::zero(); param.numel()] } else { Vec::new() },
        };
        let is_adam = matches!(self.config, OptimizerConfig::Adam { .. });
        let state = self.slots.entry(key).or_insert_with(|| fresh(is_adam));
        if state.layer_kind != layer_kind || state.shape != param.shape() || (is_adam && state.second.is_empty()) {
            *state = fresh(is_adam);
        }
        state.step += 1;
        match self.config {
            OptimizerConfig::Sgd { learning_rate, momentum } => {
                let lr = T::from_f64_lossy(learning_rate);
                let mu = T::from_f64_lossy(momentum);
                for ((w, v), &g) in param.data_mut().iter_mut().zip(&mut state.first).zip(grad.data()) {
                    *v = mu * *v - lr * g;
                    *w += *v;
                }
            }
            OptimizerConfig::Adam {
                learning_rate,
                beta1,
                beta2,
                epsilon,
            } => {
                let t = state.step as i32;
                let lr_t = learning_rate * (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t));
                let (lr_t, b1, b2, eps) = (
                    T::from_f64_lossy(lr_t),
                    T::from_f64_lossy(beta1),
                    T::from_f64_lossy(beta2),
                    T::from_f64_lossy(epsilon),
                );
                let one = T::one();
                for (((w, m), v), &g) in param
                    .data_mut()
                    .iter_mut()
                    .zip(&mut state.first)
                    .zip(&mut state.second)
                    .zip(grad.data())
                {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    *w -= lr_t * *m / (v.sqrt() + eps);
                }
            }
        }
        Ok(())
    }

    /// Applies one update to every trainable tensor. `l2` adds `2·l2·w` to the
    /// gradient of weight matrices and kernels only.
    pub fn step(&mut self, net: &mut Network<T>, grads: &Gradients<T>, l2: f64) -> Result<()> {
        let l2t = T::from_f64_lossy(2.0 * l2);
        for (node, node_grads) in net.nodes_mut().iter_mut().zip(&grads.per_node) {
            let kind = node.layer.kind();
            let name = node.name.clone();
            for ((slot, param), grad) in node.layer.params_mut().into_iter().zip(node_grads) {
                if l2 > 0.0 && is_weight_slot(slot) {
                    let mut g = grad.clone();
                    for (gv, &w) in g.data_mut().iter_mut().zip(param.data()) {
                        *gv += l2t * w;
                    }
                    self.update(&name, slot, kind, param, &g)?;
                } else {
                    self.update(&name, slot, kind, param, grad)?;
                }
            }
        }
        Ok(())
    }
}

fn is_weight_slot(slot: &str) -> bool {
    slot == "weight" || slot == "kernel"
}

/// `l2 · Σ w²` over weight matrices and kernels.
pub fn l2_penalty<T: Scalar>(net: &Network<T>, l2: f64) -> f64 {
    if l2 == 0.0 {
        return 0.0;
    }
    let mut s = 0.0;
    for node in net.nodes() {
        for (slot, t) in node.layer.params() {
            if is_weight_slot(slot) {
                s += t.data().iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>();
            }
        }
    }
    l2 * s
}

/// Loss, backward pass, batch-norm statistic update and optimizer step for
/// one batch. Returns the data loss plus the L2 penalty.
pub fn backward_and_step<T: Scalar>(
    net: &mut Network<T>,
    cache: &ForwardCache<T>,
    labels: &[usize],
    optimizer: &mut Optimizer<T>,
    l2: f64,
) -> Result<f64> {
    let (loss, dlogits) = softmax_cross_entropy(cache.logits(), labels)?;
    let grads = net.backward(cache, &dlogits)?;
    let penalty = l2_penalty(net, l2);
    net.update_batchnorm_stats(cache);
    optimizer.step(net, &grads, l2)?;
    Ok(loss + penalty)
}
