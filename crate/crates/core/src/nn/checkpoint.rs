//! Checkpoint container.
//!
//! ```text
//! "PCNC"          4 bytes magic
//! version         u16 LE (currently 1)
//! manifest_len    u32 LE
//! manifest        JSON text, manifest_len bytes
//! payloads        tensors in the binary tensor format, manifest order
//! crc             u64 LE, CRC-64/XZ of every preceding byte
//! ```
//!
//! The manifest lists nodes in order with their layer hyperparameters and
//! tensor slots, then optimizer slots. Payloads follow the same order: every
//! node's tensors, then each optimizer slot's first moment and, for Adam,
//! its second moment.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layer::*;
use super::network::{Network, Node, Port, ResidualGroup};
use super::optim::{Optimizer, OptimizerConfig, SlotState};
use crate::error::{Error, Result};
use crate::tensor::{io as tio, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PCNC";
pub const CHECKPOINT_VERSION: u16 = 1;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

/// A network with optional training state.
#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub network: Network<T>,
    pub optimizer: Option<Optimizer<T>>,
    pub epoch: usize,
    pub rng: Option<ChaCha8Rng>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum LayerDesc {
    Dense {
        activation: Activation,
    },
    Conv2d {
        stride: usize,
        padding: PaddingMode,
        use_bias: bool,
        activation: Activation,
    },
    Maxpool2,
    GlobalAvgPool,
    Flatten,
    Batchnorm {
        momentum: f64,
        epsilon: f64,
    },
    Activation {
        activation: Activation,
    },
    Add,
    PcaDense {
        activation: Activation,
    },
    PcaConv2d {
        stride: usize,
        padding: PaddingMode,
        activation: Activation,
    },
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    slot: String,
    /// "trainable", "frozen" or "derived".
    role: String,
}

#[derive(Serialize, Deserialize)]
struct NodeEntry {
    name: String,
    inputs: Vec<Port>,
    layer: LayerDesc,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct SlotEntry {
    layer: String,
    slot: String,
    layer_kind: String,
    step: u64,
    adam: bool,
}

#[derive(Serialize, Deserialize)]
struct OptimizerEntry {
    config: OptimizerConfig,
    slots: Vec<SlotEntry>,
}

#[derive(Serialize, Deserialize)]
struct RngEntry {
    seed: String,
    stream: String,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    dtype: String,
    input_shape: Vec<usize>,
    epoch: usize,
    nodes: Vec<NodeEntry>,
    residual_groups: Vec<ResidualGroup>,
    optimizer: Option<OptimizerEntry>,
    rng: Option<RngEntry>,
    tensor_count: usize,
}

fn role_name(r: TensorRole) -> &'static str {
    match r {
        TensorRole::Trainable => "trainable",
        TensorRole::Frozen => "frozen",
        TensorRole::Derived => "derived",
    }
}

fn describe<T: Scalar>(layer: &Layer<T>) -> LayerDesc {
    match layer {
        Layer::Dense(d) => LayerDesc::Dense { activation: d.activation },
        Layer::Conv2D(c) => LayerDesc::Conv2d {
            stride: c.stride,
            padding: c.padding,
            use_bias: c.bias.is_some(),
            activation: c.activation,
        },
        Layer::MaxPool2 => LayerDesc::Maxpool2,
        Layer::GlobalAvgPool => LayerDesc::GlobalAvgPool,
        Layer::Flatten => LayerDesc::Flatten,
        Layer::BatchNorm(b) => LayerDesc::Batchnorm {
            momentum: b.momentum,
            epsilon: b.epsilon,
        },
        Layer::Activation(a) => LayerDesc::Activation { activation: *a },
        Layer::Add => LayerDesc::Add,
        Layer::PcaDense(p) => LayerDesc::PcaDense { activation: p.activation },
        Layer::PcaConv2D(p) => LayerDesc::PcaConv2d {
            stride: p.stride,
            padding: p.padding,
            activation: p.activation,
        },
    }
}

fn rebuild<T: Scalar>(name: &str, desc: LayerDesc, mut t: BTreeMap<String, Tensor<T>>) -> Result<Layer<T>> {
    let mut take = |slot: &str| {
        t.remove(slot)
            .ok_or_else(|| Error::format(format!("layer '{name}' is missing tensor '{slot}'")))
    };
    let layer = match desc {
        LayerDesc::Dense { activation } => Layer::Dense(Dense {
            weight: take("weight")?,
            bias: take("bias")?,
            activation,
        }),
        LayerDesc::Conv2d {
            stride,
            padding,
            use_bias,
            activation,
        } => Layer::Conv2D(Conv2D {
            kernel: take("kernel")?,
            bias: if use_bias { Some(take("bias")?) } else { None },
            stride,
            padding,
            activation,
        }),
        LayerDesc::Maxpool2 => Layer::MaxPool2,
        LayerDesc::GlobalAvgPool => Layer::GlobalAvgPool,
        LayerDesc::Flatten => Layer::Flatten,
        LayerDesc::Batchnorm { momentum, epsilon } => Layer::BatchNorm(BatchNorm {
            gamma: take("gamma")?,
            beta: take("beta")?,
            moving_mean: take("moving_mean")?,
            moving_var: take("moving_var")?,
            momentum,
            epsilon,
        }),
        LayerDesc::Activation { activation } => Layer::Activation(activation),
        LayerDesc::Add => Layer::Add,
        LayerDesc::PcaDense { activation } => Layer::PcaDense(PcaDense {
            mean: take("mean")?,
            basis: take("basis")?,
            weight: take("weight")?,
            bias: take("bias")?,
            activation,
        }),
        LayerDesc::PcaConv2d {
            stride,
            padding,
            activation,
        } => Layer::PcaConv2D(PcaConv2D {
            mean: take("mean")?,
            basis: take("basis")?,
            kernel: take("kernel")?,
            bias: take("bias")?,
            stride,
            padding,
            pad_values: take("pad_values")?,
            activation,
        }),
    };
    if let Some(extra) = t.keys().next() {
        return Err(Error::format(format!("layer '{name}' has unexpected tensor '{extra}'")));
    }
    Ok(layer)
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(network: Network<T>) -> Self {
        Self {
            network,
            optimizer: None,
            epoch: 0,
            rng: None,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut payload = Vec::new();
        let mut count = 0;
        let mut nodes = Vec::new();
        for node in self.network.nodes() {
            let mut tensors = Vec::new();
            for (slot, role, t) in node.layer.tensors() {
                tio::encode(t, &mut payload);
                count += 1;
                tensors.push(TensorEntry {
                    slot: slot.to_string(),
                    role: role_name(role).to_string(),
                });
            }
            nodes.push(NodeEntry {
                name: node.name.clone(),
                inputs: node.inputs.clone(),
                layer: describe(&node.layer),
                tensors,
            });
        }
        let optimizer = match &self.optimizer {
            None => None,
            Some(opt) => {
                let mut slots = Vec::new();
                for ((layer, slot), st) in opt.slots() {
                    tio::encode(&Tensor::new(st.shape.clone(), st.first.clone())?, &mut payload);
                    count += 1;
                    let adam = !st.second.is_empty();
                    if adam {
                        tio::encode(&Tensor::new(st.shape.clone(), st.second.clone())?, &mut payload);
                        count += 1;
                    }
                    slots.push(SlotEntry {
                        layer: layer.clone(),
                        slot: slot.clone(),
                        layer_kind: st.layer_kind.clone(),
                        step: st.step,
                        adam,
                    });
                }
                Some(OptimizerEntry {
                    config: *opt.config(),
                    slots,
                })
            }
        };
        let rng = self.rng.as_ref().map(|r| RngEntry {
            seed: r.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: r.get_stream().to_string(),
            word_pos: r.get_word_pos().to_string(),
        });
        let manifest = Manifest {
            dtype: format!("{:?}", T::DTYPE).to_lowercase(),
            input_shape: self.network.input_shape().to_vec(),
            epoch: self.epoch,
            nodes,
            residual_groups: self.network.residual_groups().to_vec(),
            optimizer,
            rng,
            tensor_count: count,
        };
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::format(e.to_string()))?;
        let mut out = Vec::with_capacity(payload.len() + text.len() + 18);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&payload);
        let crc = CRC64.checksum(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (manifest, mut rest) = parse_header(bytes)?;
        let want = format!("{:?}", T::DTYPE).to_lowercase();
        if manifest.dtype != want {
            return Err(Error::format(format!("checkpoint holds {} tensors, requested {want}", manifest.dtype)));
        }
        let mut next = || -> Result<Tensor<T>> {
            let (t, used) = tio::decode::<T>(rest)?;
            rest = &rest[used..];
            Ok(t)
        };
        let mut nodes = Vec::with_capacity(manifest.nodes.len());
        for entry in manifest.nodes {
            let mut tensors = BTreeMap::new();
            for te in &entry.tensors {
                tensors.insert(te.slot.clone(), next()?);
            }
            let layer = rebuild(&entry.name, entry.layer, tensors)?;
            nodes.push(Node {
                name: entry.name,
                layer,
                inputs: entry.inputs,
            });
        }
        let network = Network::new(manifest.input_shape, nodes, manifest.residual_groups)
            .map_err(|e| Error::format(format!("checkpoint network invalid: {e}")))?;
        let optimizer = match manifest.optimizer {
            None => None,
            Some(oe) => {
                let mut slots = BTreeMap::new();
                for s in oe.slots {
                    let first = next()?;
                    let second = if s.adam { next()?.into_data() } else { Vec::new() };
                    slots.insert(
                        (s.layer, s.slot),
                        SlotState {
                            layer_kind: s.layer_kind,
                            shape: first.shape().to_vec(),
                            step: s.step,
                            first: first.into_data(),
                            second,
                        },
                    );
                }
                Some(Optimizer::from_parts(oe.config, slots))
            }
        };
        if !rest.is_empty() {
            return Err(Error::format(format!("{} unexpected bytes after checkpoint payloads", rest.len())));
        }
        let rng = match manifest.rng {
            None => None,
            Some(r) => Some(restore_rng(&r)?),
        };
        Ok(Self {
            network,
            optimizer,
            epoch: manifest.epoch,
            rng,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path.as_ref(), bytes).map_err(|e| Error::io(&path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn parse_header(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    if bytes.len() < 18 {
        return Err(Error::format("checkpoint truncated"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("eight bytes"));
    if CRC64.checksum(body) != stored {
        return Err(Error::format("checkpoint checksum mismatch (file corrupt or truncated)"));
    }
    if &body[..4] != CHECKPOINT_MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let version = u16::from_le_bytes([body[4], body[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!(
            "checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
        )));
    }
    let len = u32::from_le_bytes(body[6..10].try_into().expect("four bytes")) as usize;
    let text = body
        .get(10..10 + len)
        .ok_or_else(|| Error::format("checkpoint manifest truncated"))?;
    let manifest: Manifest =
        serde_json::from_slice(text).map_err(|e| Error::format(format!("checkpoint manifest: {e}")))?;
    Ok((manifest, &body[10 + len..]))
}

fn restore_rng(r: &RngEntry) -> Result<ChaCha8Rng> {
    use rand::SeedableRng;
    let bad = || Error::format("checkpoint rng state malformed");
    if r.seed.len() != 64 {
        return Err(bad());
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&r.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(r.stream.parse().map_err(|_| bad())?);
    rng.set_word_pos(r.word_pos.parse().map_err(|_| bad())?);
    Ok(rng)
}

pub fn save_checkpoint<T: Scalar>(net: &Network<T>, path: impl AsRef<Path>) -> Result<()> {
    Checkpoint::new(net.clone()).save(path)
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Network<T>> {
    Ok(Checkpoint::load(path)?.network)
}

/// Loads a network saved in either precision, widened to f64.
pub fn load_checkpoint_f64(path: impl AsRef<Path>) -> Result<Network<f64>> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    let (manifest, _) = parse_header(&bytes)?;
    if manifest.dtype == "f32" {
        Ok(Checkpoint::<f32>::from_bytes(&bytes)?.network.cast())
    } else {
        Ok(Checkpoint::<f64>::from_bytes(&bytes)?.network)
    }
}
