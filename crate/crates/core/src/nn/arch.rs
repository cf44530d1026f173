//! Reference architectures.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layer::{Activation, BatchNorm, Conv2D, Dense, Layer, PaddingMode};
use super::network::{Network, Node, Port, ResidualGroup};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-3;

/// He-normal: truncated normal (resampled beyond two deviations) with
/// standard deviation `sqrt(2 / fan_in)`.
pub fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    Tensor::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 {
            return T::from_f64_lossy(v * std / 0.879_625_661_034_239_8);
        }
    })
}

/// Glorot-uniform: `U(−l, l)` with `l = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<T: Scalar>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-limit..limit)))
}

/// Incremental network assembly with seeded initialization.
pub struct NetworkBuilder<T> {
    input_shape: Vec<usize>,
    nodes: Vec<Node<T>>,
    shapes: Vec<Vec<usize>>,
    groups: Vec<ResidualGroup>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> NetworkBuilder<T> {
    pub fn new(input_shape: &[usize], seed: u64) -> Self {
        Self {
            input_shape: input_shape.to_vec(),
            nodes: Vec::new(),
            shapes: Vec::new(),
            groups: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn shape(&self, port: Port) -> &[usize] {
        match port {
            Port::Input => &self.input_shape,
            Port::Node(i) => &self.shapes[i],
        }
    }

    /// Adds a node reading from `inputs`; panics on inconsistent shapes,
    /// which only happens for a malformed builder program.
    pub fn push(&mut self, name: &str, layer: Layer<T>, inputs: &[Port]) -> Port {
        let ins: Vec<&[usize]> = inputs.iter().map(|&p| self.shape(p)).collect();
        let out = layer
            .output_shape(&ins)
            .unwrap_or_else(|e| panic!("builder layer '{name}': {e}"));
        self.shapes.push(out);
        self.nodes.push(Node {
            name: name.to_string(),
            layer,
            inputs: inputs.to_vec(),
        });
        Port::Node(self.nodes.len() - 1)
    }

    pub fn dense(&mut self, name: &str, input: Port, units: usize, activation: Activation) -> Port {
        let m = self.shape(input).iter().product();
        let weight = glorot_uniform(&[m, units], m, units, &mut self.rng);
        let layer = Layer::Dense(Dense {
            weight,
            bias: Tensor::zeros(&[units]),
            activation,
        });
        self.push(name, layer, &[input])
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        input: Port,
        kernel: usize,
        filters: usize,
        stride: usize,
        use_bias: bool,
        activation: Activation,
    ) -> Port {
        let m = *self.shape(input).last().expect("conv input has channels");
        let kernel_t = he_normal(&[kernel, kernel, m, filters], kernel * kernel * m, &mut self.rng);
        let layer = Layer::Conv2D(Conv2D {
            kernel: kernel_t,
            bias: use_bias.then(|| Tensor::zeros(&[filters])),
            stride,
            padding: PaddingMode::Same,
            activation,
        });
        self.push(name, layer, &[input])
    }

    pub fn batchnorm(&mut self, name: &str, input: Port) -> Port {
        let c = *self.shape(input).last().expect("batchnorm input has channels");
        self.push(name, Layer::BatchNorm(BatchNorm::new(c, BN_MOMENTUM, BN_EPSILON)), &[input])
    }

    pub fn residual_group(&mut self, group: ResidualGroup) {
        self.groups.push(group);
    }

    pub fn build(self) -> Result<Network<T>> {
        Network::new(self.input_shape, self.nodes, self.groups)
    }
}

/// Named reference architectures.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Architecture {
    /// Four 3×3 conv layers (64, 64, M, 128, 128, M) and dense 256, 256, 10 on
    /// 32×32×3 inputs.
    Conv4,
    /// Conv4 with configurable widths: conv layers `(a, a, M, b, b, M)` and
    /// dense layers of `fc` units.
    Conv4Small { a: usize, b: usize, fc: usize },
    Resnet20,
    Resnet110,
    WideResnet20,
    /// ResNet with 8/16/32 filters and one block per stage.
    ThinResnet8,
    /// 28×28×1 → hidden sigmoid layer → 10-way softmax.
    MlpMnist { hidden: usize },
}

impl Architecture {
    pub const NAMES: &'static [&'static str] = &[
        "conv4",
        "conv4-small[-A-B-FC]",
        "resnet20",
        "resnet110",
        "wideresnet20",
        "thin-resnet8",
        "mlp-mnist[-H]",
    ];

    pub fn input_shape(&self) -> [usize; 3] {
        match self {
            Architecture::MlpMnist { .. } => [28, 28, 1],
            _ => [32, 32, 3],
        }
    }

    /// Dataset the architecture is shaped for.
    pub fn dataset(&self) -> &'static str {
        match self {
            Architecture::MlpMnist { .. } => "mnist",
            _ => "cifar10",
        }
    }

    pub fn build<T: Scalar>(&self, seed: u64) -> Result<Network<T>> {
        match *self {
            Architecture::Conv4 => conv4_like(64, 128, 256, seed),
            Architecture::Conv4Small { a, b, fc } => conv4_like(a, b, fc, seed),
            Architecture::Resnet20 => resnet(&[16, 32, 64], 3, seed),
            Architecture::Resnet110 => resnet(&[16, 32, 64], 18, seed),
            Architecture::WideResnet20 => resnet(&[64, 128, 256], 3, seed),
            Architecture::ThinResnet8 => resnet(&[8, 16, 32], 1, seed),
            Architecture::MlpMnist { hidden } => mlp_mnist(hidden, seed),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Conv4 => write!(f, "conv4"),
            Architecture::Conv4Small { a, b, fc } => write!(f, "conv4-small-{a}-{b}-{fc}"),
            Architecture::Resnet20 => write!(f, "resnet20"),
            Architecture::Resnet110 => write!(f, "resnet110"),
            Architecture::WideResnet20 => write!(f, "wideresnet20"),
            Architecture::ThinResnet8 => write!(f, "thin-resnet8"),
            Architecture::MlpMnist { hidden } => write!(f, "mlp-mnist-{hidden}"),
        }
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::config(format!("unknown architecture '{s}'; expected one of {}", Self::NAMES.join(", ")));
        let nums = |rest: &str| -> Result<Vec<usize>> {
            rest.split('-')
                .map(|p| p.parse::<usize>().ok().filter(|&v| v > 0).ok_or_else(unknown))
                .collect()
        };
        match s {
            "conv4" => return Ok(Architecture::Conv4),
            "conv4-small" => return Ok(Architecture::Conv4Small { a: 32, b: 64, fc: 256 }),
            "resnet20" => return Ok(Architecture::Resnet20),
            "resnet110" => return Ok(Architecture::Resnet110),
            "wideresnet20" => return Ok(Architecture::WideResnet20),
            "thin-resnet8" => return Ok(Architecture::ThinResnet8),
            "mlp-mnist" => return Ok(Architecture::MlpMnist { hidden: 256 }),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("conv4-small-") {
            if let [a, b, fc] = nums(rest)?[..] {
                return Ok(Architecture::Conv4Small { a, b, fc });
            }
        } else if let Some(rest) = s.strip_prefix("mlp-mnist-") {
            if let [hidden] = nums(rest)?[..] {
                return Ok(Architecture::MlpMnist { hidden });
            }
        }
        Err(unknown())
    }
}

impl TryFrom<String> for Architecture {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Architecture> for String {
    fn from(a: Architecture) -> String {
        a.to_string()
    }
}

fn conv4_like<T: Scalar>(a: usize, b: usize, fc: usize, seed: u64) -> Result<Network<T>> {
    let mut nb = NetworkBuilder::<T>::new(&[32, 32, 3], seed);
    let relu = Activation::Relu;
    let x = nb.conv("conv1", Port::Input, 3, a, 1, true, relu);
    let x = nb.conv("conv2", x, 3, a, 1, true, relu);
    let x = nb.push("pool1", Layer::MaxPool2, &[x]);
    let x = nb.conv("conv3", x, 3, b, 1, true, relu);
    let x = nb.conv("conv4", x, 3, b, 1, true, relu);
    let x = nb.push("pool2", Layer::MaxPool2, &[x]);
    let x = nb.push("flatten", Layer::Flatten, &[x]);
    let x = nb.dense("fc1", x, fc, relu);
    let x = nb.dense("fc2", x, fc, relu);
    nb.dense("output", x, 10, Activation::Softmax);
    nb.build()
}

fn mlp_mnist<T: Scalar>(hidden: usize, seed: u64) -> Result<Network<T>> {
    let mut nb = NetworkBuilder::<T>::new(&[28, 28, 1], seed);
    let x = nb.push("flatten", Layer::Flatten, &[Port::Input]);
    let x = nb.dense("fc1", x, hidden, Activation::Sigmoid);
    nb.dense("output", x, 10, Activation::Softmax);
    nb.build()
}

/// CIFAR ResNet: conv0, then one stage per entry of `widths` with `blocks`
/// basic blocks each. The first block of every stage has a 1×1 projection
/// shortcut; stages after the first downsample by two.
///
/// Layer names: `conv0`, `s{stage}_proj`, `s{stage}b{block}_conv{1,2}` and
/// `output`, with batch normalization and activation nodes in between.
fn resnet<T: Scalar>(widths: &[usize], blocks: usize, seed: u64) -> Result<Network<T>> {
    let mut nb = NetworkBuilder::<T>::new(&[32, 32, 3], seed);
    let none = Activation::None;
    let x = nb.conv("conv0", Port::Input, 3, widths[0], 1, false, none);
    let x = nb.batchnorm("bn0", x);
    let mut x = nb.push("relu0", Layer::Activation(Activation::Relu), &[x]);
    for (si, &width) in widths.iter().enumerate() {
        let stage = si + 1;
        let stride = if si == 0 { 1 } else { 2 };
        let mut members = Vec::new();
        let proj_name = format!("s{stage}_proj");
        let p = nb.conv(&proj_name, x, 1, width, stride, false, none);
        let mut shortcut = nb.batchnorm(&format!("s{stage}_proj_bn"), p);
        members.push(proj_name.clone());
        for b in 0..blocks {
            let tag = format!("s{stage}b{b}");
            let s = if b == 0 { stride } else { 1 };
            let h = nb.conv(&format!("{tag}_conv1"), x, 3, width, s, false, none);
            let h = nb.batchnorm(&format!("{tag}_bn1"), h);
            let h = nb.push(&format!("{tag}_relu1"), Layer::Activation(Activation::Relu), &[h]);
            let h = nb.conv(&format!("{tag}_conv2"), h, 3, width, 1, false, none);
            members.push(format!("{tag}_conv2"));
            let h = nb.batchnorm(&format!("{tag}_bn2"), h);
            let h = nb.push(&format!("{tag}_add"), Layer::Add, &[shortcut, h]);
            x = nb.push(&format!("{tag}_relu2"), Layer::Activation(Activation::Relu), &[h]);
            shortcut = x;
        }
        nb.residual_group(ResidualGroup {
            stage,
            members,
            projection: Some(proj_name),
        });
    }
    let x = nb.push("gap", Layer::GlobalAvgPool, &[x]);
    nb.dense("output", x, 10, Activation::Softmax);
    nb.build()
}
