use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{conv_output_extent, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    None,
    Relu,
    Sigmoid,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PaddingMode {
    Valid,
    Same,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    /// m×n
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2D<T> {
    /// k1×k2×m×n
    pub kernel: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub stride: usize,
    pub padding: PaddingMode,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub moving_mean: Tensor<T>,
    pub moving_var: Tensor<T>,
    /// Weight of the old moving statistic in each update.
    pub momentum: f64,
    pub epsilon: f64,
}

/// Dense layer rewritten in a PCA basis of its inputs:
/// `σ((x − μ)·U·W̃ + b̃)`. `mean` and `basis` are frozen.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaDense<T> {
    pub mean: Tensor<T>,
    /// m×m_e, orthonormal columns.
    pub basis: Tensor<T>,
    /// m_e×n
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub activation: Activation,
}

/// Convolution rewritten over principal filters: every input depth vector
/// is centred and projected by `basis`, then convolved with `kernel`.
/// Out-of-bounds pixels read `pad_values = −μ·U`, the projection of a zero
/// pixel, so `same` padding stays equivalent to the original zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaConv2D<T> {
    pub mean: Tensor<T>,
    /// m×m_e
    pub basis: Tensor<T>,
    /// k1×k2×m_e×n
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: PaddingMode,
    pub pad_values: Tensor<T>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Dense(Dense<T>),
    Conv2D(Conv2D<T>),
    MaxPool2,
    GlobalAvgPool,
    Flatten,
    BatchNorm(BatchNorm<T>),
    Activation(Activation),
    /// Sums all of its inputs.
    Add,
    PcaDense(PcaDense<T>),
    PcaConv2D(PcaConv2D<T>),
}

impl<T: Scalar> BatchNorm<T> {
    pub fn new(channels: usize, momentum: f64, epsilon: f64) -> Self {
        Self {
            gamma: Tensor::full(&[channels], T::one()),
            beta: Tensor::zeros(&[channels]),
            moving_mean: Tensor::zeros(&[channels]),
            moving_var: Tensor::full(&[channels], T::one()),
            momentum,
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }
}

impl<T: Scalar> PcaDense<T> {
    pub fn new(mean: Tensor<T>, basis: Tensor<T>, weight: Tensor<T>, bias: Tensor<T>, activation: Activation) -> Result<Self> {
        let (m, me) = basis.dims2()?;
        let (wm, n) = weight.dims2()?;
        if mean.numel() != m || wm != me || bias.numel() != n {
            return Err(Error::shape(format!(
                "pca dense: mean {:?}, basis {:?}, weight {:?}, bias {:?} inconsistent",
                mean.shape(),
                basis.shape(),
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self {
            mean,
            basis,
            weight,
            bias,
            activation,
        })
    }
}

impl<T: Scalar> PcaConv2D<T> {
    pub fn new(
        mean: Tensor<T>,
        basis: Tensor<T>,
        kernel: Tensor<T>,
        bias: Tensor<T>,
        stride: usize,
        padding: PaddingMode,
        activation: Activation,
    ) -> Result<Self> {
        let (m, me) = basis.dims2()?;
        let ok = matches!(kernel.shape(), &[_, _, km, n] if km == me && bias.numel() == n) && mean.numel() == m;
        if !ok {
            return Err(Error::shape(format!(
                "pca conv: mean {:?}, basis {:?}, kernel {:?}, bias {:?} inconsistent",
                mean.shape(),
                basis.shape(),
                kernel.shape(),
                bias.shape()
            )));
        }
        let pad_values = pad_values_for(&mean, &basis);
        Ok(Self {
            mean,
            basis,
            kernel,
            bias,
            stride,
            padding,
            pad_values,
            activation,
        })
    }
}

/// `−μ·U`: what a zero input pixel becomes after centring and projection.
pub fn pad_values_for<T: Scalar>(mean: &Tensor<T>, basis: &Tensor<T>) -> Tensor<T> {
    let (m, me) = basis.dims2().expect("basis is a matrix");
    let mut out = vec![T::zero(); me];
    for (j, o) in out.iter_mut().enumerate() {
        let mut s = T::zero();
        for i in 0..m {
            s += mean.data()[i] * basis.data()[i * me + j];
        }
        *o = -s;
    }
    Tensor::new(vec![me], out).expect("non-empty basis")
}

/// Role of a tensor held by a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    /// Updated by the optimizer.
    Trainable,
    /// Stored state that gradients never touch (PCA means/bases, moving
    /// statistics).
    Frozen,
    /// Recomputed from other tensors, not counted as a parameter.
    Derived,
}

impl<T: Scalar> Layer<T> {
    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2D(_) => "conv2d",
            Layer::MaxPool2 => "maxpool2",
            Layer::GlobalAvgPool => "global_avg_pool",
            Layer::Flatten => "flatten",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Activation(_) => "activation",
            Layer::Add => "add",
            Layer::PcaDense(_) => "pca_dense",
            Layer::PcaConv2D(_) => "pca_conv2d",
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, Layer::Conv2D(_) | Layer::PcaConv2D(_))
    }

    pub fn is_dense(&self) -> bool {
        matches!(self, Layer::Dense(_) | Layer::PcaDense(_))
    }

    /// Weight-bearing layers that can be transformed.
    pub fn is_weighted(&self) -> bool {
        self.is_conv() || self.is_dense()
    }

    /// Every tensor of the layer with its slot name and role, in a fixed
    /// order used for optimizer state and checkpoints.
    pub fn tensors(&self) -> Vec<(&'static str, TensorRole, &Tensor<T>)> {
        use TensorRole::*;
        match self {
            Layer::Dense(d) => vec![("weight", Trainable, &d.weight), ("bias", Trainable, &d.bias)],
            Layer::Conv2D(c) => {
                let mut v = vec![("kernel", Trainable, &c.kernel)];
                if let Some(b) = &c.bias {
                    v.push(("bias", Trainable, b));
                }
                v
            }
            Layer::BatchNorm(b) => vec![
                ("gamma", Trainable, &b.gamma),
                ("beta", Trainable, &b.beta),
                ("moving_mean", Frozen, &b.moving_mean),
                ("moving_var", Frozen, &b.moving_var),
            ],
            Layer::PcaDense(p) => vec![
                ("mean", Frozen, &p.mean),
                ("basis", Frozen, &p.basis),
                ("weight", Trainable, &p.weight),
                ("bias", Trainable, &p.bias),
            ],
            Layer::PcaConv2D(p) => vec![
                ("mean", Frozen, &p.mean),
                ("basis", Frozen, &p.basis),
                ("kernel", Trainable, &p.kernel),
                ("bias", Trainable, &p.bias),
                ("pad_values", Derived, &p.pad_values),
            ],
            _ => Vec::new(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, TensorRole, &mut Tensor<T>)> {
        use TensorRole::*;
        match self {
            Layer::Dense(d) => vec![("weight", Trainable, &mut d.weight), ("bias", Trainable, &mut d.bias)],
            Layer::Conv2D(c) => {
                let mut v = vec![("kernel", Trainable, &mut c.kernel)];
                if let Some(b) = &mut c.bias {
                    v.push(("bias", Trainable, b));
                }
                v
            }
            Layer::BatchNorm(b) => vec![
                ("gamma", Trainable, &mut b.gamma),
                ("beta", Trainable, &mut b.beta),
                ("moving_mean", Frozen, &mut b.moving_mean),
                ("moving_var", Frozen, &mut b.moving_var),
            ],
            Layer::PcaDense(p) => vec![
                ("mean", Frozen, &mut p.mean),
                ("basis", Frozen, &mut p.basis),
                ("weight", Trainable, &mut p.weight),
                ("bias", Trainable, &mut p.bias),
            ],
            Layer::PcaConv2D(p) => vec![
                ("mean", Frozen, &mut p.mean),
                ("basis", Frozen, &mut p.basis),
                ("kernel", Trainable, &mut p.kernel),
                ("bias", Trainable, &mut p.bias),
                ("pad_values", Derived, &mut p.pad_values),
            ],
            _ => Vec::new(),
        }
    }

    /// Trainable tensors only, in `tensors()` order.
    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor<T>)> {
        self.tensors_mut()
            .into_iter()
            .filter(|(_, role, _)| *role == TensorRole::Trainable)
            .map(|(name, _, t)| (name, t))
            .collect()
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        self.tensors()
            .into_iter()
            .filter(|(_, role, _)| *role == TensorRole::Trainable)
            .map(|(name, _, t)| (name, t))
            .collect()
    }

    /// Per-sample output shape given per-sample input shapes.
    pub fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let single = || -> Result<&[usize]> {
            match inputs {
                [s] => Ok(*s),
                _ => Err(Error::shape(format!("{} takes one input, got {}", self.kind(), inputs.len()))),
            }
        };
        match self {
            Layer::Dense(d) => {
                let s = single()?;
                let (m, n) = d.weight.dims2()?;
                if s != [m] {
                    return Err(Error::shape(format!("dense expects input [{m}], got {s:?}")));
                }
                if d.bias.numel() != n {
                    return Err(Error::shape(format!("dense bias has {} entries for {n} outputs", d.bias.numel())));
                }
                Ok(vec![n])
            }
            Layer::PcaDense(p) => {
                let s = single()?;
                let m = p.mean.numel();
                if s != [m] {
                    return Err(Error::shape(format!("pca dense expects input [{m}], got {s:?}")));
                }
                Ok(vec![p.weight.shape()[1]])
            }
            Layer::Conv2D(c) => {
                let s = single()?;
                conv_shape(s, c.kernel.shape(), c.stride, c.padding, None)
            }
            Layer::PcaConv2D(p) => {
                let s = single()?;
                conv_shape(s, p.kernel.shape(), p.stride, p.padding, Some(p.mean.numel()))
            }
            Layer::MaxPool2 => match single()? {
                &[h, w, m] if h >= 2 && w >= 2 => Ok(vec![h / 2, w / 2, m]),
                s => Err(Error::shape(format!("maxpool2 needs h×w×m with h,w ≥ 2, got {s:?}"))),
            },
            Layer::GlobalAvgPool => match single()? {
                &[_, _, m] => Ok(vec![m]),
                s => Err(Error::shape(format!("global average pool needs h×w×m, got {s:?}"))),
            },
            Layer::Flatten => Ok(vec![single()?.iter().product()]),
            Layer::BatchNorm(b) => {
                let s = single()?;
                if s.last() != Some(&b.channels()) {
                    return Err(Error::shape(format!(
                        "batchnorm over {} channels got input {s:?}",
                        b.channels()
                    )));
                }
                Ok(s.to_vec())
            }
            Layer::Activation(_) => Ok(single()?.to_vec()),
            Layer::Add => {
                let first = inputs.first().ok_or_else(|| Error::shape("add needs at least one input"))?;
                if let Some(bad) = inputs.iter().find(|s| *s != first) {
                    return Err(Error::shape(format!("add inputs disagree: {first:?} vs {bad:?}")));
                }
                Ok(first.to_vec())
            }
        }
    }
}

fn conv_shape(
    s: &[usize],
    kernel: &[usize],
    stride: usize,
    padding: PaddingMode,
    projected_from: Option<usize>,
) -> Result<Vec<usize>> {
    let (h, w, m) = match s {
        &[h, w, m] => (h, w, m),
        _ => return Err(Error::shape(format!("conv expects h×w×m input, got {s:?}"))),
    };
    let (k1, k2, km, n) = match kernel {
        &[a, b, c, d] => (a, b, c, d),
        _ => return Err(Error::shape(format!("conv kernel must be rank 4, got {kernel:?}"))),
    };
    let expected = projected_from.unwrap_or(km);
    if m != expected {
        return Err(Error::shape(format!("conv expects {expected} input channels, got {m}")));
    }
    let same = padding == PaddingMode::Same;
    let (oh, _) = conv_output_extent(h, k1, stride, same)?;
    let (ow, _) = conv_output_extent(w, k2, stride, same)?;
    Ok(vec![oh, ow, n])
}
