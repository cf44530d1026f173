//! MNIST and CIFAR-10 loading, splitting and augmentation.

mod augment;
mod formats;

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment, Augmentation};
pub use formats::{parse_cifar_batch, parse_idx_images, parse_idx_labels, CIFAR_RECORD_BYTES};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Images (`N×h×w×c`) and their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> Split<T> {
    pub fn new(images: Tensor<T>, labels: Vec<usize>) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::dataset(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Images and labels at `idx`, in that order.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let x = self.images.select_rows(idx)?;
        let y = idx.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let (images, labels) = self.batch(idx)?;
        Ok(Self { images, labels })
    }

    pub fn cast<U: Scalar>(&self) -> Split<U> {
        Split {
            images: self.images.cast(),
            labels: self.labels.clone(),
        }
    }
}

/// Per-channel statistics used to standardize images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub name: String,
    pub classes: usize,
    pub train: Split<T>,
    pub val: Option<Split<T>>,
    pub test: Split<T>,
    pub normalization: Option<Normalization>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LoadOptions {
    /// Fraction of training images moved to a validation split, rounded
    /// to a whole count (0 for none).
    pub validation: f64,
    pub seed: u64,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Loads the four IDX files of MNIST from `dir`, scaled to `[0, 1]`.
pub fn load_mnist<T: Scalar>(dir: impl AsRef<Path>, opts: &LoadOptions) -> Result<Dataset<T>> {
    let dir = dir.as_ref();
    let part = |images: &str, labels: &str| -> Result<Split<T>> {
        let x = parse_idx_images(&read(&dir.join(images))?)?;
        let y = parse_idx_labels(&read(&dir.join(labels))?, 10)?;
        Split::new(x, y)
    };
    let train = part("train-images-idx3-ubyte", "train-labels-idx1-ubyte")?;
    let test = part("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")?;
    let (train, val) = split_validation(train, opts)?;
    Ok(Dataset {
        name: "mnist".into(),
        classes: 10,
        train,
        val,
        test,
        normalization: None,
    })
}

/// Loads the CIFAR-10 binary batches from `dir` and standardizes every
/// channel with the mean and standard deviation of the training split
/// (after any validation images are set aside).
pub fn load_cifar10<T: Scalar>(dir: impl AsRef<Path>, opts: &LoadOptions) -> Result<Dataset<T>> {
    let dir = dir.as_ref();
    let mut bytes = Vec::with_capacity(5 * 10_000 * CIFAR_RECORD_BYTES);
    for i in 1..=5 {
        bytes.extend(read(&dir.join(format!("data_batch_{i}.bin")))?);
    }
    let (x, y) = parse_cifar_batch::<T>(&bytes)?;
    drop(bytes);
    let train = Split::new(x, y)?;
    let (x, y) = parse_cifar_batch::<T>(&read(&dir.join("test_batch.bin"))?)?;
    let mut test = Split::new(x, y)?;
    let (mut train, mut val) = split_validation(train, opts)?;
    let norm = channel_stats(&train.images);
    standardize(&mut train.images, &norm);
    standardize(&mut test.images, &norm);
    if let Some(v) = val.as_mut() {
        standardize(&mut v.images, &norm);
    }
    Ok(Dataset {
        name: "cifar10".into(),
        classes: 10,
        train,
        val,
        test,
        normalization: Some(norm),
    })
}

/// Loads `name` ("mnist" or "cifar10") from `root/mnist` or
/// `root/cifar-10-batches-bin`.
pub fn load_dataset<T: Scalar>(name: &str, root: impl AsRef<Path>, opts: &LoadOptions) -> Result<Dataset<T>> {
    let root = root.as_ref();
    match name {
        "mnist" => load_mnist(root.join("mnist"), opts),
        "cifar10" => load_cifar10(root.join("cifar-10-batches-bin"), opts),
        other => Err(Error::config(format!("unknown dataset '{other}' (expected mnist or cifar10)"))),
    }
}

/// Per-channel mean and population standard deviation over all pixels.
pub fn channel_stats<T: Scalar>(images: &Tensor<T>) -> Normalization {
    let c = *images.shape().last().unwrap();
    let count = (images.numel() / c) as f64;
    let mut mean = vec![0.0; c];
    for px in images.data().chunks_exact(c) {
        for (m, v) in mean.iter_mut().zip(px) {
            *m += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= count);
    let mut var = vec![0.0; c];
    for px in images.data().chunks_exact(c) {
        for ((s, v), m) in var.iter_mut().zip(px).zip(&mean) {
            *s += (v.as_f64() - m).powi(2);
        }
    }
    let std = var.iter().map(|s| (s / count).sqrt()).collect();
    Normalization { mean, std }
}

pub fn standardize<T: Scalar>(images: &mut Tensor<T>, norm: &Normalization) {
    let c = norm.mean.len();
    for px in images.data_mut().chunks_exact_mut(c) {
        for ((v, m), s) in px.iter_mut().zip(&norm.mean).zip(&norm.std) {
            let d = if *s > 0.0 { *s } else { 1.0 };
            *v = T::from_f64_lossy((v.as_f64() - m) / d);
        }
    }
}

fn split_validation<T: Scalar>(train: Split<T>, opts: &LoadOptions) -> Result<(Split<T>, Option<Split<T>>)> {
    if !(0.0..=1.0).contains(&opts.validation) {
        return Err(Error::config(format!("validation fraction {} outside [0, 1]", opts.validation)));
    }
    let count = (opts.validation * train.len() as f64).round() as usize;
    if count == 0 {
        return Ok((train, None));
    }
    if count >= train.len() {
        return Err(Error::config(format!(
            "validation split of {count} leaves no training images out of {}",
            train.len()
        )));
    }
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    let (v, t) = idx.split_at_mut(count);
    v.sort_unstable();
    t.sort_unstable();
    Ok((train.subset(t)?, Some(train.subset(v)?)))
}

/// Keeps `n` training images, the same number per class when `n` divides
/// evenly by the class count, otherwise a uniform random subset. Indices
/// stay in their original order; validation and test splits are untouched.
pub fn subsample<T: Scalar>(data: Dataset<T>, n: usize, seed: u64) -> Result<Dataset<T>> {
    let total = data.train.len();
    if n == 0 || n > total {
        return Err(Error::config(format!("subsample size {n} outside [1, {total}]")));
    }
    if n == total {
        return Ok(data);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = Vec::with_capacity(n);
    if n.is_multiple_of(data.classes) {
        let per = n / data.classes;
        for c in 0..data.classes {
            let mut members: Vec<usize> = (0..total).filter(|&i| data.train.labels[i] == c).collect();
            if members.len() < per {
                return Err(Error::dataset(format!(
                    "class {c} has {} images, {per} needed for a stratified subsample",
                    members.len()
                )));
            }
            members.shuffle(&mut rng);
            keep.extend_from_slice(&members[..per]);
        }
    } else {
        let mut all: Vec<usize> = (0..total).collect();
        all.shuffle(&mut rng);
        keep.extend_from_slice(&all[..n]);
    }
    keep.sort_unstable();
    let train = data.train.subset(&keep)?;
    Ok(Dataset { train, ..data })
}
