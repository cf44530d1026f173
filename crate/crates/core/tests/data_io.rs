use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;

use pcn::data::*;
use pcn::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn data_root() -> Option<PathBuf> {
    let root = std::env::var_os("PCN_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data"));
    root.exists().then_some(root)
}

fn idx_images(n: usize, rows: usize, cols: usize, pixel: impl Fn(usize, usize) -> u8) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 3];
    for d in [n, rows, cols] {
        b.extend((d as u32).to_be_bytes());
    }
    for i in 0..n {
        for p in 0..rows * cols {
            b.push(pixel(i, p));
        }
    }
    b
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut b = vec![0, 0, 8, 1];
    b.extend((labels.len() as u32).to_be_bytes());
    b.extend_from_slice(labels);
    b
}

#[test]
fn idx_parsing_and_errors() {
    let bytes = idx_images(2, 2, 3, |i, p| (i * 100 + p * 10) as u8);
    let x = parse_idx_images::<f64>(&bytes).unwrap();
    assert_eq!(x.shape(), &[2, 2, 3, 1]);
    assert_eq!(x.data()[7], 110.0 / 255.0);
    assert_eq!(parse_idx_labels(&idx_labels(&[3, 9]), 10).unwrap(), vec![3, 9]);

    let mut bad = bytes.clone();
    bad[3] = 1;
    assert!(matches!(parse_idx_images::<f64>(&bad), Err(Error::Format(_))));
    assert!(matches!(parse_idx_images::<f64>(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
    assert!(matches!(parse_idx_images::<f64>(&bytes[..6]), Err(Error::Format(_))));
    assert!(matches!(parse_idx_labels(&idx_labels(&[3, 10]), 10), Err(Error::Dataset(_))));
}

#[test]
fn cifar_record_layout() {
    let mut rec = vec![7u8];
    for c in 0..3u8 {
        for p in 0..1024usize {
            rec.push(((p % 50) as u8).wrapping_add(c * 80));
        }
    }
    let (x, y) = parse_cifar_batch::<f64>(&rec).unwrap();
    assert_eq!(y, vec![7]);
    assert_eq!(x.shape(), &[1, 32, 32, 3]);
    // Pixel (row 1, col 2) is plane offset 34.
    let at = (32 + 2) * 3;
    assert_eq!(&x.data()[at..at + 3], &[34.0 / 255.0, 114.0 / 255.0, 194.0 / 255.0]);
    assert!(matches!(parse_cifar_batch::<f64>(&rec[..100]), Err(Error::Format(_))));
    rec[0] = 10;
    assert!(matches!(parse_cifar_batch::<f64>(&rec), Err(Error::Dataset(_))));
}

fn synthetic_mnist(n: usize) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
    // Pixel 0 encodes the image index.
    fs::write(dir.path().join("train-images-idx3-ubyte"), idx_images(n, 4, 4, |i, p| if p == 0 { i as u8 } else { 0 })).unwrap();
    fs::write(dir.path().join("train-labels-idx1-ubyte"), idx_labels(&labels)).unwrap();
    fs::write(dir.path().join("t10k-images-idx3-ubyte"), idx_images(10, 4, 4, |_, _| 1)).unwrap();
    fs::write(dir.path().join("t10k-labels-idx1-ubyte"), idx_labels(&labels[..10])).unwrap();
    dir
}

fn ids(split: &Split<f64>) -> Vec<usize> {
    (0..split.len()).map(|i| (split.images.data()[i * 16] * 255.0).round() as usize).collect()
}

#[test]
fn validation_split_is_seeded_disjoint_and_exhaustive() {
    let dir = synthetic_mnist(100);
    let opts = LoadOptions { validation: 0.2, seed: 4 };
    let d = load_mnist::<f64>(dir.path(), &opts).unwrap();
    let val = d.val.as_ref().unwrap();
    assert_eq!((d.train.len(), val.len(), d.test.len()), (80, 20, 10));
    let (t, v): (BTreeSet<usize>, BTreeSet<usize>) = (ids(&d.train).into_iter().collect(), ids(val).into_iter().collect());
    assert!(t.is_disjoint(&v));
    assert_eq!(t.union(&v).count(), 100);
    for (i, &id) in ids(&d.train).iter().enumerate() {
        assert_eq!(d.train.labels[i], id % 10);
    }
    assert_eq!(load_mnist::<f64>(dir.path(), &opts).unwrap(), d);
    let other = load_mnist::<f64>(dir.path(), &LoadOptions { validation: 0.2, seed: 5 }).unwrap();
    assert_ne!(ids(other.val.as_ref().unwrap()), ids(val));
    assert!(load_mnist::<f64>(dir.path(), &LoadOptions { validation: 1.0, seed: 0 }).is_err());
    let e = load_mnist::<f64>(dir.path().join("missing"), &opts).unwrap_err();
    assert!(matches!(e, Error::Io { .. }) && e.exit_code() == 2);
}

#[test]
fn subsample_rules() {
    let dir = synthetic_mnist(100);
    let d = load_mnist::<f64>(dir.path(), &LoadOptions::default()).unwrap();
    assert_eq!(subsample(d.clone(), 100, 1).unwrap(), d);
    let s = subsample(d.clone(), 10, 1).unwrap();
    let mut labels = s.train.labels.clone();
    labels.sort_unstable();
    assert_eq!(labels, (0..10).collect::<Vec<_>>());
    let a: BTreeSet<usize> = ids(&subsample(d.clone(), 30, 1).unwrap().train).into_iter().collect();
    let b: BTreeSet<usize> = ids(&subsample(d.clone(), 30, 2).unwrap().train).into_iter().collect();
    assert_ne!(a, b);
    assert!(a.intersection(&b).count() < 30);
    assert_eq!(subsample(d.clone(), 33, 1).unwrap().train.len(), 33);
    assert!(subsample(d.clone(), 0, 1).is_err());
    assert!(subsample(d, 101, 1).is_err());
}

#[test]
fn augmentation() {
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::<f64>::from_fn(&[3, 32, 32, 3], |i| 1.0 + i as f64);
    assert_eq!(augment(&x, Augmentation::None, &mut r).unwrap(), x);
    let a = augment(&x, Augmentation::Pad4Crop32Hflip, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = augment(&x, Augmentation::Pad4Crop32Hflip, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, x);
    // Every output pixel is a zero pad pixel or a pixel of the same image.
    for i in 0..3 {
        let src: Vec<&[f64]> = x.data()[i * 3072..(i + 1) * 3072].chunks(3).collect();
        for px in a.data()[i * 3072..(i + 1) * 3072].chunks(3) {
            assert!(px == [0.0, 0.0, 0.0] || src.contains(&px), "{px:?}");
        }
    }
    assert!(augment(&Tensor::<f64>::zeros(&[1, 28, 28, 1]), Augmentation::Pad4Crop32Hflip, &mut r).is_err());
    assert_eq!("pad4-crop32-hflip".parse::<Augmentation>().unwrap(), Augmentation::Pad4Crop32Hflip);
    assert!("flip".parse::<Augmentation>().is_err());
}

#[test]
fn real_mnist() {
    let Some(root) = data_root().filter(|r| r.join("mnist").exists()) else {
        eprintln!("skipped: MNIST files not found (set PCN_DATA_DIR)");
        return;
    };
    let d = load_mnist::<f32>(root.join("mnist"), &LoadOptions::default()).unwrap();
    assert_eq!((d.train.len(), d.test.len()), (60_000, 10_000));
    assert_eq!(d.train.image_shape(), &[28, 28, 1]);
    // Raw bytes read directly: labels start at offset 8, pixels at 16.
    let raw_labels = fs::read(root.join("mnist/train-labels-idx1-ubyte")).unwrap();
    assert_eq!(raw_labels[8], 5);
    assert_eq!(d.train.labels[0], 5);
    assert!(d.train.labels.iter().zip(&raw_labels[8..]).all(|(&a, &b)| a == b as usize));
    let raw_images = fs::read(root.join("mnist/t10k-images-idx3-ubyte")).unwrap();
    let k = 784 * 17 + 300;
    assert_eq!(d.test.images.data()[k], raw_images[16 + k] as f32 / 255.0);
    assert!(d.train.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
}

#[test]
fn real_cifar10() {
    let Some(root) = data_root().filter(|r| r.join("cifar-10-batches-bin").exists()) else {
        eprintln!("skipped: CIFAR-10 files not found (set PCN_DATA_DIR)");
        return;
    };
    let d = load_dataset::<f32>("cifar10", &root, &LoadOptions::default()).unwrap();
    assert_eq!((d.train.len(), d.test.len(), d.classes), (50_000, 10_000, 10));
    let labels: BTreeSet<usize> = d.train.labels.iter().copied().collect();
    assert_eq!(labels.len(), 10);
    let (mut sum, mut sq) = ([0.0f64; 3], [0.0f64; 3]);
    for px in d.train.images.data().chunks(3) {
        for c in 0..3 {
            sum[c] += px[c] as f64;
            sq[c] += (px[c] as f64).powi(2);
        }
    }
    let n = (d.train.len() * 1024) as f64;
    for c in 0..3 {
        let mean = sum[c] / n;
        let std = (sq[c] / n - mean * mean).sqrt();
        assert!(mean.abs() < 1e-5, "channel {c} mean {mean}");
        assert!((std - 1.0).abs() < 1e-4, "channel {c} std {std}");
    }
}
