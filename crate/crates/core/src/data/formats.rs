//! Byte layouts of the dataset files.
//!
//! IDX (MNIST): big-endian u32 magic `0x00000803` for images or
//! `0x00000801` for labels, then one big-endian u32 per dimension
//! (`N, rows, cols` or `N`), then unsigned bytes in row-major order.
//!
//! CIFAR-10 binary: records of 3073 bytes, one label byte followed by the
//! 1024 red, 1024 green and 1024 blue bytes of a 32×32 image, each plane
//! row-major.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 1024;

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::format("IDX header truncated"))
}

fn idx_payload(bytes: &[u8], magic: u32, dims: usize) -> Result<(Vec<usize>, &[u8])> {
    let found = be_u32(bytes, 0)?;
    if found != magic {
        return Err(Error::format(format!("IDX magic {found:#010x}, expected {magic:#010x}")));
    }
    let shape = (0..dims)
        .map(|d| be_u32(bytes, 4 + 4 * d).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let body = &bytes[4 + 4 * dims..];
    let expect: usize = shape.iter().product();
    if body.len() != expect {
        return Err(Error::format(format!(
            "IDX payload has {} bytes, header promises {expect}",
            body.len()
        )));
    }
    Ok((shape, body))
}

/// `N×rows×cols×1` images scaled to `[0, 1]`.
pub fn parse_idx_images<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let (shape, body) = idx_payload(bytes, IDX_IMAGES, 3)?;
    let data = body.iter().map(|&b| T::from_f64_lossy(b as f64 / 255.0)).collect();
    Tensor::new(vec![shape[0], shape[1], shape[2], 1], data)
}

pub fn parse_idx_labels(bytes: &[u8], classes: usize) -> Result<Vec<usize>> {
    let (_, body) = idx_payload(bytes, IDX_LABELS, 1)?;
    check_labels(body.iter().map(|&b| b as usize).collect(), classes)
}

fn check_labels(labels: Vec<usize>, classes: usize) -> Result<Vec<usize>> {
    if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::dataset(format!("label {l} at index {i} outside [0, {classes})")));
    }
    Ok(labels)
}

/// Images as `N×32×32×3` in `[0, 1]`, and labels.
pub fn parse_cifar_batch<T: Scalar>(bytes: &[u8]) -> Result<(Tensor<T>, Vec<usize>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(Error::format(format!(
            "CIFAR batch of {} bytes is not a whole number of {CIFAR_RECORD_BYTES}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut data = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        labels.push(rec[0] as usize);
        let planes = &rec[1..];
        for p in 0..1024 {
            for c in 0..3 {
                data.push(T::from_f64_lossy(planes[c * 1024 + p] as f64 / 255.0));
            }
        }
    }
    Ok((Tensor::new(vec![n, 32, 32, 3], data)?, check_labels(labels, 10)?))
}
