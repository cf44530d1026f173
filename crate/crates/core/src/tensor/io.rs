//! Binary tensor format.
//!
//! ```text
//! "PCNT"            4 bytes magic
//! version           u16 LE (currently 1)
//! dtype             u8     (0 = f32, 1 = f64)
//! rank              u8
//! extents           rank × u64 LE
//! data              numel × scalar LE, row-major
//! ```

use std::fs;
use std::path::Path;

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 4] = b"PCNT";
pub const TENSOR_VERSION: u16 = 1;

pub fn encode<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.reserve(t.numel() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn to_bytes<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::new();
    encode(t, &mut out);
    out
}

/// Decodes one tensor from the front of `bytes`, returning it with the
/// number of bytes consumed.
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    let need = |n: usize, what: &str| {
        if bytes.len() < n {
            Err(Error::format(format!("tensor truncated while reading {what}")))
        } else {
            Ok(())
        }
    };
    need(8, "header")?;
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::format("bad tensor magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != TENSOR_VERSION {
        return Err(Error::format(format!("unsupported tensor version {version}")));
    }
    let dtype = DType::from_code(bytes[6]).ok_or_else(|| Error::format(format!("unknown dtype code {}", bytes[6])))?;
    if dtype != T::DTYPE {
        return Err(Error::format(format!("tensor stored as {dtype:?}, requested {:?}", T::DTYPE)));
    }
    let rank = bytes[7] as usize;
    let mut pos = 8;
    need(pos + 8 * rank, "extents")?;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[pos..pos + 8]);
        let d = u64::from_le_bytes(b);
        shape.push(usize::try_from(d).map_err(|_| Error::format("extent overflows usize"))?);
        pos += 8;
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("tensor size overflows"))?;
    let width = dtype.size();
    need(pos + numel * width, "data")?;
    let data = bytes[pos..pos + numel * width].chunks_exact(width).map(T::read_le).collect();
    pos += numel * width;
    Ok((Tensor::new(shape, data).map_err(|e| Error::format(e.to_string()))?, pos))
}

pub fn from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let (t, used) = decode(bytes)?;
    if used != bytes.len() {
        return Err(Error::format(format!("{} trailing bytes after tensor", bytes.len() - used)));
    }
    Ok(t)
}

pub fn save<T: Scalar>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path.as_ref(), to_bytes(t)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let bytes = fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
    from_bytes(&bytes)
}
