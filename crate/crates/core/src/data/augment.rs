use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Augmentation {
    #[default]
    None,
    /// Zero-pad 4 pixels per side, take a random 32×32 crop, flip
    /// horizontally with probability one half.
    Pad4Crop32Hflip,
}

impl fmt::Display for Augmentation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Augmentation::None => "none",
            Augmentation::Pad4Crop32Hflip => "pad4-crop32-hflip",
        })
    }
}

impl FromStr for Augmentation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Augmentation::None),
            "pad4-crop32-hflip" => Ok(Augmentation::Pad4Crop32Hflip),
            _ => Err(Error::config(format!(
                "unknown augmentation '{s}' (expected none or pad4-crop32-hflip)"
            ))),
        }
    }
}

impl TryFrom<String> for Augmentation {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Augmentation> for String {
    fn from(a: Augmentation) -> String {
        a.to_string()
    }
}

/// Applies `policy` to an `N×h×w×c` batch.
pub fn augment<T: Scalar>(batch: &Tensor<T>, policy: Augmentation, rng: &mut impl Rng) -> Result<Tensor<T>> {
    match policy {
        Augmentation::None => Ok(batch.clone()),
        Augmentation::Pad4Crop32Hflip => {
            let &[n, h, w, c] = batch.shape() else {
                return Err(Error::shape(format!("augmentation needs an N×h×w×c batch, got {:?}", batch.shape())));
            };
            if h != 32 || w != 32 {
                return Err(Error::config(format!("pad4-crop32-hflip needs 32×32 images, got {h}×{w}")));
            }
            let mut out = vec![T::zero(); batch.numel()];
            let src = batch.data();
            for i in 0..n {
                let dy = rng.random_range(0..=8) as isize - 4;
                let dx = rng.random_range(0..=8) as isize - 4;
                let flip = rng.random_bool(0.5);
                let base = i * h * w * c;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let cx = if flip { w - 1 - x } else { x };
                        let sx = cx as isize + dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let s = base + (sy as usize * w + sx as usize) * c;
                        let d = base + (y * w + x) * c;
                        out[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
            Tensor::new(batch.shape().to_vec(), out)
        }
    }
}
