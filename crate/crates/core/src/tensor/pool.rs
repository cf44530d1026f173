use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Non-overlapping 2×2 max pooling over a batch of NHWC images. Returns the
/// pooled values and, per output element, the flat input index of the
/// winning pixel (first maximum in row-major window order).
pub(crate) fn maxpool2_batch<T: Scalar>(
    input: &[T],
    (batch, h, w, m): (usize, usize, usize, usize),
) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(batch * oh * ow * m);
    let mut arg = Vec::with_capacity(batch * oh * ow * m);
    for b in 0..batch {
        let base = b * h * w * m;
        for oy in 0..oh {
            for ox in 0..ow {
                for c in 0..m {
                    let mut best_idx = base + ((2 * oy) * w + 2 * ox) * m + c;
                    let mut best = input[best_idx];
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + ((2 * oy + dy) * w + 2 * ox + dx) * m + c;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                    out.push(best);
                    arg.push(best_idx as u32);
                }
            }
        }
    }
    (out, arg)
}

/// Channel means over the spatial extent of a batch of NHWC images.
pub(crate) fn global_avg_pool_batch<T: Scalar>(
    input: &[T],
    (batch, h, w, m): (usize, usize, usize, usize),
) -> Vec<T> {
    let mut out = vec![T::zero(); batch * m];
    let scale = T::from_usize(h * w).unwrap();
    for b in 0..batch {
        let acc = &mut out[b * m..(b + 1) * m];
        for p in 0..h * w {
            let px = &input[(b * h * w + p) * m..(b * h * w + p + 1) * m];
            for (a, &v) in acc.iter_mut().zip(px) {
                *a += v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= scale);
    }
    out
}

/// 2×2 max pooling of one `h×w×m` image.
pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, m) = match input.shape() {
        &[h, w, m] => (h, w, m),
        s => return Err(Error::shape(format!("maxpool2 expects h×w×m, got {s:?}"))),
    };
    if h < 2 || w < 2 {
        return Err(Error::shape(format!("spatial extent {h}×{w} smaller than the 2×2 window")));
    }
    let (out, _) = maxpool2_batch(input.data(), (1, h, w, m));
    Tensor::new(vec![h / 2, w / 2, m], out)
}

/// Per-channel mean of one `h×w×m` image.
pub fn global_avg_pool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, m) = match input.shape() {
        &[h, w, m] => (h, w, m),
        s => return Err(Error::shape(format!("global_avg_pool expects h×w×m, got {s:?}"))),
    };
    Tensor::new(vec![m], global_avg_pool_batch(input.data(), (1, h, w, m)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image() {
        let img = Tensor::<f64>::full(&[4, 6, 2], 1.5);
        assert!(maxpool2(&img).unwrap().data().iter().all(|&v| v == 1.5));
        assert_eq!(global_avg_pool(&img).unwrap().data(), &[1.5, 1.5]);
    }

    #[test]
    fn two_by_two() {
        let img = Tensor::<f64>::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2(&img).unwrap().data(), &[4.0]);
        assert_eq!(global_avg_pool(&img).unwrap().data(), &[2.5]);
    }

    #[test]
    fn too_small() {
        let img = Tensor::<f64>::zeros(&[1, 4, 1]);
        assert!(maxpool2(&img).is_err());
    }

    #[test]
    fn odd_extent_drops_last_row() {
        let img = Tensor::<f64>::from_fn(&[3, 3, 1], |i| i as f64);
        let out = maxpool2(&img).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[4.0]);
    }
}
