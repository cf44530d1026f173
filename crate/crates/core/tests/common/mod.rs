//! Independent reference implementations used as test oracles. Nothing in
//! here calls into the library's numerical kernels.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Plain triple loop, row-major.
pub fn naive_matmul(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut c = vec![0.0; p * r];
    for i in 0..p {
        for j in 0..r {
            let mut s = 0.0;
            for k in 0..q {
                s += a[i * q + k] * b[k * r + j];
            }
            c[i * r + j] = s;
        }
    }
    c
}

/// Direct summation convolution of one h×w×m image with a k1×k2×m×n
/// kernel. `pad` is `None` for valid, `Some(values)` for TF-style same.
pub fn direct_conv(
    x: &[f64],
    (h, w, m): (usize, usize, usize),
    kernel: &[f64],
    (k1, k2, n): (usize, usize, usize),
    stride: usize,
    pad: Option<&[f64]>,
) -> (Vec<f64>, usize, usize) {
    let (oh, ow, pt, pl) = match pad {
        None => ((h - k1) / stride + 1, (w - k2) / stride + 1, 0isize, 0isize),
        Some(_) => {
            let oh = h.div_ceil(stride);
            let ow = w.div_ceil(stride);
            let th = ((oh - 1) * stride + k1).saturating_sub(h);
            let tw = ((ow - 1) * stride + k2).saturating_sub(w);
            (oh, ow, (th / 2) as isize, (tw / 2) as isize)
        }
    };
    let mut out = vec![0.0; oh * ow * n];
    for oy in 0..oh {
        for ox in 0..ow {
            for o in 0..n {
                let mut s = 0.0;
                for ky in 0..k1 {
                    for kx in 0..k2 {
                        for c in 0..m {
                            let y = (oy * stride + ky) as isize - pt;
                            let xx = (ox * stride + kx) as isize - pl;
                            let v = if y < 0 || xx < 0 || y >= h as isize || xx >= w as isize {
                                pad.map(|p| p[c]).unwrap_or(0.0)
                            } else {
                                x[((y as usize) * w + xx as usize) * m + c]
                            };
                            s += v * kernel[((ky * k2 + kx) * m + c) * n + o];
                        }
                    }
                }
                out[(oy * ow + ox) * n + o] = s;
            }
        }
    }
    (out, oh, ow)
}

/// Cyclic Jacobi eigensolver for symmetric matrices. Returns eigenvalues
/// sorted descending and eigenvectors as columns (row-major n×n), each
/// column normalised so its largest-magnitude entry is positive.
pub fn jacobi_eigh(a: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].partial_cmp(&a[i * n + i]).unwrap());
    let vals = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vecs = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        let mut best = 0;
        for r in 0..n {
            if v[r * n + src].abs() > v[best * n + src].abs() {
                best = r;
            }
        }
        let sign = if v[best * n + src] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            vecs[r * n + col] = sign * v[r * n + src];
        }
    }
    (vals, vecs)
}

pub fn random_symmetric(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let x = rng.random_range(-1.0..1.0);
            a[i * n + j] = x;
            a[j * n + i] = x;
        }
    }
    a
}

/// Sample variance with the N-1 denominator, computed directly.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}
