mod common;

use common::*;
use pcn::tensor::{self, conv2d, global_avg_pool, matmul, maxpool2, sym_eigh, Padding};
use pcn::Tensor;
use proptest::prelude::*;

#[test]
fn matmul_matches_triple_loop() {
    let mut r = rng(1);
    let a = uniform_vec(&mut r, 35, -2.0, 2.0);
    let b = uniform_vec(&mut r, 15, -2.0, 2.0);
    let want = naive_matmul(&a, &b, 7, 5, 3);
    let got = matmul(
        &Tensor::new(vec![7, 5], a).unwrap(),
        &Tensor::new(vec![5, 3], b).unwrap(),
    )
    .unwrap();
    for (g, w) in got.data().iter().zip(&want) {
        assert!((g - w).abs() <= 1e-12);
    }
}

#[test]
fn matmul_large_ragged_matches_triple_loop() {
    let mut r = rng(2);
    let (p, q, k) = (37, 41, 53);
    let a = uniform_vec(&mut r, p * q, -1.0, 1.0);
    let b = uniform_vec(&mut r, q * k, -1.0, 1.0);
    let want = naive_matmul(&a, &b, p, q, k);
    let got = matmul(
        &Tensor::new(vec![p, q], a).unwrap(),
        &Tensor::new(vec![q, k], b).unwrap(),
    )
    .unwrap();
    // Same summation order as the oracle: exact.
    assert_eq!(got.data(), want.as_slice());
}

#[test]
fn conv_same_stride2_matches_direct_summation() {
    let mut r = rng(3);
    let x = uniform_vec(&mut r, 5 * 5 * 2, -1.0, 1.0);
    let k = uniform_vec(&mut r, 3 * 3 * 2 * 3, -1.0, 1.0);
    let pad = [0.7, -1.3];
    let (want, oh, ow) = direct_conv(&x, (5, 5, 2), &k, (3, 3, 3), 2, Some(&pad));
    let got = conv2d(
        &Tensor::new(vec![5, 5, 2], x).unwrap(),
        &Tensor::new(vec![3, 3, 2, 3], k).unwrap(),
        2,
        Padding::Same(&pad),
    )
    .unwrap();
    assert_eq!(got.shape(), &[oh, ow, 3]);
    assert_eq!((oh, ow), (3, 3));
    for (g, w) in got.data().iter().zip(&want) {
        assert!((g - w).abs() <= 1e-12, "{g} vs {w}");
    }
}

#[test]
fn conv_valid_matches_direct_summation() {
    let mut r = rng(4);
    let x = uniform_vec(&mut r, 7 * 6 * 3, -1.0, 1.0);
    let k = uniform_vec(&mut r, 3 * 2 * 3 * 4, -1.0, 1.0);
    let (want, oh, ow) = direct_conv(&x, (7, 6, 3), &k, (3, 2, 4), 2, None);
    let got = conv2d(
        &Tensor::new(vec![7, 6, 3], x).unwrap(),
        &Tensor::new(vec![3, 2, 3, 4], k).unwrap(),
        2,
        Padding::Valid,
    )
    .unwrap();
    assert_eq!(got.shape(), &[oh, ow, 4]);
    for (g, w) in got.data().iter().zip(&want) {
        assert!((g - w).abs() <= 1e-12);
    }
}

#[test]
fn pooling_matches_loop_oracle() {
    let mut r = rng(5);
    let x = uniform_vec(&mut r, 6 * 6 * 3, -1.0, 1.0);
    let t = Tensor::new(vec![6, 6, 3], x.clone()).unwrap();
    let mp = maxpool2(&t).unwrap();
    let ap = global_avg_pool(&t).unwrap();
    for oy in 0..3 {
        for ox in 0..3 {
            for c in 0..3 {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        best = best.max(x[((2 * oy + dy) * 6 + 2 * ox + dx) * 3 + c]);
                    }
                }
                assert_eq!(mp.data()[(oy * 3 + ox) * 3 + c], best);
            }
        }
    }
    for c in 0..3 {
        let mean = (0..36).map(|p| x[p * 3 + c]).sum::<f64>() / 36.0;
        assert!((ap.data()[c] - mean).abs() < 1e-15);
    }
}

#[test]
fn eigh_matches_jacobi_on_random_10x10() {
    let mut r = rng(6);
    let a = random_symmetric(&mut r, 10);
    let (jv, jvec) = jacobi_eigh(&a, 10);
    let res = sym_eigh(&Tensor::new(vec![10, 10], a).unwrap()).unwrap();
    for j in 0..10 {
        assert!((res.eigenvalues[j] - jv[j]).abs() < 1e-9);
        let dot: f64 = (0..10).map(|i| res.eigenvectors.at2(i, j) * jvec[i * 10 + j]).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-7);
    }
}

fn check_decomposition(a: &[f64], n: usize) {
    let m = Tensor::new(vec![n, n], a.to_vec()).unwrap();
    let res = sym_eigh(&m).unwrap();
    let norm = m.frobenius();
    let v = &res.eigenvectors;
    // residual and orthonormality
    for j in 0..n {
        let mut resid = 0.0;
        for i in 0..n {
            let mv: f64 = (0..n).map(|k| a[i * n + k] * v.at2(k, j)).sum();
            resid += (mv - res.eigenvalues[j] * v.at2(i, j)).powi(2);
        }
        assert!(resid.sqrt() <= 1e-8 * norm.max(1e-300));
        for k in 0..n {
            let d: f64 = (0..n).map(|i| v.at2(i, j) * v.at2(i, k)).sum();
            let want = if j == k { 1.0 } else { 0.0 };
            assert!((d - want).abs() < 1e-8);
        }
    }
    // V diag(e) Vᵀ = M
    for i in 0..n {
        for k in 0..n {
            let s: f64 = (0..n).map(|j| v.at2(i, j) * res.eigenvalues[j] * v.at2(k, j)).sum();
            assert!((s - a[i * n + k]).abs() <= 1e-8 * norm.max(1e-300));
        }
    }
    for w in res.eigenvalues.windows(2) {
        assert!(w[0] >= w[1]);
    }
    // sign convention
    for j in 0..n {
        let col = v.column(j);
        let mut best = 0;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[best].abs() {
                best = i;
            }
        }
        assert!(col[best] > 0.0);
    }
}

#[test]
fn eigh_reconstruction_on_structured_matrices() {
    let mut r = rng(7);
    for n in [1, 2, 3, 8, 31] {
        check_decomposition(&random_symmetric(&mut r, n), n);
    }
    // Rank-deficient PSD matrix with repeated zero eigenvalues.
    let n = 12;
    let x = uniform_vec(&mut r, 3 * n, -1.0, 1.0);
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            g[i * n + j] = (0..3).map(|k| x[k * n + i] * x[k * n + j]).sum();
        }
    }
    check_decomposition(&g, n);
    // Diagonal with repeats.
    let mut d = vec![0.0; 16];
    for (i, v) in [2.0, 2.0, -1.0, 5.0].iter().enumerate() {
        d[i * 4 + i] = *v;
    }
    check_decomposition(&d, 4);
}

#[test]
fn eigh_is_deterministic() {
    let mut r = rng(8);
    let a = Tensor::new(vec![20, 20], random_symmetric(&mut r, 20)).unwrap();
    let x = sym_eigh(&a).unwrap();
    let y = sym_eigh(&a).unwrap();
    assert_eq!(x, y);
}

proptest! {
    #[test]
    fn same_zero_padding_equals_explicit_zero_pad(
        h in 3usize..7, w in 3usize..7, m in 1usize..3, n in 1usize..3,
        stride in 1usize..3, seed in any::<u64>()
    ) {
        let mut r = rng(seed);
        let x = uniform_vec(&mut r, h * w * m, -1.0, 1.0);
        let k = uniform_vec(&mut r, 9 * m * n, -1.0, 1.0);
        let zeros = vec![0.0; m];
        let kt = Tensor::new(vec![3, 3, m, n], k).unwrap();
        let same = conv2d(&Tensor::new(vec![h, w, m], x.clone()).unwrap(), &kt, stride, Padding::Same(&zeros)).unwrap();
        let oh = h.div_ceil(stride);
        let ow = w.div_ceil(stride);
        let th = ((oh - 1) * stride + 3).saturating_sub(h);
        let tw = ((ow - 1) * stride + 3).saturating_sub(w);
        let (ph, pw) = (h + th, w + tw);
        let mut padded = vec![0.0; ph * pw * m];
        for y in 0..h {
            for xx in 0..w {
                for c in 0..m {
                    padded[((y + th / 2) * pw + xx + tw / 2) * m + c] = x[(y * w + xx) * m + c];
                }
            }
        }
        let valid = conv2d(&Tensor::new(vec![ph, pw, m], padded).unwrap(), &kt, stride, Padding::Valid).unwrap();
        prop_assert_eq!(same.shape(), valid.shape());
        prop_assert!(same.max_abs_diff(&valid) <= 1e-12);
    }

    #[test]
    fn tensor_file_round_trip(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let mut r = rng(seed);
        let t = Tensor::new(shape, uniform_vec(&mut r, n, -1e3, 1e3)).unwrap();
        let bytes = tensor::io::to_bytes(&t);
        prop_assert_eq!(tensor::io::from_bytes::<f64>(&bytes).unwrap(), t.clone());
        let t32 = t.cast::<f32>();
        prop_assert_eq!(tensor::io::from_bytes::<f32>(&tensor::io::to_bytes(&t32)).unwrap(), t32);
    }
}
