use super::{Scalar, Tensor};
use crate::error::{Error, Result};

const MR: usize = 4;
const NR: usize = 16;

/// `c = a · b` for row-major `a: p×q`, `b: q×r`, `c: p×r`.
///
/// Every output element is accumulated as `((0 + a0·b0) + a1·b1) + …` with
/// `k` ascending, whatever tile it falls in. Results therefore depend only on
/// the row of `a` and column of `b` involved, not on the other operands, and
/// are bitwise reproducible.
pub fn gemm<T: Scalar>(a: &[T], b: &[T], c: &mut [T], p: usize, q: usize, r: usize) {
    assert_eq!(a.len(), p * q);
    assert_eq!(b.len(), q * r);
    assert_eq!(c.len(), p * r);
    if q == 0 {
        c.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut j0 = 0;
    while j0 < r {
        let nr = NR.min(r - j0);
        let mut i0 = 0;
        while i0 < p {
            let mr = MR.min(p - i0);
            if mr == MR && nr == NR {
                tile_full(a, b, c, i0, j0, q, r);
            } else {
                tile_edge(a, b, c, i0, j0, mr, nr, q, r);
            }
            i0 += MR;
        }
        j0 += NR;
    }
}

#[inline(always)]
fn tile_full<T: Scalar>(a: &[T], b: &[T], c: &mut [T], i0: usize, j0: usize, q: usize, r: usize) {
    let mut acc = [[T::zero(); NR]; MR];
    let a0 = &a[i0 * q..(i0 + 1) * q];
    let a1 = &a[(i0 + 1) * q..(i0 + 2) * q];
    let a2 = &a[(i0 + 2) * q..(i0 + 3) * q];
    let a3 = &a[(i0 + 3) * q..(i0 + 4) * q];
    for k in 0..q {
        let brow: &[T; NR] = b[k * r + j0..k * r + j0 + NR].try_into().unwrap();
        let av = [a0[k], a1[k], a2[k], a3[k]];
        for ii in 0..MR {
            for jj in 0..NR {
                acc[ii][jj] += av[ii] * brow[jj];
            }
        }
    }
    for ii in 0..MR {
        c[(i0 + ii) * r + j0..(i0 + ii) * r + j0 + NR].copy_from_slice(&acc[ii]);
    }
}

#[allow(clippy::too_many_arguments)]
fn tile_edge<T: Scalar>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    i0: usize,
    j0: usize,
    mr: usize,
    nr: usize,
    q: usize,
    r: usize,
) {
    let mut acc = [[T::zero(); NR]; MR];
    for k in 0..q {
        let brow = &b[k * r + j0..k * r + j0 + nr];
        for ii in 0..mr {
            let av = a[(i0 + ii) * q + k];
            for jj in 0..nr {
                acc[ii][jj] += av * brow[jj];
            }
        }
    }
    for ii in 0..mr {
        c[(i0 + ii) * r + j0..(i0 + ii) * r + j0 + nr].copy_from_slice(&acc[ii][..nr]);
    }
}

/// Rows of `a` consumed per pass of [`gemm_tn`].
const KC: usize = 128;

/// `c = aᵀ · b` for row-major `a: q×p`, `b: q×r`, `c: p×r`, without
/// materializing `aᵀ`. Accumulation order matches [`gemm`] on the
/// transposed operand, so the two agree bitwise.
pub fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], p: usize, q: usize, r: usize) {
    c.iter_mut().for_each(|v| *v = T::zero());
    gemm_tn_acc(a, b, c, p, q, r);
}

/// `c += aᵀ · b`, continuing each element's running sum. Splitting the
/// rows of `a` and `b` over several calls gives the same bits as one call.
pub fn gemm_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], p: usize, q: usize, r: usize) {
    assert_eq!(a.len(), q * p);
    assert_eq!(b.len(), q * r);
    assert_eq!(c.len(), p * r);
    let mut k0 = 0;
    while k0 < q {
        let k1 = (k0 + KC).min(q);
        let mut i0 = 0;
        while i0 < p {
            let mr = MR.min(p - i0);
            let mut j0 = 0;
            while j0 < r {
                let nr = NR.min(r - j0);
                let mut acc = [[T::zero(); NR]; MR];
                for ii in 0..mr {
                    acc[ii][..nr].copy_from_slice(&c[(i0 + ii) * r + j0..(i0 + ii) * r + j0 + nr]);
                }
                if mr == MR && nr == NR {
                    for k in k0..k1 {
                        let av: &[T; MR] = a[k * p + i0..k * p + i0 + MR].try_into().unwrap();
                        let brow: &[T; NR] = b[k * r + j0..k * r + j0 + NR].try_into().unwrap();
                        for ii in 0..MR {
                            for jj in 0..NR {
                                acc[ii][jj] += av[ii] * brow[jj];
                            }
                        }
                    }
                } else {
                    for k in k0..k1 {
                        let brow = &b[k * r + j0..k * r + j0 + nr];
                        for ii in 0..mr {
                            let av = a[k * p + i0 + ii];
                            for jj in 0..nr {
                                acc[ii][jj] += av * brow[jj];
                            }
                        }
                    }
                }
                for ii in 0..mr {
                    c[(i0 + ii) * r + j0..(i0 + ii) * r + j0 + nr].copy_from_slice(&acc[ii][..nr]);
                }
                j0 += NR;
            }
            i0 += MR;
        }
        k0 = k1;
    }
}

/// Writes the transpose of row-major `src: p×q` into `dst: q×p`.
pub fn transpose_into<T: Copy>(src: &[T], dst: &mut [T], p: usize, q: usize) {
    const B: usize = 32;
    for i0 in (0..p).step_by(B) {
        for j0 in (0..q).step_by(B) {
            for i in i0..(i0 + B).min(p) {
                for j in j0..(j0 + B).min(q) {
                    dst[j * p + i] = src[i * q + j];
                }
            }
        }
    }
}

/// Matrix product of two rank-2 tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (p, q) = a.dims2()?;
    let (q2, r) = b.dims2()?;
    if q != q2 {
        return Err(Error::shape(format!(
            "matmul inner extents differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![T::zero(); p * r];
    gemm(a.data(), b.data(), &mut out, p, q, r);
    Tensor::new(vec![p, r], out)
}
