//! Symmetric eigendecomposition: Householder reduction to tridiagonal form
//! followed by implicit-shift QL iteration (EISPACK `tred2`/`tql2` lineage).

use super::Tensor;
use crate::error::{Error, Result};

/// Largest matrix accepted by the eigensolver.
pub const EIGEN_MAX_DIM: usize = 4096;

const SYMMETRY_TOL: f64 = 1e-9;
const CLAMP_REL: f64 = 1e-10;

/// Eigenvalues sorted descending, eigenvectors as matching columns.
///
/// Each eigenvector column is sign-fixed so that its entry of largest
/// magnitude is positive (ties go to the lowest index). Eigenvalues with
/// magnitude below `1e-10 · λ_max` are clamped to zero.
#[derive(Debug, Clone, PartialEq)]
pub struct SymEigResult {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Tensor<f64>,
}

fn prepare(m: &Tensor<f64>) -> Result<(usize, Vec<f64>)> {
    let (n, n2) = m.dims2()?;
    if n != n2 {
        return Err(Error::shape(format!("eigh needs a square matrix, got {n}x{n2}")));
    }
    if n > EIGEN_MAX_DIM {
        return Err(Error::shape(format!("eigh capped at {EIGEN_MAX_DIM}, got {n}")));
    }
    if !m.is_finite() {
        return Err(Error::numerical("eigh input contains non-finite entries"));
    }
    let scale = m.max_abs();
    let d = m.data();
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let (x, y) = (d[i * n + j], d[j * n + i]);
            if (x - y).abs() > SYMMETRY_TOL * scale {
                return Err(Error::numerical(format!(
                    "matrix not symmetric at ({i},{j}): {x} vs {y}"
                )));
            }
            a[i * n + j] = 0.5 * (x + y);
        }
    }
    Ok((n, a))
}

/// Full symmetric eigendecomposition.
pub fn sym_eigh(m: &Tensor<f64>) -> Result<SymEigResult> {
    let (n, mut v) = prepare(m)?;
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(n, &mut v, &mut d, &mut e, true);
    tql2(n, &mut d, &mut e, Some(&mut v))?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].total_cmp(&d[i]).then(i.cmp(&j)));
    let lmax = order.first().map(|&i| d[i].abs()).unwrap_or(0.0);
    let eigenvalues = order.iter().map(|&i| clamp(d[i], lmax)).collect();

    let mut vecs = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        let mut best = 0;
        for r in 1..n {
            if v[r * n + src].abs() > v[best * n + src].abs() {
                best = r;
            }
        }
        let sign = if v[best * n + src] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..n {
            vecs[r * n + col] = sign * v[r * n + src];
        }
    }
    Ok(SymEigResult {
        eigenvalues,
        eigenvectors: Tensor::new(vec![n, n], vecs)?,
    })
}

/// Eigenvalues only, sorted descending, same clamping as [`sym_eigh`].
/// Skips accumulating the orthogonal transforms, which dominates cost for
/// large matrices.
pub fn sym_eigvalsh(m: &Tensor<f64>) -> Result<Vec<f64>> {
    let (n, mut a) = prepare(m)?;
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(n, &mut a, &mut d, &mut e, false);
    tql2(n, &mut d, &mut e, None)?;
    d.sort_by(|x, y| y.total_cmp(x));
    let lmax = d.first().map(|x| x.abs()).unwrap_or(0.0);
    Ok(d.into_iter().map(|x| clamp(x, lmax)).collect())
}

fn clamp(x: f64, lmax: f64) -> f64 {
    if x.abs() < CLAMP_REL * lmax || lmax == 0.0 {
        0.0
    } else {
        x
    }
}

/// Householder tridiagonalisation of the row-major symmetric matrix in `v`.
/// On return `d` holds the diagonal and `e[1..]` the sub-diagonal; with
/// `vectors` the accumulated orthogonal transform overwrites `v`.
fn tred2(n: usize, v: &mut [f64], d: &mut [f64], e: &mut [f64], vectors: bool) {
    if n == 0 {
        return;
    }
    let idx = |r: usize, c: usize| r * n + c;
    for j in 0..n {
        d[j] = v[idx(n - 1, j)];
    }

    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for &dk in &d[..i] {
            scale += dk.abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[idx(i - 1, j)];
                v[idx(i, j)] = 0.0;
                v[idx(j, i)] = 0.0;
            }
        } else {
            for dk in &mut d[..i] {
                *dk /= scale;
                h += *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in &mut e[..i] {
                *ej = 0.0;
            }

            for j in 0..i {
                f = d[j];
                v[idx(j, i)] = f;
                g = e[j] + v[idx(j, j)] * f;
                for k in (j + 1)..i {
                    g += v[idx(k, j)] * d[k];
                    e[k] += v[idx(k, j)] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[idx(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[idx(i - 1, j)];
                v[idx(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }

    if vectors {
        for i in 0..n - 1 {
            v[idx(n - 1, i)] = v[idx(i, i)];
            v[idx(i, i)] = 1.0;
            let h = d[i + 1];
            if h != 0.0 {
                for k in 0..=i {
                    d[k] = v[idx(k, i + 1)] / h;
                }
                for j in 0..=i {
                    let mut g = 0.0;
                    for k in 0..=i {
                        g += v[idx(k, i + 1)] * v[idx(k, j)];
                    }
                    for k in 0..=i {
                        v[idx(k, j)] -= g * d[k];
                    }
                }
            }
            for k in 0..=i {
                v[idx(k, i + 1)] = 0.0;
            }
        }
        for j in 0..n {
            d[j] = v[idx(n - 1, j)];
            v[idx(n - 1, j)] = 0.0;
        }
        v[idx(n - 1, n - 1)] = 1.0;
    } else {
        // Diagonal of the reduced matrix without forming the transform.
        for i in 0..n {
            d[i] = v[idx(i, i)];
        }
    }
    e[0] = 0.0;
}

/// Implicit-shift QL on the tridiagonal `(d, e)`; rotations are applied to
/// `v` when given. Fails after `30·n` total iterations.
fn tql2(n: usize, d: &mut [f64], e: &mut [f64], mut v: Option<&mut [f64]>) -> Result<()> {
    if n == 0 {
        return Ok(());
    }
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;

    let budget = 30 * n.max(1);
    let mut iterations = 0usize;
    let mut f = 0.0;
    let mut tst1: f64 = 0.0;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m == n {
            m = n - 1;
        }

        if m > l {
            loop {
                iterations += 1;
                if iterations > budget {
                    return Err(Error::numerical(format!(
                        "QL iteration did not converge within {budget} iterations (n = {n})"
                    )));
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in &mut d[l + 2..n] {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    if let Some(v) = v.as_deref_mut() {
                        for k in 0..n {
                            let vk1 = v[k * n + i + 1];
                            let vk = v[k * n + i];
                            v[k * n + i + 1] = s * vk + c * vk1;
                            v[k * n + i] = c * vk - s * vk1;
                        }
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    if d.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("eigenvalues became non-finite"));
    }
    Ok(())
}
