//! PCA of activation spaces.

use log::warn;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, sym_eigh, sym_eigvalsh, transpose_into, Scalar, Tensor, EIGEN_MAX_DIM};

/// Default number of activation vectors per dense layer.
pub const DENSE_SAMPLE_BUDGET: usize = 5_000;
/// Cap on flattened pixel vectors per convolution layer.
pub const CONV_SAMPLE_CAP: usize = 200_000;

/// Mean, variances and principal directions of a sample matrix.
///
/// `components` holds the leading `r ≤ m` principal directions as columns.
/// Usually `r = m`; when the sample count is below the dimension, only the
/// directions with non-zero variance are stored and the remaining variances
/// are exactly zero. `retained` is the truncation `m_e` once chosen.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// Length `m`, descending, non-negative.
    pub variances: Vec<f64>,
    /// `m×r`
    pub components: Tensor<f64>,
    pub retained: Option<usize>,
    pub sample_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Truncation {
    /// Keep exactly this many directions.
    Fixed(usize),
    /// Keep directions with variance above this threshold, at least one.
    Threshold(f64),
}

impl PcaBasis {
    /// Assembles a basis from known parts, checking shapes and ordering.
    pub fn from_parts(mean: Vec<f64>, variances: Vec<f64>, components: Tensor<f64>, sample_count: usize) -> Result<Self> {
        let (m, r) = components.dims2()?;
        if mean.len() != m || variances.len() != m || r > m {
            return Err(Error::shape(format!(
                "basis parts disagree: mean {}, variances {}, components {m}×{r}",
                mean.len(),
                variances.len()
            )));
        }
        check_sorted(&variances)?;
        Ok(Self {
            mean,
            variances,
            components,
            retained: None,
            sample_count,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Number of stored principal directions.
    pub fn stored(&self) -> usize {
        self.components.shape()[1]
    }

    /// Truncated basis `U = V[:, ..m_e]`.
    pub fn u(&self) -> Result<Tensor<f64>> {
        let me = self
            .retained
            .ok_or_else(|| Error::config("basis has not been truncated"))?;
        self.components.select_columns(&(0..me).collect::<Vec<_>>())
    }

    pub fn mean_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(vec![self.dim()], self.mean.iter().map(|&v| T::from_f64_lossy(v)).collect())
            .expect("non-empty mean")
    }
}

fn check_sorted(e: &[f64]) -> Result<()> {
    if e.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::config("variances must be sorted in descending order"));
    }
    Ok(())
}

/// Column means and centred copy of an `N×m` sample matrix, in f64.
fn centre<T: Scalar>(samples: &Tensor<T>) -> Result<(usize, usize, Vec<f64>, Vec<f64>)> {
    let (n, m) = samples.dims2()?;
    if n < 2 {
        return Err(Error::dataset(format!("PCA needs at least 2 samples, got {n}")));
    }
    samples.ensure_finite("PCA samples")?;
    let mut mean = vec![0.0; m];
    for row in samples.data().chunks_exact(m) {
        for (s, v) in mean.iter_mut().zip(row) {
            *s += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|s| *s /= n as f64);
    let mut xc = Vec::with_capacity(n * m);
    for row in samples.data().chunks_exact(m) {
        xc.extend(row.iter().zip(&mean).map(|(v, mu)| v.as_f64() - mu));
    }
    Ok((n, m, mean, xc))
}

/// `XcᵀXc/(N−1)`, `m×m`.
fn covariance(xc: &[f64], n: usize, m: usize) -> Tensor<f64> {
    let mut xt = vec![0.0; n * m];
    transpose_into(xc, &mut xt, n, m);
    let mut c = vec![0.0; m * m];
    gemm(&xt, xc, &mut c, m, n, m);
    let scale = 1.0 / (n - 1) as f64;
    c.iter_mut().for_each(|v| *v *= scale);
    Tensor::new(vec![m, m], c).expect("non-empty covariance")
}

/// `XcXcᵀ/(N−1)`, `N×N`; shares its non-zero spectrum with the covariance.
fn gram(xc: &[f64], n: usize, m: usize) -> Tensor<f64> {
    let mut xt = vec![0.0; n * m];
    transpose_into(xc, &mut xt, n, m);
    let mut g = vec![0.0; n * n];
    gemm(xc, &xt, &mut g, n, m, n);
    let scale = 1.0 / (n - 1) as f64;
    g.iter_mut().for_each(|v| *v *= scale);
    Tensor::new(vec![n, n], g).expect("non-empty gram matrix")
}

fn too_large(n: usize, m: usize) -> Error {
    Error::config(format!(
        "PCA of {n} samples in {m} dimensions exceeds the {EIGEN_MAX_DIM}-dimensional eigensolver limit; \
         use at most {EIGEN_MAX_DIM} samples"
    ))
}

/// Fits PCA to an `N×m` sample matrix: column means, covariance with the
/// `N − 1` denominator, and its eigendecomposition sorted by variance.
pub fn fit_pca<T: Scalar>(samples: &Tensor<T>) -> Result<PcaBasis> {
    let (n, m, mean, xc) = centre(samples)?;
    if m <= EIGEN_MAX_DIM {
        let eig = sym_eigh(&covariance(&xc, n, m))?;
        return PcaBasis::from_parts(mean, eig.eigenvalues, eig.eigenvectors, n);
    }
    if n > EIGEN_MAX_DIM {
        return Err(too_large(n, m));
    }
    // Dual route: eigenvectors a of the Gram matrix map to v = Xcᵀa/√(λ(N−1)).
    let eig = sym_eigh(&gram(&xc, n, m))?;
    let r = eig.eigenvalues.iter().take_while(|&&l| l > 0.0).count();
    let mut a = vec![0.0; n * r];
    for i in 0..n {
        for j in 0..r {
            a[i * r + j] = eig.eigenvectors.at2(i, j) / (eig.eigenvalues[j] * (n - 1) as f64).sqrt();
        }
    }
    let mut xt = vec![0.0; n * m];
    transpose_into(&xc, &mut xt, n, m);
    let mut comps = vec![0.0; m * r];
    gemm(&xt, &a, &mut comps, m, n, r);
    for j in 0..r {
        sign_fix_column(&mut comps, m, r, j);
    }
    let mut variances = vec![0.0; m];
    variances[..r].copy_from_slice(&eig.eigenvalues[..r]);
    if r == 0 {
        // Constant samples: fall back to the first coordinate axis.
        comps = vec![0.0; m];
        comps[0] = 1.0;
        return PcaBasis::from_parts(mean, variances, Tensor::new(vec![m, 1], comps)?, n);
    }
    PcaBasis::from_parts(mean, variances, Tensor::new(vec![m, r], comps)?, n)
}

fn sign_fix_column(v: &mut [f64], m: usize, r: usize, j: usize) {
    let mut best = 0;
    for i in 1..m {
        if v[i * r + j].abs() > v[best * r + j].abs() {
            best = i;
        }
    }
    if v[best * r + j] < 0.0 {
        for i in 0..m {
            v[i * r + j] = -v[i * r + j];
        }
    }
}

/// Variances only, for cheap per-epoch traces.
pub fn fit_variances<T: Scalar>(samples: &Tensor<T>) -> Result<Vec<f64>> {
    let (n, m, _, xc) = centre(samples)?;
    if m <= EIGEN_MAX_DIM && m <= n {
        return sym_eigvalsh(&covariance(&xc, n, m));
    }
    if n > EIGEN_MAX_DIM {
        return Err(too_large(n, m));
    }
    let mut e = sym_eigvalsh(&gram(&xc, n, m))?;
    e.iter_mut().for_each(|v| *v = v.max(0.0));
    e.resize(m, 0.0);
    Ok(e)
}

/// Number of variances strictly greater than `tau`.
pub fn effective_dim(e: &[f64], tau: f64) -> Result<usize> {
    if !(tau >= 0.0) {
        return Err(Error::config(format!("variance threshold must be non-negative, got {tau}")));
    }
    check_sorted(e)?;
    Ok(e.iter().take_while(|&&v| v > tau).count())
}

/// Chooses `m_e` and records it on a copy of the basis.
pub fn truncate(basis: &PcaBasis, config: Truncation) -> Result<PcaBasis> {
    let m = basis.dim();
    let me = match config {
        Truncation::Fixed(k) => {
            if k == 0 || k > m {
                return Err(Error::config(format!("effective dimension {k} outside [1, {m}]")));
            }
            k
        }
        Truncation::Threshold(tau) => {
            let k = effective_dim(&basis.variances, tau)?;
            if k == 0 {
                warn!("no direction has variance above {tau}; keeping one");
            }
            k.max(1)
        }
    };
    if me > basis.stored() {
        return Err(Error::config(format!(
            "{me} directions requested but only {} have non-zero variance in {} samples",
            basis.stored(),
            basis.sample_count
        )));
    }
    let mut out = basis.clone();
    out.retained = Some(me);
    Ok(out)
}

/// `N×h×w×m → (N·h·w)×m`, image-major then row-major over pixels.
pub fn flatten_image_batch<T: Scalar>(h: &Tensor<T>) -> Result<Tensor<T>> {
    match *h.shape() {
        [n, hh, w, m] => h.clone().reshape(&[n * hh * w, m]),
        _ => Err(Error::shape(format!("expected an N×h×w×m batch, got {:?}", h.shape()))),
    }
}

/// Uniformly samples at most `cap` rows without replacement, keeping their
/// original order.
pub fn sample_rows<T: Scalar>(x: &Tensor<T>, cap: usize, seed: u64) -> Result<Tensor<T>> {
    let rows = x.shape()[0];
    if rows <= cap {
        return Ok(x.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, rows, cap).into_vec();
    idx.sort_unstable();
    x.select_rows(&idx)
}

/// `(x − μ)·U` over the trailing axis.
pub fn project<T: Scalar>(x: &Tensor<T>, basis: &PcaBasis) -> Result<Tensor<T>> {
    let m = basis.dim();
    if x.shape().last() != Some(&m) {
        return Err(Error::shape(format!("trailing extent of {:?} is not {m}", x.shape())));
    }
    let u = basis.u()?;
    let me = u.shape()[1];
    let rows = x.numel() / m;
    let mut xc = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(m) {
        xc.extend(row.iter().zip(&basis.mean).map(|(v, mu)| v.as_f64() - mu));
    }
    let mut z = vec![0.0; rows * me];
    gemm(&xc, u.data(), &mut z, rows, m, me);
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = me;
    Tensor::new(shape, z.into_iter().map(T::from_f64_lossy).collect())
}
