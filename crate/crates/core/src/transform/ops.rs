use log::warn;

use super::plan::OutputConfig;
use crate::error::{Error, Result};
use crate::nn::{Conv2D, Dense, PcaConv2D, PcaDense};
use crate::pca::PcaBasis;
use crate::tensor::{Scalar, Tensor};

/// Outputs kept by an output transformation, ascending, with the score of
/// every output.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputSelection {
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
}

impl OutputSelection {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Row indices of a flattened `positions × n` input that belong to kept
    /// channels. Flattening is channel-fastest, so channel `c` at position
    /// `p` is row `p·n + c`.
    pub fn expand(&self, positions: usize) -> Vec<usize> {
        let n = self.scores.len();
        (0..positions)
            .flat_map(|p| self.indices.iter().map(move |&c| p * n + c))
            .collect()
    }
}

/// Row-wise L1 norms of `u` (`(positions·n)×m_e`), summed over the
/// `positions` rows that belong to each of the `n` channels.
pub fn output_scores(u: &Tensor<f64>, positions: usize) -> Result<Vec<f64>> {
    let (rows, me) = u.dims2()?;
    if positions == 0 || rows % positions != 0 {
        return Err(Error::shape(format!("{rows} basis rows do not split into {positions} positions")));
    }
    let n = rows / positions;
    let mut scores = vec![0.0; n];
    for (r, row) in u.data().chunks_exact(me).enumerate() {
        scores[r % n] += row.iter().map(|v| v.abs()).sum::<f64>();
    }
    Ok(scores)
}

/// Picks outputs from scores: the `k` largest (ties to the lower index) or
/// every score above a threshold, never fewer than one.
pub fn select_by_scores(scores: &[f64], config: OutputConfig) -> Result<OutputSelection> {
    let n = scores.len();
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::numerical(format!("output score {bad} is not finite")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let k = match config {
        OutputConfig::Keep(k) => {
            if k == 0 || k > n {
                return Err(Error::plan(format!("keep count {k} outside [1, {n}]")));
            }
            k
        }
        OutputConfig::Threshold { threshold } => {
            if !(threshold >= 0.0) {
                return Err(Error::plan(format!("output threshold must be non-negative, got {threshold}")));
            }
            let k = scores.iter().filter(|&&s| s > threshold).count();
            if k == 0 {
                warn!("no output scores above {threshold}; keeping the best one");
            }
            k.max(1)
        }
    };
    let mut indices = order[..k].to_vec();
    indices.sort_unstable();
    Ok(OutputSelection {
        indices,
        scores: scores.to_vec(),
    })
}

/// Selection from the next layer's truncated basis `u` (`n×m_e`).
pub fn select_outputs(u: &Tensor<f64>, config: OutputConfig) -> Result<OutputSelection> {
    select_by_scores(&output_scores(u, 1)?, config)
}

/// Selection for a convolution feeding a dense layer through a flatten:
/// each filter's score sums the rows of its `positions` spatial copies.
pub fn select_outputs_flattened(u: &Tensor<f64>, positions: usize, config: OutputConfig) -> Result<OutputSelection> {
    select_by_scores(&output_scores(u, positions)?, config)
}

/// Selection for layers whose outputs are summed together: scores are the
/// average over the distinct bases that read the shared channels.
pub fn resnet_select_outputs(bases: &[Tensor<f64>], config: OutputConfig) -> Result<OutputSelection> {
    let scores = average_scores(&bases.iter().map(|u| (u, 1)).collect::<Vec<_>>())?;
    select_by_scores(&scores, config)
}

pub(crate) fn average_scores(bases: &[(&Tensor<f64>, usize)]) -> Result<Vec<f64>> {
    let Some(((first, p0), rest)) = bases.split_first() else {
        return Err(Error::plan("no consumer bases to score outputs against"));
    };
    let mut acc = output_scores(first, *p0)?;
    for (u, p) in rest {
        let s = output_scores(u, *p)?;
        if s.len() != acc.len() {
            return Err(Error::shape(format!("bases score {} and {} channels", acc.len(), s.len())));
        }
        acc.iter_mut().zip(&s).for_each(|(a, b)| *a += b);
    }
    let k = bases.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Ok(acc)
}

/// `UᵀW` for `u` (`m×m_e`) and `w` (`m×n`). Each output element sums over
/// `i` in ascending order, independently of `n`, so selecting columns of
/// `w` first gives bitwise the same columns.
fn ut_w(u: &[f64], m: usize, me: usize, w: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; me * n];
    for i in 0..m {
        let wi = &w[i * n..(i + 1) * n];
        for j in 0..me {
            let uij = u[i * me + j];
            let row = &mut out[j * n..(j + 1) * n];
            for (o, &wv) in row.iter_mut().zip(wi) {
                *o += uij * wv;
            }
        }
    }
    out
}

/// Adds `μW` to `acc`.
fn add_mu_w(acc: &mut [f64], mean: &[f64], w: &[f64], n: usize) {
    for (i, &mu) in mean.iter().enumerate() {
        for (a, &wv) in acc.iter_mut().zip(&w[i * n..(i + 1) * n]) {
            *a += mu * wv;
        }
    }
}

fn to_f64<T: Scalar>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

fn from_f64<T: Scalar>(shape: Vec<usize>, v: Vec<f64>) -> Result<Tensor<T>> {
    Tensor::new(shape, v.into_iter().map(T::from_f64_lossy).collect())
}

fn basis_parts(basis: &PcaBasis, m: usize) -> Result<(Tensor<f64>, usize)> {
    if basis.dim() != m {
        return Err(Error::shape(format!("basis has dimension {}, layer input has {m}", basis.dim())));
    }
    let u = basis.u()?;
    let me = u.shape()[1];
    Ok((u, me))
}

/// `W̃ = UᵀW` and `b̃ = b + μW` for a dense layer with an `m×n` weight.
pub fn input_transform_dense<T: Scalar>(
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    basis: &PcaBasis,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, n) = weight.dims2()?;
    if bias.numel() != n {
        return Err(Error::shape(format!("bias of {} for {n} outputs", bias.numel())));
    }
    let (u, me) = basis_parts(basis, m)?;
    let w = to_f64(weight);
    let wt = ut_w(u.data(), m, me, &w, n);
    let mut b = to_f64(bias);
    add_mu_w(&mut b, &basis.mean, &w, n);
    Ok((from_f64(vec![me, n], wt)?, from_f64(vec![n], b)?))
}

/// Convolution variant: every kernel offset `W_o` (`m×n`) becomes `UᵀW_o`
/// and the bias gains `Σ_o μW_o`. Also returns the pad values `−μU`.
pub fn input_transform_conv<T: Scalar>(
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    basis: &PcaBasis,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let &[k1, k2, m, n] = kernel.shape() else {
        return Err(Error::shape(format!("kernel must be k1×k2×m×n, got {:?}", kernel.shape())));
    };
    if let Some(b) = bias {
        if b.numel() != n {
            return Err(Error::shape(format!("bias of {} for {n} filters", b.numel())));
        }
    }
    let (u, me) = basis_parts(basis, m)?;
    let w = to_f64(kernel);
    let mut out = Vec::with_capacity(k1 * k2 * me * n);
    let mut b = bias.map_or_else(|| vec![0.0; n], to_f64);
    for wo in w.chunks_exact(m * n) {
        out.extend(ut_w(u.data(), m, me, wo, n));
        add_mu_w(&mut b, &basis.mean, wo, n);
    }
    let mut pad = vec![0.0; me];
    for (i, &mu) in basis.mean.iter().enumerate() {
        for (p, &uv) in pad.iter_mut().zip(u.row(i)) {
            *p -= mu * uv;
        }
    }
    Ok((
        from_f64(vec![k1, k2, me, n], out)?,
        from_f64(vec![n], b)?,
        from_f64(vec![me], pad)?,
    ))
}

pub fn to_pca_dense<T: Scalar>(dense: &Dense<T>, basis: &PcaBasis) -> Result<PcaDense<T>> {
    let (w, b) = input_transform_dense(&dense.weight, &dense.bias, basis)?;
    PcaDense::new(basis.mean_tensor(), basis.u()?.cast(), w, b, dense.activation)
}

pub fn to_pca_conv<T: Scalar>(conv: &Conv2D<T>, basis: &PcaBasis) -> Result<PcaConv2D<T>> {
    let (k, b, pad) = input_transform_conv(&conv.kernel, conv.bias.as_ref(), basis)?;
    let mut layer = PcaConv2D::new(
        basis.mean_tensor(),
        basis.u()?.cast(),
        k,
        b,
        conv.stride,
        conv.padding,
        conv.activation,
    )?;
    layer.pad_values = pad;
    Ok(layer)
}

/// Drops rows of the mean and components that belong to pruned inputs.
/// Variances keep their fitted values, cut to the new length.
pub fn prune_basis(basis: &PcaBasis, rows: &[usize]) -> Result<PcaBasis> {
    let components = basis.components.select_rows(rows)?;
    let mean = rows
        .iter()
        .map(|&r| basis.mean.get(r).copied())
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::shape("pruned row outside the basis"))?;
    let mut variances = basis.variances.clone();
    variances.truncate(rows.len());
    Ok(PcaBasis {
        mean,
        variances,
        components,
        retained: basis.retained,
        sample_count: basis.sample_count,
    })
}

/// Result of [`output_transform`].
#[derive(Debug, Clone, PartialEq)]
pub struct OutputTransformed<T> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub next_basis: PcaBasis,
    pub next_weight: Tensor<T>,
}

/// Removes unselected outputs of layer `i` and the matching inputs of layer
/// `i+1`.
///
/// `weight` has outputs on its last axis (dense `m×n` or kernel
/// `k1×k2×m×n`). `next_weight` is a dense `m'×n'` whose rows are
/// `positions` copies of the `n` channels, or a kernel `k1×k2×n×n'` when
/// `positions` is 1.
pub fn output_transform<T: Scalar>(
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    next_basis: &PcaBasis,
    next_weight: &Tensor<T>,
    positions: usize,
    selection: &OutputSelection,
) -> Result<OutputTransformed<T>> {
    let n = *weight.shape().last().unwrap();
    if selection.scores.len() != n {
        return Err(Error::shape(format!(
            "selection over {} outputs for a layer with {n}",
            selection.scores.len()
        )));
    }
    let rows = selection.expand(positions);
    Ok(OutputTransformed {
        weight: weight.select_last(&selection.indices)?,
        bias: bias.map(|b| b.select_last(&selection.indices)).transpose()?,
        next_basis: prune_basis(next_basis, &rows)?,
        next_weight: prune_inputs(next_weight, &rows)?,
    })
}

/// Keeps input rows of a dense weight or input channels of a kernel.
pub(crate) fn prune_inputs<T: Scalar>(w: &Tensor<T>, rows: &[usize]) -> Result<Tensor<T>> {
    match w.rank() {
        2 => w.select_rows(rows),
        4 => w.select_axis(2, rows),
        _ => Err(Error::shape(format!("cannot prune inputs of a {:?} weight", w.shape()))),
    }
}
