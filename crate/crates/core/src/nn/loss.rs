use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to the logits.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let (n, k) = logits.dims2()?;
    if labels.len() != n {
        return Err(Error::shape(format!("{} labels for a batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::dataset(format!("label {bad} out of range for {k} classes")));
    }
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut grad = vec![T::zero(); n * k];
    let mut loss = 0.0;
    for (r, (row, &y)) in logits.data().chunks_exact(k).zip(labels).enumerate() {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: f64 = row.iter().map(|&z| (z - max).as_f64().exp()).sum();
        let log_sum = sum.ln();
        loss -= (row[y] - max).as_f64() - log_sum;
        for (j, &z) in row.iter().enumerate() {
            let p = T::from_f64_lossy(((z - max).as_f64() - log_sum).exp());
            let target = if j == y { T::one() } else { T::zero() };
            grad[r * k + j] = (p - target) * inv_n;
        }
    }
    if !loss.is_finite() {
        return Err(Error::numerical("loss is not finite"));
    }
    Ok((loss / n as f64, Tensor::new(vec![n, k], grad)?))
}

/// Index of the largest logit per row (first on ties).
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Vec<usize> {
    let k = *logits.shape().last().unwrap();
    logits
        .data()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Number of rows whose argmax equals the label.
pub fn correct_count<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    argmax_rows(logits).iter().zip(labels).filter(|(p, y)| p == y).count()
}
