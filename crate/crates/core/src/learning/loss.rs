use ndarray::{Array2, ArrayView2, Axis};

use super::Scalar;
use crate::{Error, Result};

/// Max-shifted softmax of a single logit vector.
pub fn softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    check_logits(logits)?;
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

pub fn log_softmax<T: Scalar>(logits: &[T]) -> Result<Vec<T>> {
    check_logits(logits)?;
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln() + max;
    Ok(logits.iter().map(|&z| z - lse).collect())
}

/// Row-wise softmax of a `(B, M)` logit matrix. Logits are assumed finite.
pub fn softmax_rows<T: Scalar>(logits: ArrayView2<T>) -> Array2<T> {
    let mut out = logits.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        row.mapv_inplace(|z| (z - max).exp());
        let sum: T = row.iter().copied().sum();
        row.mapv_inplace(|e| e / sum);
    }
    out
}

/// Shannon entropy (nats) of a distribution; `0 log 0 = 0`.
pub fn entropy<T: Scalar>(p: &[T]) -> T {
    p.iter()
        .filter(|&&x| x > T::zero())
        .map(|&x| -x * x.ln())
        .sum()
}

/// `-sum_k target_k * log softmax(logits)_k` for one sample.
pub fn cross_entropy<T: Scalar>(target: &[T], logits: &[T]) -> Result<T> {
    if target.len() != logits.len() {
        return Err(Error::Shape(format!(
            "target has {} classes, logits {}",
            target.len(),
            logits.len()
        )));
    }
    check_distribution(target)?;
    let logp = log_softmax(logits)?;
    Ok(target
        .iter()
        .zip(&logp)
        .filter(|(&t, _)| t != T::zero())
        .map(|(&t, &lp)| -t * lp)
        .sum())
}

/// Mean-reduced soft-target cross-entropy over a batch and its gradient
/// with respect to the logits.
#[derive(Debug, Clone)]
pub struct BatchLoss<T> {
    pub loss: T,
    pub dlogits: Array2<T>,
}

pub fn soft_cross_entropy_batch<T: Scalar>(
    targets: ArrayView2<T>,
    logits: ArrayView2<T>,
) -> Result<BatchLoss<T>> {
    if targets.dim() != logits.dim() {
        return Err(Error::Shape(format!(
            "targets {:?} vs logits {:?}",
            targets.dim(),
            logits.dim()
        )));
    }
    let b = logits.nrows();
    if b == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let bt = T::from_usize(b).unwrap();
    let mut loss = T::zero();
    let mut dlogits = Array2::zeros(logits.dim());
    for ((t_row, z_row), mut g_row) in targets
        .outer_iter()
        .zip(logits.outer_iter())
        .zip(dlogits.outer_iter_mut())
    {
        let z = z_row.to_vec();
        let logp = log_softmax(&z)?;
        let mut tsum = T::zero();
        for (k, (&t, &lp)) in t_row.iter().zip(&logp).enumerate() {
            if t != T::zero() {
                loss -= t * lp;
            }
            tsum += t;
            g_row[k] = lp.exp();
        }
        // d/dz of -sum t log softmax(z) is tsum * softmax(z) - t.
        for (g, &t) in g_row.iter_mut().zip(t_row.iter()) {
            *g = (tsum * *g - t) / bt;
        }
    }
    Ok(BatchLoss {
        loss: loss / bt,
        dlogits,
    })
}

fn check_logits<T: Scalar>(logits: &[T]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("softmax of empty vector".into()));
    }
    if let Some(i) = logits.iter().position(|z| !z.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite logit at index {i}")));
    }
    Ok(())
}

fn check_distribution<T: Scalar>(p: &[T]) -> Result<()> {
    let sum: T = p.iter().copied().sum();
    let tol = T::from_f64(1e-6).unwrap();
    if p.iter().any(|&x| x < T::zero() || !x.is_finite()) || (sum - T::one()).abs() > tol {
        return Err(Error::InvalidInput(format!(
            "target is not a distribution (sum {sum})"
        )));
    }
    Ok(())
}
