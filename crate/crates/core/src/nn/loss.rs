use crate::error::{Result, VflError};
use crate::tensor::Tensor;

/// Row-wise softmax with max-subtraction.
pub fn softmax(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

#[derive(Clone, Debug)]
pub struct CrossEntropy {
    /// Mean loss over the batch.
    pub loss: f64,
    /// Per-sample losses `−yᵀ log ŷ`.
    pub per_sample: Vec<f64>,
    pub probs: Tensor,
    /// `(ŷ − y) / B`, the gradient of the mean loss.
    pub grad_logits: Tensor,
}

/// One-hot encodes binary labels into `B × 2` (column 1 = positive).
pub fn one_hot(labels: &[u8]) -> Tensor {
    Tensor::from_fn(labels.len(), 2, |i, j| {
        if labels[i] as usize == j {
            1.0
        } else {
            0.0
        }
    })
}

pub fn softmax_cross_entropy(logits: &Tensor, onehot: &Tensor) -> Result<CrossEntropy> {
    logits.same_shape(onehot, "softmax_cross_entropy")?;
    for row in onehot.iter_rows() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || ones + zeros != row.len() {
            return Err(VflError::invalid(format!("label row {row:?} is not one-hot")));
        }
    }
    let b = logits.rows();
    let probs = softmax(logits);
    let mut per_sample = Vec::with_capacity(b);
    for i in 0..b {
        // log-sum-exp form keeps saturated logits finite
        let l = logits.row(i);
        let max = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let target: f64 = l.iter().zip(onehot.row(i)).map(|(a, y)| a * y).sum();
        per_sample.push(lse - target);
    }
    let loss = per_sample.iter().sum::<f64>() / b.max(1) as f64;
    let mut grad_logits = probs.sub(onehot)?;
    grad_logits.scale_in_place(1.0 / b.max(1) as f64);
    Ok(CrossEntropy {
        loss,
        per_sample,
        probs,
        grad_logits,
    })
}
