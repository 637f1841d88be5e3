//! Utility and privacy metrics.

use crate::error::{Result, VflError};

/// ROC AUC via the Mann–Whitney statistic with average ranks for ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(VflError::dim("auc", scores.len(), labels.len()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(VflError::Numeric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.iter().filter(|&&l| l == 0).count();
    if n_pos + n_neg != labels.len() {
        return Err(VflError::invalid("labels must be 0 or 1"));
    }
    if n_pos == 0 || n_neg == 0 {
        return Err(VflError::invalid("AUC needs both classes present"));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks are 1-based; ties share the average rank
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                pos_rank_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let n_pos_f = n_pos as f64;
    let u = pos_rank_sum - n_pos_f * (n_pos_f + 1.0) / 2.0;
    Ok(u / (n_pos_f * n_neg as f64))
}

pub const NLL_CLAMP: f64 = 1e-12;

/// Mean binary negative log-likelihood with probabilities clamped to
/// `[1e-12, 1 − 1e-12]`.
pub fn nll(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(VflError::invalid(format!(
            "nll: {} probabilities vs {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(VflError::invalid("nll of an empty set"));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(NLL_CLAMP, 1.0 - NLL_CLAMP);
            if y == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Relative change of leakage against an undefended base; negative is better.
pub fn delta_leak_auc(leak_exp: f64, leak_base: f64) -> Result<f64> {
    if leak_base <= 0.0 || !leak_base.is_finite() {
        return Err(VflError::invalid("base LeakAUC must be > 0"));
    }
    Ok((leak_exp - leak_base) / leak_base)
}
