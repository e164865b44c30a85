//! Training losses. Each loss returns its value together with the gradient
//! with respect to its inputs.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// `-log softmax(logits)[target]` and its gradient `softmax - onehot`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::InvalidLabel(format!(
            "class {target} out of range 0..{}",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Shape("non-finite logits".into()));
    }
    let loss = log_sum_exp(logits) - logits[target];
    let mut grad = softmax(logits);
    grad[target] -= 1.0;
    Ok((loss.max(0.0), grad))
}

/// Squared Euclidean distance `|x_q - x_z|^2`; gradient w.r.t. `x_z`.
pub fn embedding_loss(x_q: &[f64], x_z: &[f64]) -> Result<(f64, Vec<f64>)> {
    if x_q.len() != x_z.len() {
        return Err(Error::Shape(format!(
            "embedding dims differ: {} vs {}",
            x_q.len(),
            x_z.len()
        )));
    }
    let mut loss = 0.0;
    let grad = x_q
        .iter()
        .zip(x_z)
        .map(|(q, z)| {
            let d = z - q;
            loss += d * d;
            2.0 * d
        })
        .collect();
    Ok((loss, grad))
}

/// Classification loss, embedding loss and their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_cls: f64,
    pub l_emb: f64,
    pub alpha: f64,
    pub total: f64,
}

pub fn total_loss(l_cls: f64, l_emb: f64, alpha: f64) -> Result<LossBundle> {
    if !(alpha >= 0.0) {
        return Err(Error::Config(format!("alpha must be >= 0, got {alpha}")));
    }
    Ok(LossBundle {
        l_cls,
        l_emb,
        alpha,
        total: l_cls + alpha * l_emb,
    })
}

/// `log(1 + exp(v))` without overflow.
fn softplus(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

/// Mean over classes of the binary cross-entropy between `sigmoid(logit_k)`
/// and `[k in targets]`; gradient w.r.t. the logits.
pub fn bce_multilabel(logits: &[f64], targets: &BTreeSet<usize>) -> Result<(f64, Vec<f64>)> {
    let n = logits.len();
    if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
        return Err(Error::InvalidLabel(format!("target {bad} out of range 0..{n}")));
    }
    let mut loss = 0.0;
    let grad = logits
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            let y = if targets.contains(&k) { 1.0 } else { 0.0 };
            // -y log s(v) - (1-y) log(1 - s(v)) = softplus(v) - y v
            loss += softplus(v) - y * v;
            (crate::nn::sigmoid(v) - y) / n as f64
        })
        .collect();
    Ok((loss / n as f64, grad))
}
