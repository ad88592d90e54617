use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_l1: f64,
    pub lambda_l2: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_l1: 0.3,
            lambda_l2: 1.0,
            alpha: 2.0,
            gamma: 2.0,
            reduction: Reduction::Mean,
        }
    }
}

impl LossConfig {
    /// Plain weighted cross-entropy.
    pub fn cross_entropy_only(self) -> Self {
        LossConfig {
            alpha: 1.0,
            gamma: 0.0,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.lambda_l1, self.lambda_l2, self.alpha, self.gamma]
            .iter()
            .all(|v| v.is_finite() && *v >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("loss weights, alpha and gamma must be finite and ≥ 0".into()))
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// −log softmax(logits)[class], max-shifted.
pub fn cross_entropy(logits: &[f64], class: usize) -> Result<f64> {
    if class >= logits.len() {
        return Err(Error::ClassOutOfRange {
            class,
            classes: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    Ok((log_sum - (logits[class] - max)).max(0.0))
}

/// α·(1 − e^{−ce})^γ·ce.
pub fn focal_transform(ce: f64, alpha: f64, gamma: f64) -> f64 {
    let u = -(-ce).exp_m1();
    alpha * u.powf(gamma) * ce
}

/// d focal / d ce.
pub fn focal_derivative(ce: f64, alpha: f64, gamma: f64) -> f64 {
    let u = -(-ce).exp_m1();
    let modulating = if gamma == 0.0 { 1.0 } else { u.powf(gamma) };
    let slope = if gamma == 0.0 || u == 0.0 {
        0.0
    } else {
        gamma * u.powf(gamma - 1.0) * (-ce).exp() * ce
    };
    alpha * (modulating + slope)
}

pub fn hierarchical_loss(l1: f64, l2: f64, config: &LossConfig) -> f64 {
    config.lambda_l1 * l1 + config.lambda_l2 * l2
}

/// Reduced focal loss of one head and its gradient with respect to the
/// logits (before the level weight).
pub fn head_loss(
    logits: &Array2<f64>,
    labels: &[usize],
    alpha: f64,
    gamma: f64,
    reduction: Reduction,
) -> Result<(f64, Array2<f64>)> {
    let n = logits.nrows();
    if labels.len() != n {
        return Err(Error::Shape(format!("{} labels for {n} logit rows", labels.len())));
    }
    let scale = match reduction {
        Reduction::Mean if n > 0 => 1.0 / n as f64,
        Reduction::Mean => 0.0,
        Reduction::Sum => 1.0,
    };
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut total = 0.0;
    for (i, (row, &label)) in logits.rows().into_iter().zip(labels).enumerate() {
        let row = row.to_vec();
        let ce = cross_entropy(&row, label)?;
        total += focal_transform(ce, alpha, gamma);
        let d = focal_derivative(ce, alpha, gamma) * scale;
        for (j, p) in softmax(&row).into_iter().enumerate() {
            let onehot = if j == label { 1.0 } else { 0.0 };
            grad[[i, j]] = d * (p - onehot);
        }
    }
    Ok((total * scale, grad))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
}
