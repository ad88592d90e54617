use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::ModelParams;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub step: u64,
}

impl OptimState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros = || params.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect();
        OptimState {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }
}

/// One AdamW update: decoupled decay `w ← w − lr·wd·w`, then the
/// bias-corrected Adam step.
pub fn adamw_step(
    params: &mut ModelParams,
    grads: &ModelParams,
    state: &mut OptimState,
    lr: f64,
    config: &AdamWConfig,
) -> Result<()> {
    if grads.tensors.len() != params.tensors.len()
        || grads.tensors.iter().zip(&params.tensors).any(|(g, p)| g.dim() != p.dim())
    {
        return Err(Error::Shape("gradient shapes do not match parameters".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    let decay = 1.0 - lr * config.weight_decay;
    for (k, p) in params.tensors.iter_mut().enumerate() {
        Zip::from(p)
            .and(&grads.tensors[k])
            .and(&mut state.m[k])
            .and(&mut state.v[k])
            .for_each(|w, &g, m, v| {
                *w *= decay;
                *m = config.beta1 * *m + (1.0 - config.beta1) * g;
                *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *w -= lr * m_hat / (v_hat.sqrt() + config.eps);
            });
    }
    if let Some(name) = params.first_non_finite() {
        return Err(Error::NonFinite(format!("parameter {name} after optimiser step")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    /// Relative improvement required to reset the patience counter.
    pub threshold: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            factor: 0.5,
            patience: 3,
            min_lr: 1e-6,
            threshold: 1e-4,
        }
    }
}

/// Reduce-on-plateau: after `patience` epochs without a relative improvement
/// the learning rate is multiplied by `factor`, never going below `min_lr`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub config: SchedulerConfig,
    pub lr: f64,
    pub best: f64,
    pub bad_epochs: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, config: SchedulerConfig) -> Self {
        PlateauScheduler {
            config,
            lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn is_improvement(&self, loss: f64) -> bool {
        loss < self.best * (1.0 - self.config.threshold)
    }

    pub fn step(&mut self, val_loss: f64) -> f64 {
        if self.is_improvement(val_loss) {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs >= self.config.patience {
                self.lr = (self.lr * self.config.factor).max(self.config.min_lr);
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}
