use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::EncodedSet;
use super::loss::{head_loss, hierarchical_loss, softmax, LossBreakdown, LossConfig, Reduction};
use super::network::{forward, loss_and_grad};
use super::optim::{adamw_step, AdamWConfig, OptimState, PlateauScheduler, SchedulerConfig};
use super::ModelParams;
use crate::domain::derive_seed;
use crate::eval::{accuracy, macro_f1};
use crate::{Error, Result};

const PREDICT_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adamw: AdamWConfig,
    pub scheduler: SchedulerConfig,
    pub early_stopping_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            learning_rate: 1e-3,
            adamw: AdamWConfig::default(),
            scheduler: SchedulerConfig::default(),
            early_stopping_patience: 10,
            max_epochs: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.learning_rate, self.scheduler.factor, self.scheduler.min_lr];
        if self.batch_size == 0
            || positive.iter().any(|v| !(v.is_finite() && *v > 0.0))
            || self.adamw.weight_decay < 0.0
            || self.scheduler.patience == 0
            || self.early_stopping_patience == 0
        {
            return Err(Error::InvalidConfig(
                "batch size, rates and patience values must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc_l1: f64,
    pub train_acc_l2: f64,
    pub val_acc_l1: f64,
    pub val_acc_l2: f64,
    pub val_f1_l1: f64,
    pub val_f1_l2: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot with the lowest validation loss.
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub probs_l1: Array2<f64>,
    pub probs_l2: Array2<f64>,
    pub pred_l1: Vec<usize>,
    pub pred_l2: Vec<usize>,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn row_argmax(m: &Array2<f64>) -> Vec<usize> {
    m.rows().into_iter().map(|r| argmax(&r.to_vec())).collect()
}

fn row_softmax(m: &Array2<f64>) -> Array2<f64> {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let p = softmax(&row.to_vec());
        row.iter_mut().zip(p).for_each(|(d, s)| *d = s);
    }
    out
}

struct ChunkResult {
    logits_l1: Array2<f64>,
    logits_l2: Array2<f64>,
}

fn eval_chunks(params: &ModelParams, set: &EncodedSet) -> Result<Vec<(Vec<usize>, ChunkResult)>> {
    let chunks: Vec<Vec<usize>> = (0..set.len())
        .collect::<Vec<_>>()
        .chunks(PREDICT_CHUNK)
        .map(<[usize]>::to_vec)
        .collect();
    chunks
        .into_par_iter()
        .map(|idx| {
            let batch = set.batch(&idx);
            let cache = forward(params, &batch.x, batch.steps, batch.size, None)?;
            Ok((
                idx,
                ChunkResult {
                    logits_l1: cache.logits_l1,
                    logits_l2: cache.logits_l2,
                },
            ))
        })
        .collect()
}

fn stack(parts: Vec<Array2<f64>>, cols: usize) -> Array2<f64> {
    if parts.is_empty() {
        return Array2::zeros((0, cols));
    }
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    concatenate(Axis(0), &views).expect("equal column counts")
}

/// Class probabilities and argmax labels for every window, dropout off.
pub fn predict(params: &ModelParams, set: &EncodedSet) -> Result<Predictions> {
    let chunks = eval_chunks(params, set)?;
    let (l1, l2): (Vec<_>, Vec<_>) = chunks
        .into_iter()
        .map(|(_, c)| (row_softmax(&c.logits_l1), row_softmax(&c.logits_l2)))
        .unzip();
    let probs_l1 = stack(l1, params.config.n_l1);
    let probs_l2 = stack(l2, params.config.n_l2);
    Ok(Predictions {
        pred_l1: row_argmax(&probs_l1),
        pred_l2: row_argmax(&probs_l2),
        probs_l1,
        probs_l2,
    })
}

/// Mean hierarchical loss over a whole set in evaluation mode, plus argmax
/// predictions.
pub fn evaluate_loss(
    params: &ModelParams,
    set: &EncodedSet,
    config: &LossConfig,
) -> Result<(LossBreakdown, Vec<usize>, Vec<usize>)> {
    let mut sum = LossBreakdown::default();
    let (mut p1, mut p2) = (Vec::new(), Vec::new());
    for (idx, c) in eval_chunks(params, set)? {
        let l1: Vec<usize> = idx.iter().map(|&i| set.l1[i]).collect();
        let l2: Vec<usize> = idx.iter().map(|&i| set.l2[i]).collect();
        let (a, _) = head_loss(&c.logits_l1, &l1, config.alpha, config.gamma, Reduction::Sum)?;
        let (b, _) = head_loss(&c.logits_l2, &l2, config.alpha, config.gamma, Reduction::Sum)?;
        sum.l1 += a;
        sum.l2 += b;
        p1.extend(row_argmax(&c.logits_l1));
        p2.extend(row_argmax(&c.logits_l2));
    }
    let n = set.len().max(1) as f64;
    let (l1, l2) = (sum.l1 / n, sum.l2 / n);
    Ok((
        LossBreakdown {
            l1,
            l2,
            total: hierarchical_loss(l1, l2, config),
        },
        p1,
        p2,
    ))
}

fn diverged(epoch: usize, what: String, last_good: &ModelParams) -> Error {
    Error::Diverged {
        epoch,
        what,
        last_good: Box::new(last_good.clone()),
    }
}

/// Mini-batch AdamW training with plateau scheduling and early stopping on
/// the validation loss. Returns the best-validation snapshot.
pub fn train(
    train_set: &EncodedSet,
    val_set: &EncodedSet,
    init: ModelParams,
    config: &TrainConfig,
    loss: &LossConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    loss.validate()?;
    if config.max_epochs == 0 {
        return Ok(TrainOutcome {
            params: init,
            history: Vec::new(),
            best_epoch: None,
            stopped_early: false,
        });
    }
    if train_set.is_empty() {
        return Err(Error::Empty("training split"));
    }
    if val_set.is_empty() {
        return Err(Error::Empty("validation split"));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 1));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 2));
    let mut params = init;
    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = None;
    let mut stale = 0;
    let mut state = OptimState::new(&params);
    let mut scheduler = PlateauScheduler::new(config.learning_rate, config.scheduler);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        let lr = scheduler.lr;
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let (mut c1, mut c2) = (0usize, 0usize);
        for idx in order.chunks(config.batch_size) {
            let batch = train_set.batch(idx);
            let (l, grads, cache) = loss_and_grad(&params, &batch, loss, Some(&mut dropout_rng as &mut dyn rand::RngCore))?;
            if !l.total.is_finite() {
                return Err(diverged(epoch, "loss".into(), &best));
            }
            if let Some(name) = grads.first_non_finite() {
                return Err(diverged(epoch, format!("gradient of {name}"), &best));
            }
            loss_sum += l.total * idx.len() as f64;
            c1 += row_argmax(&cache.logits_l1).iter().zip(&batch.l1).filter(|(a, b)| a == b).count();
            c2 += row_argmax(&cache.logits_l2).iter().zip(&batch.l2).filter(|(a, b)| a == b).count();
            if let Err(e) = adamw_step(&mut params, &grads, &mut state, lr, &config.adamw) {
                return Err(diverged(epoch, e.to_string(), &best));
            }
        }
        let n = train_set.len() as f64;
        let (val, p1, p2) = evaluate_loss(&params, val_set, loss)?;
        if !val.total.is_finite() {
            return Err(diverged(epoch, "validation loss".into(), &best));
        }
        history.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n,
            val_loss: val.total,
            train_acc_l1: c1 as f64 / n,
            train_acc_l2: c2 as f64 / n,
            val_acc_l1: accuracy(&p1, &val_set.l1)?,
            val_acc_l2: accuracy(&p2, &val_set.l2)?,
            val_f1_l1: macro_f1(&p1, &val_set.l1, params.config.n_l1)?,
            val_f1_l2: macro_f1(&p2, &val_set.l2, params.config.n_l2)?,
        });
        log::debug!("epoch {epoch}: train {:.5} val {:.5} lr {lr:e}", loss_sum / n, val.total);
        if val.total < best_val * (1.0 - config.scheduler.threshold) {
            best_val = val.total;
            best = params.clone();
            best_epoch = Some(epoch);
            stale = 0;
        } else {
            stale += 1;
        }
        scheduler.step(val.total);
        if stale >= config.early_stopping_patience {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        params: best,
        history,
        best_epoch,
        stopped_early,
    })
}
