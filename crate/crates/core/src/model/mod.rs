//! Two-layer bidirectional LSTM encoder with a coarse and a fine
//! classification head, trained end to end with a weighted focal loss.
//!
//! Everything below the matrix products is written out by hand: gate algebra,
//! backpropagation through time, the loss, AdamW and the plateau scheduler.

mod checkpoint;
mod data;
mod loss;
mod network;
mod optim;
mod train;

use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{ArrayRecord, Checkpoint, CHECKPOINT_FORMAT};
pub use data::{Batch, EncodedSet};
pub use loss::{
    cross_entropy, focal_derivative, focal_transform, head_loss, hierarchical_loss, softmax,
    LossBreakdown, LossConfig, Reduction,
};
pub use network::{backward, forward, heads_forward, loss_and_grad, ForwardCache};
pub use optim::{adamw_step, AdamWConfig, OptimState, PlateauScheduler, SchedulerConfig};
pub use train::{evaluate_loss, predict, train, EpochRecord, Predictions, TrainConfig, TrainOutcome};

use crate::dataset::CHANNELS;
use crate::taxonomy::Level1;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Last forward state concatenated with the first backward state.
    Final,
    /// Time average of the concatenated top-layer outputs.
    Mean,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Final => "final",
            Pooling::Mean => "mean",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(Pooling::Final),
            "mean" => Ok(Pooling::Mean),
            other => Err(Error::InvalidConfig(format!("unknown pooling `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Units per direction.
    pub hidden: usize,
    pub layers: usize,
    /// Applied to the input of every layer after the first, in training only.
    pub dropout: f64,
    pub pooling: Pooling,
    pub n_l1: usize,
    pub n_l2: usize,
}

impl ModelConfig {
    pub fn new(n_l2: usize) -> Self {
        ModelConfig {
            input_dim: CHANNELS,
            hidden: 256,
            layers: 2,
            dropout: 0.1,
            pooling: Pooling::Final,
            n_l1: Level1::ALL.len(),
            n_l2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::InvalidConfig("model dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if self.n_l1 == 0 || self.n_l2 == 0 {
            return Err(Error::InvalidConfig("heads need at least one class".into()));
        }
        Ok(())
    }

    /// Width of the pooled representation, both directions.
    pub fn feature_dim(&self) -> usize {
        2 * self.hidden
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            2 * self.hidden
        }
    }
}

/// All learnable arrays. Biases are stored as single-row matrices.
///
/// Layout: for each layer and direction (forward, backward) the triple
/// `w_ih (4H×in)`, `w_hh (4H×H)`, `bias (1×4H)` with gate blocks ordered
/// input, forget, cell, output; then `head_l1` weight/bias and `head_l2`
/// weight/bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<Array2<f64>>,
}

pub(crate) const DIRECTIONS: [&str; 2] = ["fwd", "bwd"];

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Self {
        let h = config.hidden;
        let mut tensors = Vec::new();
        for l in 0..config.layers {
            for _ in DIRECTIONS {
                tensors.push(Array2::zeros((4 * h, config.layer_input(l))));
                tensors.push(Array2::zeros((4 * h, h)));
                tensors.push(Array2::zeros((1, 4 * h)));
            }
        }
        for n in [config.n_l1, config.n_l2] {
            tensors.push(Array2::zeros((n, config.feature_dim())));
            tensors.push(Array2::zeros((1, n)));
        }
        ModelParams { config, tensors }
    }

    /// Uniform in ±1/√fan_in. Weight fan-in is the column count; LSTM biases
    /// use the hidden size and head biases the pooled width.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut p = Self::zeros(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lstm_tensors = config.layers * 2 * 3;
        for (k, t) in p.tensors.iter_mut().enumerate() {
            let is_bias = t.nrows() == 1;
            let fan_in = match (is_bias, k < lstm_tensors) {
                (false, _) => t.ncols(),
                (true, true) => config.hidden,
                (true, false) => config.feature_dim(),
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            t.mapv_inplace(|_| rng.random_range(-bound..=bound));
        }
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            config: self.config,
            tensors: self.tensors.iter().map(|t| Array2::zeros(t.raw_dim())).collect(),
        }
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for l in 0..self.config.layers {
            for d in DIRECTIONS {
                for part in ["w_ih", "w_hh", "bias"] {
                    names.push(format!("lstm.{l}.{d}.{part}"));
                }
            }
        }
        for head in ["head_l1", "head_l2"] {
            names.push(format!("{head}.weight"));
            names.push(format!("{head}.bias"));
        }
        names
    }

    pub(crate) fn lstm(&self, layer: usize, dir: usize) -> (&Array2<f64>, &Array2<f64>, &Array2<f64>) {
        let k = (layer * 2 + dir) * 3;
        (&self.tensors[k], &self.tensors[k + 1], &self.tensors[k + 2])
    }

    pub(crate) fn head(&self, level: usize) -> (&Array2<f64>, &Array2<f64>) {
        let k = self.config.layers * 6 + level * 2;
        (&self.tensors[k], &self.tensors[k + 1])
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Array2::len).sum()
    }

    /// Name of the first array containing a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors
            .iter()
            .position(|t| t.iter().any(|v| !v.is_finite()))
            .map(|k| self.names()[k].clone())
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for t in &mut self.tensors {
            t.mapv_inplace(|v| v * factor);
        }
    }
}
