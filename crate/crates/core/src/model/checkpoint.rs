use std::io::{Read, Write};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::loss::LossConfig;
use super::train::TrainConfig;
use super::{ModelConfig, ModelParams};
use crate::dataset::Normalizer;
use crate::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "harforge-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Trained parameters plus everything needed to reproduce or apply them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub seed: u64,
    pub taxonomy_hash: String,
    pub normalizer: Option<Normalizer>,
    pub arrays: Vec<ArrayRecord>,
}

impl Checkpoint {
    pub fn new(
        params: &ModelParams,
        train: TrainConfig,
        loss: LossConfig,
        taxonomy_hash: String,
        normalizer: Option<Normalizer>,
    ) -> Self {
        let arrays = params
            .names()
            .into_iter()
            .zip(&params.tensors)
            .map(|(name, t)| ArrayRecord {
                name,
                shape: t.shape().to_vec(),
                values: t.iter().copied().collect(),
            })
            .collect();
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            model: params.config,
            train,
            loss,
            seed: train.seed,
            taxonomy_hash,
            normalizer,
            arrays,
        }
    }

    pub fn params(&self) -> Result<ModelParams> {
        self.model.validate()?;
        let mut params = ModelParams::zeros(self.model);
        let names = params.names();
        if self.arrays.len() != names.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} arrays, model needs {}",
                self.arrays.len(),
                names.len()
            )));
        }
        for ((rec, name), slot) in self.arrays.iter().zip(&names).zip(&mut params.tensors) {
            if &rec.name != name || rec.shape != slot.shape() {
                return Err(Error::Shape(format!(
                    "array {} {:?} does not match {name} {:?}",
                    rec.name,
                    rec.shape,
                    slot.shape()
                )));
            }
            *slot = Array2::from_shape_vec(slot.raw_dim(), rec.values.clone())
                .map_err(|e| Error::Shape(format!("{name}: {e}")))?;
        }
        if let Some(name) = params.first_non_finite() {
            return Err(Error::NonFinite(format!("checkpoint array {name}")));
        }
        Ok(params)
    }

    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        serde_json::to_writer(&mut out, self)?;
        out.write_all(b"\n")?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let ckpt: Checkpoint = serde_json::from_reader(input)?;
        if ckpt.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidConfig(format!(
                "unsupported checkpoint format `{}`",
                ckpt.format
            )));
        }
        Ok(ckpt)
    }
}
