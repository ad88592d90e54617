use serde::{Deserialize, Serialize};

use super::window::{FeatureWindow, CHANNELS};
use crate::{Error, Result};

pub const STD_FLOOR: f64 = 1e-8;

/// Per-channel z-score statistics fitted on the training windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl Normalizer {
    /// Population statistics over every minute row of `train`.
    pub fn fit(train: &[FeatureWindow]) -> Result<Self> {
        let rows = train.iter().flat_map(|w| w.features.iter());
        let n = train.iter().map(|w| w.features.len()).sum::<usize>();
        if n == 0 {
            return Err(Error::Empty("training windows"));
        }
        let mut mean = [0.0; CHANNELS];
        for row in rows.clone() {
            for c in 0..CHANNELS {
                mean[c] += row[c];
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        // Second-pass correction: makes the mean exact for constant channels.
        let mut correction = [0.0; CHANNELS];
        for row in rows.clone() {
            for c in 0..CHANNELS {
                correction[c] += row[c] - mean[c];
            }
        }
        for c in 0..CHANNELS {
            mean[c] += correction[c] / n as f64;
        }
        let mut var = [0.0; CHANNELS];
        for row in rows {
            for c in 0..CHANNELS {
                let d = row[c] - mean[c];
                var[c] += d * d;
            }
        }
        let std = var.map(|v| (v / n as f64).sqrt().max(STD_FLOOR));
        Ok(Normalizer { mean, std })
    }

    pub fn apply(&self, windows: &mut [FeatureWindow]) {
        for w in windows {
            for row in &mut w.features {
                for c in 0..CHANNELS {
                    row[c] = (row[c] - self.mean[c]) / self.std[c];
                }
            }
        }
    }
}
