//! Labelled sliding windows, class-stratified subsampling, minority
//! oversampling, temporal/user splits and feature normalisation.

mod normalize;
mod sample;
mod split;
mod store;
mod window;

use std::collections::BTreeMap;

use chrono::NaiveDate;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use normalize::{Normalizer, STD_FLOOR};
pub use sample::{
    kept_count, median_class_count, oversample_minority, sampling_rate, stratified_sample,
    DEFAULT_NOISE_SD,
};
pub use split::{
    partition_windows, split_days, split_temporal, split_user, split_users, Split,
    SplitAssignment, SplitMode, SplitSpec, Splits,
};
pub use store::{read_windows, write_windows, SplitManifest};
pub use window::{
    build_windows, check_width, day_windows, effective_label, label_window, minute_features,
    slide_windows, stride_for, FeatureWindow, CHANNELS, DEFAULT_LABEL_THRESHOLD, STEPS_CHANNEL,
    SUPPORTED_WIDTHS,
};

use crate::align::AlignedDay;
use crate::domain::{derive_seed, UserId};
use crate::taxonomy::Taxonomy;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub label_threshold: f64,
    pub stratify: bool,
    pub oversample: bool,
    pub oversample_sd: f64,
    /// Per-class target for oversampling; `None` means the median class count.
    pub oversample_target: Option<usize>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            label_threshold: DEFAULT_LABEL_THRESHOLD,
            stratify: true,
            oversample: true,
            oversample_sd: DEFAULT_NOISE_SD,
            oversample_target: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub width: usize,
    /// Raw (unnormalised) features; `train` includes synthetic clones.
    pub splits: Splits,
    pub normalizer: Normalizer,
    pub flagged_users: Vec<UserId>,
    pub labelled: usize,
    pub sampled: usize,
}

pub fn user_days(days: &[AlignedDay]) -> BTreeMap<UserId, Vec<NaiveDate>> {
    let mut out: BTreeMap<UserId, Vec<NaiveDate>> = BTreeMap::new();
    for d in days.iter().filter(|d| d.profile.is_some()) {
        out.entry(d.user.clone()).or_default().push(d.date);
    }
    out
}

/// Windows → stratified sample → split → train-only oversampling → fitted
/// normaliser.
pub fn build_dataset(
    days: &[AlignedDay],
    width: usize,
    config: &DatasetConfig,
    spec: &SplitSpec,
    taxonomy: &Taxonomy,
) -> Result<Dataset> {
    let windows = build_windows(days, width, taxonomy, config.label_threshold)?;
    let labelled = windows.len();
    let windows = if config.stratify {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 100 + width as u64));
        stratified_sample(windows, sampling_rate(width)?, &mut rng)
    } else {
        windows
    };
    let sampled = windows.len();
    let assignment = split_days(&user_days(days), spec)?;
    let mut splits = partition_windows(windows, &assignment);
    if config.oversample {
        let target = config
            .oversample_target
            .unwrap_or_else(|| median_class_count(&splits.train));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 200 + width as u64));
        splits.train =
            oversample_minority(std::mem::take(&mut splits.train), target, config.oversample_sd, &mut rng)?;
    }
    let normalizer = Normalizer::fit(&splits.train)?;
    Ok(Dataset {
        width,
        splits,
        normalizer,
        flagged_users: assignment.flagged_users,
        labelled,
        sampled,
    })
}
