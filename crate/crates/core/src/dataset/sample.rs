use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::window::{check_width, FeatureWindow, STEPS_CHANNEL};
use crate::domain::Label;
use crate::{Error, Result};

pub const DEFAULT_NOISE_SD: f64 = 0.0003;

/// Fraction of each class kept at a given window width.
pub fn sampling_rate(width: usize) -> Result<f64> {
    check_width(width)?;
    Ok(match width {
        15 => 0.15,
        30 | 45 => 0.25,
        _ => 0.40,
    })
}

/// Windows to keep from a class of `n`: round(rate·n), but never zero.
pub fn kept_count(n: usize, rate: f64) -> usize {
    if n == 0 {
        return 0;
    }
    ((rate * n as f64).round() as usize).clamp(1, n)
}

fn class_members(windows: &[FeatureWindow]) -> BTreeMap<Label, Vec<usize>> {
    let mut classes: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, w) in windows.iter().enumerate() {
        classes.entry(w.label_l2.clone()).or_default().push(i);
    }
    classes
}

/// Per-class uniform subsample without replacement. Survivors keep their
/// original relative order.
pub fn stratified_sample<R: Rng>(
    windows: Vec<FeatureWindow>,
    rate: f64,
    rng: &mut R,
) -> Vec<FeatureWindow> {
    let mut keep = vec![false; windows.len()];
    for members in class_members(&windows).values() {
        let k = kept_count(members.len(), rate);
        for j in index::sample(rng, members.len(), k) {
            keep[members[j]] = true;
        }
    }
    windows
        .into_iter()
        .zip(keep)
        .filter_map(|(w, k)| k.then_some(w))
        .collect()
}

/// Median of the per-class window counts (lower median for an even number of
/// classes).
pub fn median_class_count(windows: &[FeatureWindow]) -> usize {
    let mut counts: Vec<usize> = class_members(windows).values().map(Vec::len).collect();
    if counts.is_empty() {
        return 0;
    }
    counts.sort_unstable();
    counts[(counts.len() - 1) / 2]
}

/// Tops every class up to `target` with noisy clones of random members.
/// Each feature cell is multiplied by its own Normal(1, sd) draw and the step
/// channel is re-rounded. Classes already at or above `target` are untouched.
pub fn oversample_minority<R: Rng>(
    mut windows: Vec<FeatureWindow>,
    target: usize,
    sd: f64,
    rng: &mut R,
) -> Result<Vec<FeatureWindow>> {
    let noise = Normal::new(1.0, sd)
        .map_err(|e| Error::InvalidConfig(format!("oversampling sd {sd}: {e}")))?;
    let classes = class_members(&windows);
    for members in classes.values() {
        for k in 0..target.saturating_sub(members.len()) {
            let source = &windows[members[rng.random_range(0..members.len())]];
            let mut clone = source.clone();
            clone.id = format!("{}#syn{k}", source.id);
            clone.synthetic = true;
            for row in &mut clone.features {
                for (c, cell) in row.iter_mut().enumerate() {
                    *cell *= noise.sample(rng);
                    if c == STEPS_CHANNEL {
                        *cell = cell.round().max(0.0);
                    }
                }
            }
            windows.push(clone);
        }
    }
    Ok(windows)
}
