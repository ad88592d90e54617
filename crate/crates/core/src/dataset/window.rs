use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{AlignedDay, AlignedMinute, PersonalHrProfile};
use crate::domain::{Label, SleepState, UserId, MINUTES_PER_DAY};
use crate::taxonomy::{Level1, Taxonomy};
use crate::{Error, Result};

pub const SUPPORTED_WIDTHS: [usize; 4] = [15, 30, 45, 60];

/// Feature channels per minute: pulse, pulse/min_hr, pulse/max_hr, steps,
/// distance.
pub const CHANNELS: usize = 5;
pub const STEPS_CHANNEL: usize = 3;

pub const DEFAULT_LABEL_THRESHOLD: f64 = 0.70;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureWindow {
    pub id: String,
    pub user: UserId,
    pub date: NaiveDate,
    pub start_minute: usize,
    pub width: usize,
    pub label_l1: Level1,
    pub label_l2: Label,
    pub synthetic: bool,
    pub features: Vec<[f64; CHANNELS]>,
}

impl FeatureWindow {
    pub fn base_id(user: &str, date: NaiveDate, width: usize, start: usize) -> String {
        format!("{user}/{date}/w{width}/{start}")
    }
}

pub fn check_width(width: usize) -> Result<()> {
    if SUPPORTED_WIDTHS.contains(&width) {
        Ok(())
    } else {
        Err(Error::UnsupportedWidth(width))
    }
}

/// floor(0.7·W): 10, 21, 31, 42.
pub fn stride_for(width: usize) -> Result<usize> {
    check_width(width)?;
    Ok(width * 7 / 10)
}

/// Start offsets of the sliding windows over a day of `day_len` minutes.
pub fn slide_windows(day_len: usize, width: usize) -> Result<Vec<usize>> {
    let stride = stride_for(width)?;
    let mut starts = Vec::new();
    let mut s = 0;
    while s + width <= day_len {
        starts.push(s);
        s += stride;
    }
    Ok(starts)
}

/// Sleep wins over the schedule; unscheduled waking time is `Awake`.
pub fn effective_label(minute: &AlignedMinute, taxonomy: &Taxonomy) -> usize {
    if minute.sleep == SleepState::Sleep {
        return taxonomy.sleep_index();
    }
    match &minute.schedule {
        Some(label) => taxonomy
            .index_of(label)
            .unwrap_or_else(|_| taxonomy.awake_index()),
        None => taxonomy.awake_index(),
    }
}

/// Majority label of a window, or `None` when no label reaches `threshold`.
pub fn label_window(
    minutes: &[AlignedMinute],
    taxonomy: &Taxonomy,
    threshold: f64,
) -> Option<(Level1, Label)> {
    if minutes.is_empty() {
        return None;
    }
    let mut counts = vec![0usize; taxonomy.len()];
    for m in minutes {
        counts[effective_label(m, taxonomy)] += 1;
    }
    let (best, &count) = counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
    if (count as f64) + 1e-9 < threshold * minutes.len() as f64 {
        return None;
    }
    Some((taxonomy.parent_of_index(best), taxonomy.labels()[best].clone()))
}

/// Missing pulse leaves the three heart-rate channels at zero.
pub fn minute_features(m: &AlignedMinute, profile: &PersonalHrProfile) -> [f64; CHANNELS] {
    let (pulse, to_min, to_max) = match m.pulse {
        Some(p) => (p, p / profile.min_hr, p / profile.max_hr),
        None => (0.0, 0.0, 0.0),
    };
    [pulse, to_min, to_max, m.steps as f64, m.distance_m]
}

/// Labelled windows of one day. Days without a heart-rate profile yield none.
pub fn day_windows(
    day: &AlignedDay,
    width: usize,
    taxonomy: &Taxonomy,
    threshold: f64,
) -> Result<Vec<FeatureWindow>> {
    check_width(width)?;
    let Some(profile) = day.profile else {
        return Ok(Vec::new());
    };
    if day.minutes.len() != MINUTES_PER_DAY
        || day.minutes.iter().enumerate().any(|(i, m)| m.index != i)
    {
        return Err(Error::Shape(format!(
            "{} {}: day is not a complete minute grid",
            day.user, day.date
        )));
    }
    let mut out = Vec::new();
    for start in slide_windows(day.minutes.len(), width)? {
        let slice = &day.minutes[start..start + width];
        let Some((label_l1, label_l2)) = label_window(slice, taxonomy, threshold) else {
            continue;
        };
        out.push(FeatureWindow {
            id: FeatureWindow::base_id(&day.user, day.date, width, start),
            user: day.user.clone(),
            date: day.date,
            start_minute: start,
            width,
            label_l1,
            label_l2,
            synthetic: false,
            features: slice.iter().map(|m| minute_features(m, &profile)).collect(),
        });
    }
    Ok(out)
}

/// All labelled windows of the cohort, in day order.
pub fn build_windows(
    days: &[AlignedDay],
    width: usize,
    taxonomy: &Taxonomy,
    threshold: f64,
) -> Result<Vec<FeatureWindow>> {
    check_width(width)?;
    let per_day: Vec<Vec<FeatureWindow>> = days
        .par_iter()
        .map(|d| day_windows(d, width, taxonomy, threshold))
        .collect::<Result<_>>()?;
    Ok(per_day.into_iter().flatten().collect())
}
