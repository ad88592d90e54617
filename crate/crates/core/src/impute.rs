//! Rule-based resolution of unknown sleep states.
//!
//! Rules run in order on minutes whose device-reported state is unknown:
//!
//! 1. zero steps and pulse below `1.05 × minHR` at night (below `1.2 × minHR`
//!    in the daytime) ⇒ sleep;
//! 2. pulse above `1.2 × minHR`, or any steps ⇒ awake;
//! 3. a run of unknowns no longer than `max_gap_minutes` whose neighbours are
//!    the same known state takes that state.
//!
//! Thresholds are strict, so a pulse exactly on a threshold stays unknown.

use std::collections::BTreeMap;
use std::io::Write;

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{AlignedDay, AlignedMinute, PersonalHrProfile};
use crate::domain::{SleepState, UserId};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ImputeRule {
    Rule1,
    Rule2,
    Rule3,
}

impl ImputeRule {
    pub fn as_str(self) -> &'static str {
        match self {
            ImputeRule::Rule1 => "rule1",
            ImputeRule::Rule2 => "rule2",
            ImputeRule::Rule3 => "rule3",
        }
    }

    /// Parses a `sleep_source` column value; `observed` and `none` map to
    /// `None`.
    pub fn parse_source(s: &str) -> std::result::Result<Option<ImputeRule>, ()> {
        match s {
            "rule1" => Ok(Some(ImputeRule::Rule1)),
            "rule2" => Ok(Some(ImputeRule::Rule2)),
            "rule3" => Ok(Some(ImputeRule::Rule3)),
            "observed" | "none" => Ok(None),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImputeConfig {
    /// First minute of the night window (inclusive).
    pub night_start_minute: usize,
    /// Last minute of the night window (inclusive); the window wraps midnight
    /// when it is smaller than `night_start_minute`.
    pub night_end_minute: usize,
    pub night_sleep_factor: f64,
    pub day_sleep_factor: f64,
    pub awake_factor: f64,
    pub max_gap_minutes: usize,
}

impl Default for ImputeConfig {
    fn default() -> Self {
        ImputeConfig {
            night_start_minute: 21 * 60,
            night_end_minute: 6 * 60 + 59,
            night_sleep_factor: 1.05,
            day_sleep_factor: 1.2,
            awake_factor: 1.2,
            max_gap_minutes: 120,
        }
    }
}

impl ImputeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.night_start_minute >= 1440 || self.night_end_minute >= 1440 {
            return Err(Error::InvalidConfig("night window minutes must be < 1440".into()));
        }
        for (name, f) in [
            ("night_sleep_factor", self.night_sleep_factor),
            ("day_sleep_factor", self.day_sleep_factor),
            ("awake_factor", self.awake_factor),
        ] {
            if !(f > 1.0) || !f.is_finite() {
                return Err(Error::InvalidConfig(format!("{name} must be > 1, got {f}")));
            }
        }
        Ok(())
    }

    pub fn is_night(&self, minute: usize) -> bool {
        if self.night_start_minute <= self.night_end_minute {
            (self.night_start_minute..=self.night_end_minute).contains(&minute)
        } else {
            minute >= self.night_start_minute || minute <= self.night_end_minute
        }
    }
}

/// Rule 1. Abstains without a pulse.
pub fn rule1_sleep(
    minute: &AlignedMinute,
    profile: &PersonalHrProfile,
    config: &ImputeConfig,
) -> Option<SleepState> {
    let pulse = minute.pulse?;
    if minute.steps != 0 {
        return None;
    }
    let factor = if config.is_night(minute.index) {
        config.night_sleep_factor
    } else {
        config.day_sleep_factor
    };
    (pulse < factor * profile.min_hr).then_some(SleepState::Sleep)
}

/// Rule 2. The steps clause applies even without a pulse.
pub fn rule2_awake(
    minute: &AlignedMinute,
    profile: &PersonalHrProfile,
    config: &ImputeConfig,
) -> Option<SleepState> {
    let hr_high = minute
        .pulse
        .is_some_and(|p| p > config.awake_factor * profile.min_hr);
    (hr_high || minute.steps > 0).then_some(SleepState::Awake)
}

/// Rule 3 over one day's states.
pub fn rule3_fill(states: &[SleepState], max_gap: usize) -> Vec<SleepState> {
    let mut out = states.to_vec();
    let mut i = 0;
    while i < states.len() {
        if states[i] != SleepState::Unknown {
            i += 1;
            continue;
        }
        let start = i;
        while i < states.len() && states[i] == SleepState::Unknown {
            i += 1;
        }
        let len = i - start;
        if start == 0 || i == states.len() || len > max_gap {
            continue;
        }
        let (before, after) = (states[start - 1], states[i]);
        if before == after {
            out[start..i].fill(before);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateCounts {
    pub sleep: u64,
    pub awake: u64,
    pub unknown: u64,
}

impl StateCounts {
    pub fn total(&self) -> u64 {
        self.sleep + self.awake + self.unknown
    }

    fn count(minutes: &[AlignedMinute]) -> Self {
        let mut c = StateCounts::default();
        for m in minutes {
            c.add(m.sleep);
        }
        c
    }

    fn add(&mut self, s: SleepState) {
        match s {
            SleepState::Sleep => self.sleep += 1,
            SleepState::Awake => self.awake += 1,
            SleepState::Unknown => self.unknown += 1,
        }
    }

    fn merge(&mut self, o: StateCounts) {
        self.sleep += o.sleep;
        self.awake += o.awake;
        self.unknown += o.unknown;
    }
}

/// Per-user before/after counts of the imputation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImputationStats {
    pub user: String,
    pub pre: StateCounts,
    pub after_rules_1_2: StateCounts,
    pub post: StateCounts,
    pub rule1_min: u64,
    pub rule2_min: u64,
    pub rule3_min: u64,
    /// Days left untouched because they had no heart-rate profile.
    pub skipped_days: Vec<NaiveDate>,
}

impl ImputationStats {
    pub fn total_min(&self) -> u64 {
        self.pre.total()
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct DayOutcome {
    after_rules_1_2: StateCounts,
    rule1: u64,
    rule2: u64,
    rule3: u64,
}

fn impute_day(day: &mut AlignedDay, profile: &PersonalHrProfile, config: &ImputeConfig) -> DayOutcome {
    let mut out = DayOutcome::default();
    for m in day.minutes.iter_mut().filter(|m| m.sleep == SleepState::Unknown) {
        if let Some(s) = rule1_sleep(m, profile, config) {
            m.sleep = s;
            m.imputed_by = Some(ImputeRule::Rule1);
            out.rule1 += 1;
        } else if let Some(s) = rule2_awake(m, profile, config) {
            m.sleep = s;
            m.imputed_by = Some(ImputeRule::Rule2);
            out.rule2 += 1;
        }
    }
    out.after_rules_1_2 = StateCounts::count(&day.minutes);
    let states: Vec<SleepState> = day.minutes.iter().map(|m| m.sleep).collect();
    let filled = rule3_fill(&states, config.max_gap_minutes);
    for (m, (&before, &after)) in day.minutes.iter_mut().zip(states.iter().zip(&filled)) {
        if before != after {
            m.sleep = after;
            m.imputed_by = Some(ImputeRule::Rule3);
            out.rule3 += 1;
        }
    }
    out
}

/// Applies rules 1→2→3 to each day of one user. Days without a profile are
/// skipped and listed in the stats.
pub fn impute_user(mut days: Vec<AlignedDay>, config: &ImputeConfig) -> (Vec<AlignedDay>, ImputationStats) {
    let mut stats = ImputationStats {
        user: days.first().map(|d| d.user.to_string()).unwrap_or_default(),
        ..Default::default()
    };
    for day in days.iter_mut() {
        let pre = StateCounts::count(&day.minutes);
        stats.pre.merge(pre);
        match day.profile {
            Some(profile) => {
                let o = impute_day(day, &profile, config);
                stats.after_rules_1_2.merge(o.after_rules_1_2);
                stats.rule1_min += o.rule1;
                stats.rule2_min += o.rule2;
                stats.rule3_min += o.rule3;
            }
            None => {
                stats.after_rules_1_2.merge(pre);
                stats.skipped_days.push(day.date);
            }
        }
        stats.post.merge(StateCounts::count(&day.minutes));
    }
    (days, stats)
}

/// Imputes every user of a cohort in parallel. `days` must be grouped by
/// user; output order is preserved.
pub fn impute_cohort(days: Vec<AlignedDay>, config: &ImputeConfig) -> (Vec<AlignedDay>, Vec<ImputationStats>) {
    let mut groups: Vec<Vec<AlignedDay>> = Vec::new();
    let mut last: Option<UserId> = None;
    for d in days {
        if last.as_ref() != Some(&d.user) {
            last = Some(d.user.clone());
            groups.push(Vec::new());
        }
        groups.last_mut().expect("group pushed").push(d);
    }
    let results: Vec<_> = groups
        .into_par_iter()
        .map(|g| impute_user(g, config))
        .collect();
    let mut out_days = Vec::new();
    let mut out_stats = Vec::new();
    for (d, s) in results {
        out_days.extend(d);
        out_stats.push(s);
    }
    (out_days, out_stats)
}

pub const STATS_HEADER: &str = "metric,pre,after_rules_1_2,after_rules_1_2_3,net";

/// Writes the before/after table for each user followed by the per-user
/// cohort average (`cohort_avg/...` rows).
pub fn write_stats_csv<W: Write>(out: W, stats: &[ImputationStats]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(STATS_HEADER.split(','))?;

    struct Row {
        name: &'static str,
        values: [Option<f64>; 4],
    }
    fn rows(s: &ImputationStats) -> Vec<Row> {
        let total = s.total_min() as f64;
        let pct = |x: u64| if total > 0.0 { 100.0 * x as f64 / total } else { 0.0 };
        let stage = |f: &dyn Fn(&StateCounts) -> u64| -> [Option<f64>; 4] {
            let (a, b, c) = (f(&s.pre), f(&s.after_rules_1_2), f(&s.post));
            [Some(a as f64), Some(b as f64), Some(c as f64), Some(c as f64 - a as f64)]
        };
        let stage_pct = |f: &dyn Fn(&StateCounts) -> u64| -> [Option<f64>; 4] {
            let (a, b, c) = (pct(f(&s.pre)), pct(f(&s.after_rules_1_2)), pct(f(&s.post)));
            [Some(a), Some(b), Some(c), Some(c - a)]
        };
        let (r1, r2, r3) = (s.rule1_min as f64, s.rule2_min as f64, s.rule3_min as f64);
        vec![
            Row { name: "total_min", values: [Some(total), Some(total), Some(total), None] },
            Row { name: "sleep_min", values: stage(&|c| c.sleep) },
            Row { name: "awake_min", values: stage(&|c| c.awake) },
            Row { name: "unknown_min", values: stage(&|c| c.unknown) },
            Row { name: "sleep_pct", values: stage_pct(&|c| c.sleep) },
            Row { name: "awake_pct", values: stage_pct(&|c| c.awake) },
            Row { name: "unknown_pct", values: stage_pct(&|c| c.unknown) },
            Row { name: "rule1_min", values: [None, Some(r1), Some(r1), Some(r1)] },
            Row { name: "rule2_min", values: [None, Some(r2), Some(r2), Some(r2)] },
            Row { name: "rule3_min", values: [None, None, Some(r3), Some(r3)] },
        ]
    }
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_default();

    let mut sums: BTreeMap<&'static str, [Option<f64>; 4]> = BTreeMap::new();
    let mut order = Vec::new();
    for s in stats {
        for row in rows(s) {
            w.write_record([
                format!("{}/{}", s.user, row.name),
                fmt(row.values[0]),
                fmt(row.values[1]),
                fmt(row.values[2]),
                fmt(row.values[3]),
            ])?;
            let acc = sums.entry(row.name).or_insert_with(|| {
                order.push(row.name);
                [None; 4]
            });
            for (a, v) in acc.iter_mut().zip(row.values) {
                if let Some(v) = v {
                    *a = Some(a.unwrap_or(0.0) + v);
                }
            }
        }
    }
    let n = stats.len().max(1) as f64;
    for name in order {
        let v = sums[name];
        w.write_record([
            format!("cohort_avg/{name}"),
            fmt(v[0].map(|x| x / n)),
            fmt(v[1].map(|x| x / n)),
            fmt(v[2].map(|x| x / n)),
            fmt(v[3].map(|x| x / n)),
        ])?;
    }
    w.flush()?;
    Ok(())
}
