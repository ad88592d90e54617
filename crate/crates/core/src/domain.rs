//! Shared time grid and sleep-state vocabulary.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use chrono::{DateTime, Duration, NaiveDate, Timelike, Utc};
use serde::{Deserialize, Serialize};

use crate::align::AlignedMinute;
use crate::{Error, Result};

pub type UserId = Arc<str>;

/// Shared, cheaply cloned level-2 label.
pub type Label = Arc<str>;

pub const MINUTES_PER_DAY: usize = 1440;

/// Physiological plausibility bounds used by [`validate_day_series`].
pub const PULSE_MIN_BPM: f64 = 20.0;
pub const PULSE_MAX_BPM: f64 = 250.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SleepState {
    Sleep,
    Awake,
    Unknown,
}

impl SleepState {
    pub fn as_str(self) -> &'static str {
        match self {
            SleepState::Sleep => "sleep",
            SleepState::Awake => "awake",
            SleepState::Unknown => "unknown",
        }
    }

    pub fn is_known(self) -> bool {
        self != SleepState::Unknown
    }
}

impl fmt::Display for SleepState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SleepState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sleep" => Ok(SleepState::Sleep),
            "awake" => Ok(SleepState::Awake),
            "unknown" => Ok(SleepState::Unknown),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}

/// A slot on the local one-minute grid: calendar day plus minute in `[0, 1439]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct MinuteIndex {
    day: NaiveDate,
    index: u16,
}

impl MinuteIndex {
    pub fn new(day: NaiveDate, index: usize) -> Option<Self> {
        (index < MINUTES_PER_DAY).then(|| MinuteIndex {
            day,
            index: index as u16,
        })
    }

    pub fn day(&self) -> NaiveDate {
        self.day
    }

    pub fn index(&self) -> usize {
        self.index as usize
    }
}

/// Local minute-of-day for a UTC timestamp under a fixed offset. Seconds are
/// floor-truncated.
pub fn minute_of_day(timestamp: DateTime<Utc>, utc_offset_minutes: i32) -> MinuteIndex {
    let local = timestamp.naive_utc() + Duration::minutes(utc_offset_minutes as i64);
    MinuteIndex {
        day: local.date(),
        index: (local.hour() * 60 + local.minute()) as u16,
    }
}

/// UTC instant at which local `day` begins.
pub fn local_day_start(day: NaiveDate, utc_offset_minutes: i32) -> DateTime<Utc> {
    let midnight = day.and_hms_opt(0, 0, 0).expect("midnight exists").and_utc();
    midnight - Duration::minutes(utc_offset_minutes as i64)
}

/// Whole minutes since the Unix epoch, floored.
pub fn epoch_minute(timestamp: DateTime<Utc>) -> i64 {
    timestamp.timestamp().div_euclid(60)
}

pub fn from_epoch_minute(minute: i64) -> DateTime<Utc> {
    DateTime::from_timestamp(minute * 60, 0).expect("timestamp in range")
}

/// Independent sub-seed for `stream` under a master seed (SplitMix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A scheduled activity over the half-open interval `[start, end)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleBlock {
    pub user: UserId,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Finding {
    WrongLength { found: usize },
    DuplicateIndex { index: usize },
    OutOfOrder { position: usize },
    IndexOutOfRange { position: usize, index: usize },
    NegativeDistance { index: usize, value: f64 },
    PulseOutOfRange { index: usize, pulse: f64 },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Structural and plausibility checks for one user-day. Never fails; problems
/// are only reported.
pub fn validate_day_series(minutes: &[AlignedMinute]) -> ValidationReport {
    let mut findings = Vec::new();
    if minutes.len() != MINUTES_PER_DAY {
        findings.push(Finding::WrongLength {
            found: minutes.len(),
        });
    }

    let mut seen = vec![false; MINUTES_PER_DAY];
    let mut previous: Option<usize> = None;
    for (position, m) in minutes.iter().enumerate() {
        let index = m.index;
        if index >= MINUTES_PER_DAY {
            findings.push(Finding::IndexOutOfRange { position, index });
            continue;
        }
        if seen[index] {
            findings.push(Finding::DuplicateIndex { index });
        }
        seen[index] = true;
        if let Some(prev) = previous {
            if index < prev {
                findings.push(Finding::OutOfOrder { position });
            }
        }
        previous = Some(index);

        if m.distance_m < 0.0 || m.distance_m.is_nan() {
            findings.push(Finding::NegativeDistance {
                index,
                value: m.distance_m,
            });
        }
        if let Some(pulse) = m.pulse {
            if !(PULSE_MIN_BPM..=PULSE_MAX_BPM).contains(&pulse) {
                findings.push(Finding::PulseOutOfRange { index, pulse });
            }
        }
    }
    ValidationReport { findings }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    fn day() -> NaiveDate {
        NaiveDate::from_ymd_opt(2024, 1, 1).unwrap()
    }

    fn full_day() -> Vec<AlignedMinute> {
        (0..MINUTES_PER_DAY)
            .map(|i| AlignedMinute::empty(i))
            .collect()
    }

    #[test]
    fn minute_of_day_bounds() {
        let t0 = Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap();
        assert_eq!(minute_of_day(t0, 0).index(), 0);
        let t1 = Utc.with_ymd_and_hms(2024, 1, 1, 23, 59, 59).unwrap();
        assert_eq!(minute_of_day(t1, 0).index(), 1439);
        let t2 = Utc.with_ymd_and_hms(2024, 1, 1, 4, 30, 0).unwrap();
        let m = minute_of_day(t2, 120);
        assert_eq!(m.index(), 390);
        assert_eq!(m.day(), day());
    }

    #[test]
    fn minute_of_day_rolls_into_next_local_day() {
        let t = Utc.with_ymd_and_hms(2024, 1, 1, 23, 0, 0).unwrap();
        let m = minute_of_day(t, 120);
        assert_eq!(m.day(), NaiveDate::from_ymd_opt(2024, 1, 2).unwrap());
        assert_eq!(m.index(), 60);
    }

    #[test]
    fn minute_of_day_is_monotone_and_surjective_over_a_local_day() {
        let start = local_day_start(day(), 120);
        let mut last = None;
        for k in 0..MINUTES_PER_DAY as i64 {
            let m = minute_of_day(start + Duration::minutes(k) + Duration::seconds(37), 120);
            assert_eq!(m.day(), day());
            assert_eq!(m.index(), k as usize);
            if let Some(prev) = last {
                assert!(m.index() > prev);
            }
            last = Some(m.index());
        }
    }

    #[test]
    fn minute_index_rejects_out_of_range() {
        assert!(MinuteIndex::new(day(), 1439).is_some());
        assert!(MinuteIndex::new(day(), 1440).is_none());
    }

    #[test]
    fn epoch_minute_floors() {
        let t = Utc.with_ymd_and_hms(1970, 1, 1, 0, 1, 59).unwrap();
        assert_eq!(epoch_minute(t), 1);
        let before = Utc.with_ymd_and_hms(1969, 12, 31, 23, 59, 30).unwrap();
        assert_eq!(epoch_minute(before), -1);
        assert_eq!(from_epoch_minute(1), Utc.with_ymd_and_hms(1970, 1, 1, 0, 1, 0).unwrap());
    }

    #[test]
    fn well_formed_day_is_clean() {
        assert!(validate_day_series(&full_day()).is_clean());
    }

    #[test]
    fn missing_slot_is_reported() {
        let mut d = full_day();
        d.pop();
        let report = validate_day_series(&d);
        assert_eq!(report.findings, vec![Finding::WrongLength { found: 1439 }]);
    }

    #[test]
    fn implausible_pulse_is_reported() {
        let mut d = full_day();
        d[10].pulse = Some(300.0);
        let report = validate_day_series(&d);
        assert_eq!(
            report.findings,
            vec![Finding::PulseOutOfRange {
                index: 10,
                pulse: 300.0
            }]
        );
    }

    #[test]
    fn duplicates_order_and_distance_are_reported() {
        let mut d = full_day();
        d[5].index = 2;
        d[7].distance_m = -1.0;
        let report = validate_day_series(&d);
        assert!(report.findings.contains(&Finding::DuplicateIndex { index: 2 }));
        assert!(report.findings.contains(&Finding::OutOfOrder { position: 5 }));
        assert!(report
            .findings
            .contains(&Finding::NegativeDistance { index: 7, value: -1.0 }));
    }
}
