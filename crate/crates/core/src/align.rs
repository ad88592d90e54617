//! Fusion of raw streams onto the local one-minute grid.
//!
//! Heart-rate samples are averaged per minute, a personal `minHR`/`maxHR`
//! profile is taken from percentiles of the per-minute pulses, and every
//! 15-minute activity block is spread over its minutes in proportion to each
//! minute's heart-rate excess above `1.05 × minHR` (the Linear Truncated
//! Model).

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::sync::Arc;

use chrono::{Duration, NaiveDate};
use rayon::prelude::*;

use crate::domain::{
    epoch_minute, local_day_start, minute_of_day, Label, ScheduleBlock, SleepState, UserId,
    MINUTES_PER_DAY,
};
use crate::impute::ImputeRule;
use crate::ingest::{RawActivityBlock, RawHrSample, RawSleepSegment, RawStreams, ACTIVITY_BLOCK_MINUTES};
use crate::taxonomy::Taxonomy;
use crate::{Error, Result};

pub const MIN_HR_QUANTILE: f64 = 0.05;
pub const MAX_HR_QUANTILE: f64 = 0.9997;
/// Profiles built from fewer per-minute pulses are flagged low-confidence.
pub const PROFILE_MIN_SAMPLES: usize = 60;
/// Minutes at or below `LTM_CUTOFF_FACTOR × minHR` get no share of a block.
pub const LTM_CUTOFF_FACTOR: f64 = 1.05;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PersonalHrProfile {
    pub min_hr: f64,
    pub max_hr: f64,
    pub samples: usize,
    pub low_confidence: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ProfileScope {
    /// One profile per user-day.
    #[default]
    Day,
    /// One profile from the user's whole history, shared by all days.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignConfig {
    pub tz_offset_minutes: i32,
    pub profile_scope: ProfileScope,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            tz_offset_minutes: 120,
            profile_scope: ProfileScope::Day,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignedMinute {
    /// Minute of the local day, `0..1440`.
    pub index: usize,
    pub pulse: Option<f64>,
    pub steps: u32,
    pub distance_m: f64,
    pub sleep: SleepState,
    pub schedule: Option<Label>,
    /// Set when the sleep state was filled in by an imputation rule.
    pub imputed_by: Option<ImputeRule>,
}

impl AlignedMinute {
    pub fn empty(index: usize) -> Self {
        AlignedMinute {
            index,
            pulse: None,
            steps: 0,
            distance_m: 0.0,
            sleep: SleepState::Unknown,
            schedule: None,
            imputed_by: None,
        }
    }
}

/// One user's local day on the minute grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedDay {
    pub user: UserId,
    pub date: NaiveDate,
    pub minutes: Vec<AlignedMinute>,
    pub profile: Option<PersonalHrProfile>,
}

/// Mean of the samples falling in one minute.
pub fn downsample_hr(samples: &[f64]) -> Option<f64> {
    if samples.is_empty() {
        None
    } else {
        Some(samples.iter().sum::<f64>() / samples.len() as f64)
    }
}

/// Linear-interpolation percentile of sorted data: rank `q·(n−1)`.
pub fn percentile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let rank = q * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

pub fn compute_hr_profile(pulses: &[f64]) -> Result<PersonalHrProfile> {
    if pulses.is_empty() {
        return Err(Error::NoProfile);
    }
    let mut sorted = pulses.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(PersonalHrProfile {
        min_hr: percentile_sorted(&sorted, MIN_HR_QUANTILE),
        max_hr: percentile_sorted(&sorted, MAX_HR_QUANTILE),
        samples: sorted.len(),
        low_confidence: sorted.len() < PROFILE_MIN_SAMPLES,
    })
}

/// Integer apportionment of `total` by non-negative `weights` (at least one
/// positive). Units left after flooring go to the largest fractional parts,
/// ties to the lower index. Zero-weight entries always receive zero.
pub fn largest_remainder(total: u32, weights: &[f64]) -> Vec<u32> {
    let sum: f64 = weights.iter().sum();
    debug_assert!(sum > 0.0);
    let mut shares = Vec::with_capacity(weights.len());
    let mut fractions = Vec::with_capacity(weights.len());
    for (i, &w) in weights.iter().enumerate() {
        // total·w and fmod are exact for integral weights, so equal
        // fractional parts compare equal.
        let scaled = total as f64 * w;
        let rem = scaled % sum;
        shares.push(((scaled - rem) / sum).round() as i64);
        if w > 0.0 {
            fractions.push((rem, i));
        }
    }
    let mut remainder = total as i64 - shares.iter().sum::<i64>();
    // Largest fraction first; lower index wins ties.
    fractions.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut k = 0;
    while remainder > 0 {
        shares[fractions[k % fractions.len()].1] += 1;
        remainder -= 1;
        k += 1;
    }
    // Rounding can overshoot by a unit in pathological cases; take it back
    // from the smallest fractions.
    let mut k = fractions.len();
    while remainder < 0 {
        k = if k == 0 { fractions.len() - 1 } else { k - 1 };
        let idx = fractions[k].1;
        if shares[idx] > 0 {
            shares[idx] -= 1;
            remainder += 1;
        }
    }
    shares.into_iter().map(|s| s as u32).collect()
}

/// Spreads `steps`/`distance_m` over `pulses.len()` minutes with weights
/// `max(0, pulse − 1.05·min_hr)`. Missing pulses weigh zero. When every
/// weight is zero the block is split uniformly.
pub fn apportion_block(
    steps: u32,
    distance_m: f64,
    pulses: &[Option<f64>],
    min_hr: f64,
) -> Vec<(u32, f64)> {
    let n = pulses.len();
    if n == 0 {
        return Vec::new();
    }
    let cutoff = LTM_CUTOFF_FACTOR * min_hr;
    let mut weights: Vec<f64> = pulses
        .iter()
        .map(|p| p.map_or(0.0, |p| (p - cutoff).max(0.0)))
        .collect();
    let mut total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        weights = vec![1.0; n];
        total = n as f64;
    }
    let step_shares = largest_remainder(steps, &weights);
    step_shares
        .into_iter()
        .zip(&weights)
        .map(|(s, w)| (s, distance_m * (w / total)))
        .collect()
}

/// Redistributes one 15-minute block onto its minutes.
pub fn ltm_redistribute(
    block: &RawActivityBlock,
    pulses: &[Option<f64>],
    min_hr: f64,
) -> Result<Vec<(u32, f64)>> {
    if pulses.len() != ACTIVITY_BLOCK_MINUTES as usize {
        return Err(Error::Shape(format!(
            "activity block needs {} per-minute pulses, got {}",
            ACTIVITY_BLOCK_MINUTES,
            pulses.len()
        )));
    }
    Ok(apportion_block(block.steps, block.distance_m, pulses, min_hr))
}

/// A user's streams indexed for per-day assembly.
#[derive(Debug, Clone)]
pub struct UserTimeline {
    pub user: UserId,
    /// Per-minute mean pulse keyed by epoch minute.
    pulses: HashMap<i64, f64>,
    /// Sorted by start.
    blocks: Vec<RawActivityBlock>,
    sleep: Vec<RawSleepSegment>,
    schedule: Vec<ScheduleBlock>,
}

impl UserTimeline {
    /// Inputs must all belong to `user`; each list sorted by start time.
    pub fn new(
        user: UserId,
        hr: &[RawHrSample],
        blocks: &[RawActivityBlock],
        sleep: &[RawSleepSegment],
        schedule: &[ScheduleBlock],
    ) -> Self {
        let mut buckets: BTreeMap<i64, (f64, usize)> = BTreeMap::new();
        for s in hr {
            let e = buckets.entry(epoch_minute(s.timestamp)).or_insert((0.0, 0));
            e.0 += s.hr_bpm;
            e.1 += 1;
        }
        let pulses = buckets
            .into_iter()
            .map(|(m, (sum, n))| (m, sum / n as f64))
            .collect();
        UserTimeline {
            user,
            pulses,
            blocks: blocks.to_vec(),
            sleep: sleep.to_vec(),
            schedule: schedule.to_vec(),
        }
    }

    pub fn pulse_at(&self, epoch_min: i64) -> Option<f64> {
        self.pulses.get(&epoch_min).copied()
    }

    /// Every local date from the first to the last observed record.
    pub fn local_days(&self, tz_offset_minutes: i32) -> Vec<NaiveDate> {
        let mut minutes: Vec<i64> = Vec::new();
        if let (Some(a), Some(b)) = (self.pulses.keys().min(), self.pulses.keys().max()) {
            minutes.extend([*a, *b]);
        }
        if let (Some(a), Some(b)) = (self.blocks.first(), self.blocks.last()) {
            minutes.push(epoch_minute(a.block_start));
            minutes.push(epoch_minute(b.block_start) + ACTIVITY_BLOCK_MINUTES - 1);
        }
        for s in &self.sleep {
            minutes.push(epoch_minute(s.start));
            minutes.push(epoch_minute(s.end) - 1);
        }
        for s in &self.schedule {
            minutes.push(epoch_minute(s.start));
            minutes.push(epoch_minute(s.end) - 1);
        }
        let (Some(&lo), Some(&hi)) = (minutes.iter().min(), minutes.iter().max()) else {
            return Vec::new();
        };
        let first = minute_of_day(crate::domain::from_epoch_minute(lo), tz_offset_minutes).day();
        let last = minute_of_day(crate::domain::from_epoch_minute(hi), tz_offset_minutes).day();
        first
            .iter_days()
            .take_while(|d| *d <= last)
            .collect()
    }

    fn day_start(day: NaiveDate, tz_offset_minutes: i32) -> i64 {
        epoch_minute(local_day_start(day, tz_offset_minutes))
    }

    /// Non-missing per-minute pulses of a local day.
    pub fn day_pulses(&self, day: NaiveDate, tz_offset_minutes: i32) -> Vec<f64> {
        let start = Self::day_start(day, tz_offset_minutes);
        (start..start + MINUTES_PER_DAY as i64)
            .filter_map(|m| self.pulse_at(m))
            .collect()
    }

    pub fn all_pulses(&self) -> Vec<f64> {
        self.pulses.values().copied().collect()
    }
}

/// Assembles the 1440 minutes of one local day. Minutes not covered by a
/// sleep segment are `Unknown`; minutes without a schedule block carry no
/// label.
pub fn build_aligned_day(
    timeline: &UserTimeline,
    day: NaiveDate,
    profile: Option<PersonalHrProfile>,
    config: &AlignConfig,
) -> Result<AlignedDay> {
    let start = UserTimeline::day_start(day, config.tz_offset_minutes);
    let end = start + MINUTES_PER_DAY as i64;
    let mut minutes: Vec<AlignedMinute> = (0..MINUTES_PER_DAY)
        .map(|i| AlignedMinute {
            pulse: timeline.pulse_at(start + i as i64),
            ..AlignedMinute::empty(i)
        })
        .collect();

    let min_hr = profile.map_or(f64::INFINITY, |p| p.min_hr);
    let first_block = timeline
        .blocks
        .partition_point(|b| epoch_minute(b.block_start) + ACTIVITY_BLOCK_MINUTES <= start);
    for block in timeline.blocks[first_block..]
        .iter()
        .take_while(|b| epoch_minute(b.block_start) < end)
    {
        let b0 = epoch_minute(block.block_start);
        let pulses: Vec<Option<f64>> = (b0..b0 + ACTIVITY_BLOCK_MINUTES)
            .map(|m| timeline.pulse_at(m))
            .collect();
        for (k, (steps, dist)) in ltm_redistribute(block, &pulses, min_hr)?.into_iter().enumerate() {
            let m = b0 + k as i64;
            if (start..end).contains(&m) {
                let slot = &mut minutes[(m - start) as usize];
                slot.steps += steps;
                slot.distance_m += dist;
            }
        }
    }

    let first_seg = timeline.sleep.partition_point(|s| epoch_minute(s.end) <= start);
    for seg in timeline.sleep[first_seg..]
        .iter()
        .take_while(|s| epoch_minute(s.start) < end)
    {
        let (a, b) = (epoch_minute(seg.start).max(start), epoch_minute(seg.end).min(end));
        for m in a..b {
            minutes[(m - start) as usize].sleep = seg.state;
        }
    }

    let first_sched = timeline.schedule.partition_point(|s| epoch_minute(s.end) <= start);
    for block in timeline.schedule[first_sched..]
        .iter()
        .take_while(|s| epoch_minute(s.start) < end)
    {
        let (a, b) = (epoch_minute(block.start).max(start), epoch_minute(block.end).min(end));
        for m in a..b {
            minutes[(m - start) as usize].schedule = Some(block.label.clone());
        }
    }

    Ok(AlignedDay {
        user: timeline.user.clone(),
        date: day,
        minutes,
        profile,
    })
}

/// Aligns every day of one user.
pub fn align_user(timeline: &UserTimeline, config: &AlignConfig) -> Result<Vec<AlignedDay>> {
    let global = match config.profile_scope {
        ProfileScope::Global => compute_hr_profile(&timeline.all_pulses()).ok(),
        ProfileScope::Day => None,
    };
    timeline
        .local_days(config.tz_offset_minutes)
        .into_iter()
        .map(|day| {
            let profile = match config.profile_scope {
                ProfileScope::Global => global,
                ProfileScope::Day => {
                    compute_hr_profile(&timeline.day_pulses(day, config.tz_offset_minutes)).ok()
                }
            };
            build_aligned_day(timeline, day, profile, config)
        })
        .collect()
}

fn group_by_user<'a, T>(items: &'a [T], user: impl Fn(&T) -> &UserId) -> BTreeMap<UserId, &'a [T]> {
    let mut out = BTreeMap::new();
    let mut i = 0;
    while i < items.len() {
        let u = user(&items[i]);
        let j = i + items[i..].partition_point(|x| user(x) == u);
        out.insert(u.clone(), &items[i..j]);
        i = j;
    }
    out
}

/// Splits parsed streams into per-user timelines, ordered by user id.
pub fn user_timelines(streams: &RawStreams) -> Vec<UserTimeline> {
    let hr = group_by_user(&streams.hr, |s| &s.user);
    let act = group_by_user(&streams.activity, |s| &s.user);
    let sleep = group_by_user(&streams.sleep, |s| &s.user);
    let sched = group_by_user(&streams.schedule, |s| &s.user);
    let mut users: Vec<UserId> = hr
        .keys()
        .chain(act.keys())
        .chain(sleep.keys())
        .chain(sched.keys())
        .cloned()
        .collect();
    users.sort();
    users.dedup();
    users
        .into_iter()
        .map(|u| {
            UserTimeline::new(
                u.clone(),
                hr.get(&u).copied().unwrap_or_default(),
                act.get(&u).copied().unwrap_or_default(),
                sleep.get(&u).copied().unwrap_or_default(),
                sched.get(&u).copied().unwrap_or_default(),
            )
        })
        .collect()
}

/// Aligns a whole cohort; users are processed in parallel, output ordered by
/// (user, date).
pub fn align_cohort(streams: &RawStreams, config: &AlignConfig) -> Result<Vec<AlignedDay>> {
    let per_user: Vec<Result<Vec<AlignedDay>>> = user_timelines(streams)
        .par_iter()
        .map(|t| align_user(t, config))
        .collect();
    let mut out = Vec::new();
    for days in per_user {
        out.extend(days?);
    }
    Ok(out)
}

pub const ALIGNED_HEADER: &str = "user_id,date,minute,pulse,steps,distance_m,sleep,schedule_l2";
pub const IMPUTED_HEADER: &str =
    "user_id,date,minute,pulse,steps,distance_m,sleep,schedule_l2,sleep_source";
pub const PROFILE_HEADER: &str = "user_id,date,min_hr,max_hr,samples,low_confidence";

/// Writes minutes as CSV. With `with_source` the extra `sleep_source` column
/// (`observed`, `rule1`, `rule2`, `rule3`, `none`) is emitted.
pub fn write_aligned<W: Write>(out: W, days: &[AlignedDay], with_source: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    let header = if with_source { IMPUTED_HEADER } else { ALIGNED_HEADER };
    w.write_record(header.split(','))?;
    for day in days {
        let date = day.date.to_string();
        for m in &day.minutes {
            let pulse = m.pulse.map(|p| p.to_string()).unwrap_or_default();
            let mut rec = vec![
                day.user.to_string(),
                date.clone(),
                m.index.to_string(),
                pulse,
                m.steps.to_string(),
                m.distance_m.to_string(),
                m.sleep.as_str().to_string(),
                m.schedule.as_deref().unwrap_or("").to_string(),
            ];
            if with_source {
                let source = match (m.imputed_by, m.sleep) {
                    (Some(rule), _) => rule.as_str(),
                    (None, SleepState::Unknown) => "none",
                    (None, _) => "observed",
                };
                rec.push(source.to_string());
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn row_err(line: u64, message: impl Into<String>) -> Error {
    Error::MalformedRow {
        line,
        message: message.into(),
    }
}

/// Reads the aligned (or imputed) CSV back into days. Profiles are attached
/// from `profiles` where present.
pub fn read_aligned<R: Read>(
    input: R,
    taxonomy: &Taxonomy,
    profiles: &HashMap<(UserId, NaiveDate), PersonalHrProfile>,
) -> Result<Vec<AlignedDay>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rdr.headers()?.iter().collect::<Vec<_>>().join(",");
    let with_source = match header.as_str() {
        ALIGNED_HEADER => false,
        IMPUTED_HEADER => true,
        _ => {
            return Err(Error::MissingHeader {
                expected: ALIGNED_HEADER.into(),
            })
        }
    };
    let mut days: Vec<AlignedDay> = Vec::new();
    let mut users: HashMap<String, UserId> = HashMap::new();
    let mut record = csv::StringRecord::new();
    while rdr.read_record(&mut record)? {
        let line = record.position().map_or(0, |p| p.line());
        let user = users
            .entry(record[0].to_string())
            .or_insert_with(|| Arc::from(&record[0]))
            .clone();
        let date: NaiveDate = record[1]
            .parse()
            .map_err(|_| row_err(line, format!("bad date `{}`", &record[1])))?;
        let index: usize = record[2]
            .parse()
            .map_err(|_| row_err(line, "bad minute"))?;
        let pulse = if record[3].is_empty() {
            None
        } else {
            Some(record[3].parse().map_err(|_| row_err(line, "bad pulse"))?)
        };
        let steps = record[4].parse().map_err(|_| row_err(line, "bad steps"))?;
        let distance_m = record[5].parse().map_err(|_| row_err(line, "bad distance"))?;
        let sleep: SleepState = record[6].parse().map_err(|_| row_err(line, "bad sleep state"))?;
        let schedule = if record[7].is_empty() {
            None
        } else {
            Some(taxonomy.label(&record[7])?)
        };
        let imputed_by = if with_source {
            ImputeRule::parse_source(&record[8]).map_err(|_| row_err(line, "bad sleep_source"))?
        } else {
            None
        };
        let minute = AlignedMinute {
            index,
            pulse,
            steps,
            distance_m,
            sleep,
            schedule,
            imputed_by,
        };
        match days.last_mut() {
            Some(d) if d.user == user && d.date == date => d.minutes.push(minute),
            _ => {
                let profile = profiles.get(&(user.clone(), date)).copied();
                days.push(AlignedDay {
                    user,
                    date,
                    minutes: vec![minute],
                    profile,
                })
            }
        }
    }
    Ok(days)
}

pub fn write_profiles<W: Write>(out: W, days: &[AlignedDay]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(PROFILE_HEADER.split(','))?;
    for d in days {
        if let Some(p) = d.profile {
            w.write_record([
                d.user.to_string(),
                d.date.to_string(),
                p.min_hr.to_string(),
                p.max_hr.to_string(),
                p.samples.to_string(),
                p.low_confidence.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_profiles<R: Read>(input: R) -> Result<HashMap<(UserId, NaiveDate), PersonalHrProfile>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = rdr.headers()?.iter().collect::<Vec<_>>().join(",");
    if header != PROFILE_HEADER {
        return Err(Error::MissingHeader {
            expected: PROFILE_HEADER.into(),
        });
    }
    let mut out = HashMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let parse = |i: usize| -> Result<f64> {
            rec[i].parse().map_err(|_| row_err(line, "bad number"))
        };
        let date: NaiveDate = rec[1].parse().map_err(|_| row_err(line, "bad date"))?;
        out.insert(
            (Arc::from(&rec[0]), date),
            PersonalHrProfile {
                min_hr: parse(2)?,
                max_hr: parse(3)?,
                samples: rec[4].parse().map_err(|_| row_err(line, "bad count"))?,
                low_confidence: rec[5].parse().map_err(|_| row_err(line, "bad flag"))?,
            },
        );
    }
    Ok(out)
}

/// Local date of the block containing `t`, for callers that need to map
/// instants to days.
pub fn local_date(t: chrono::DateTime<chrono::Utc>, tz_offset_minutes: i32) -> NaiveDate {
    (t.naive_utc() + Duration::minutes(tz_offset_minutes as i64)).date()
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::{TimeZone, Utc};
    use num_rational::BigRational;
    use proptest::prelude::*;

    fn brute_percentile(values: &[f64], q: f64) -> f64 {
        // Independent path: selection by counting rather than a full sort.
        let n = values.len();
        let rank = q * (n - 1) as f64;
        let kth = |k: usize| -> f64 {
            *values
                .iter()
                .find(|&&v| {
                    let less = values.iter().filter(|&&x| x < v).count();
                    let leq = values.iter().filter(|&&x| x <= v).count();
                    less <= k && k < leq
                })
                .unwrap()
        };
        let lo = rank.floor() as usize;
        let hi = rank.ceil() as usize;
        kth(lo) + (kth(hi) - kth(lo)) * (rank - lo as f64)
    }

    #[test]
    fn downsample() {
        assert_eq!(downsample_hr(&[60.0, 62.0, 64.0, 66.0]), Some(63.0));
        assert_eq!(downsample_hr(&[70.0]), Some(70.0));
        assert_eq!(downsample_hr(&[]), None);
    }

    #[test]
    fn profile_examples() {
        let p = compute_hr_profile(&vec![60.0; 1440]).unwrap();
        assert_eq!((p.min_hr, p.max_hr), (60.0, 60.0));
        assert!(!p.low_confidence);

        let ramp: Vec<f64> = (1..=1440).map(|v| v as f64).collect();
        let p = compute_hr_profile(&ramp).unwrap();
        assert!((p.min_hr - brute_percentile(&ramp, 0.05)).abs() < 1e-9);
        assert!((p.max_hr - brute_percentile(&ramp, 0.9997)).abs() < 1e-9);
        assert!((p.min_hr - 72.95).abs() < 1e-9);
        assert!((p.max_hr - 1439.5683).abs() < 1e-9);

        assert!(matches!(compute_hr_profile(&[]), Err(Error::NoProfile)));
        let few = compute_hr_profile(&[50.0, 70.0]).unwrap();
        assert!(few.low_confidence);
        assert!(few.min_hr <= few.max_hr);
    }

    /// Exact rational proportional allocation followed by largest remainder.
    fn rational_apportion(total: u32, weights: &[i64]) -> Vec<u32> {
        let sum: i64 = weights.iter().sum();
        let quotas: Vec<BigRational> = weights
            .iter()
            .map(|&w| BigRational::new((total as i64 * w).into(), sum.into()))
            .collect();
        let mut shares: Vec<u32> = quotas
            .iter()
            .map(|q| q.floor().to_integer().try_into().unwrap())
            .collect();
        let mut order: Vec<usize> = (0..weights.len()).filter(|&i| weights[i] > 0).collect();
        order.sort_by(|&a, &b| {
            let fa = &quotas[a] - quotas[a].floor();
            let fb = &quotas[b] - quotas[b].floor();
            fb.cmp(&fa).then(a.cmp(&b))
        });
        let left = total - shares.iter().sum::<u32>();
        for &i in order.iter().take(left as usize) {
            shares[i] += 1;
        }
        shares
    }

    #[test]
    fn ltm_three_minute_example() {
        // weights 7.5, 17.5, 0 ⇒ in halves 15, 35, 0
        let oracle = rational_apportion(100, &[15, 35, 0]);
        assert_eq!(oracle, vec![30, 70, 0]);
        let got = apportion_block(100, 50.0, &[Some(60.0), Some(70.0), Some(50.0)], 50.0);
        let steps: Vec<u32> = got.iter().map(|p| p.0).collect();
        assert_eq!(steps, oracle);
        assert!((got[0].1 - 15.0).abs() < 1e-12);
        assert!((got[1].1 - 35.0).abs() < 1e-12);
        assert_eq!(got[2].1, 0.0);
    }

    #[test]
    fn ltm_zero_block() {
        let block = RawActivityBlock {
            user: Arc::from("u"),
            block_start: Utc.with_ymd_and_hms(2024, 1, 1, 10, 15, 0).unwrap(),
            steps: 0,
            distance_m: 0.0,
        };
        let out = ltm_redistribute(&block, &[Some(80.0); 15], 50.0).unwrap();
        assert!(out.iter().all(|&(s, d)| s == 0 && d == 0.0));
    }

    #[test]
    fn ltm_uniform_fallback() {
        let block = RawActivityBlock {
            user: Arc::from("u"),
            block_start: Utc.with_ymd_and_hms(2024, 1, 1, 10, 15, 0).unwrap(),
            steps: 15,
            distance_m: 30.0,
        };
        let mut pulses = vec![Some(50.0); 15];
        pulses[3] = None;
        let out = ltm_redistribute(&block, &pulses, 50.0).unwrap();
        assert!(out.iter().all(|&(s, d)| s == 1 && (d - 2.0).abs() < 1e-12));
    }

    #[test]
    fn ltm_shape_error() {
        let block = RawActivityBlock {
            user: Arc::from("u"),
            block_start: Utc.with_ymd_and_hms(2024, 1, 1, 10, 15, 0).unwrap(),
            steps: 15,
            distance_m: 30.0,
        };
        assert!(matches!(
            ltm_redistribute(&block, &[Some(60.0); 14], 50.0),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn largest_remainder_ties_go_to_lower_index() {
        assert_eq!(largest_remainder(1, &[1.0, 1.0, 1.0]), vec![1, 0, 0]);
        assert_eq!(largest_remainder(2, &[1.0, 1.0, 1.0]), vec![1, 1, 0]);
        assert_eq!(largest_remainder(7, &[0.0, 2.0, 0.0]), vec![0, 7, 0]);
    }

    fn pulse_vec() -> impl Strategy<Value = Vec<Option<f64>>> {
        prop::collection::vec(prop::option::weighted(0.9, 30.0f64..200.0), 15)
    }

    proptest! {
        #[test]
        fn percentile_matches_oracle(values in prop::collection::vec(20.0f64..220.0, 1..200), q in 0.0f64..=1.0) {
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            let got = percentile_sorted(&sorted, q);
            prop_assert!((got - brute_percentile(&values, q)).abs() <= 1e-12 * got.abs().max(1.0));
        }

        #[test]
        fn apportion_matches_rational_oracle(total in 0u32..5000, weights in prop::collection::vec(0i64..50, 1..20)) {
            prop_assume!(weights.iter().any(|&w| w > 0));
            let w: Vec<f64> = weights.iter().map(|&x| x as f64).collect();
            prop_assert_eq!(largest_remainder(total, &w), rational_apportion(total, &weights));
        }

        #[test]
        fn conservation(steps in 0u32..3000, dist in 0.0f64..5000.0, pulses in pulse_vec(), min_hr in 40.0f64..90.0) {
            let out = apportion_block(steps, dist, &pulses, min_hr);
            prop_assert_eq!(out.iter().map(|p| p.0).sum::<u32>(), steps);
            let d: f64 = out.iter().map(|p| p.1).sum();
            prop_assert!((d - dist).abs() <= 1e-9 * dist.max(f64::MIN_POSITIVE));
        }

        #[test]
        fn monotone_and_cutoff_null(steps in 0u32..3000, dist in 0.0f64..5000.0, pulses in pulse_vec(), min_hr in 40.0f64..90.0) {
            let out = apportion_block(steps, dist, &pulses, min_hr);
            let cutoff = LTM_CUTOFF_FACTOR * min_hr;
            let any_above = pulses.iter().any(|p| p.is_some_and(|p| p > cutoff));
            if any_above {
                for (i, p) in pulses.iter().enumerate() {
                    if p.is_none_or(|p| p <= cutoff) {
                        prop_assert_eq!(out[i], (0, 0.0));
                    }
                }
                for i in 0..15 {
                    for j in 0..15 {
                        if let (Some(a), Some(b)) = (pulses[i], pulses[j]) {
                            if a > b {
                                prop_assert!(out[i].1 >= out[j].1);
                            }
                        }
                    }
                }
            }
        }
    }

    fn ts(h: u32, m: u32) -> chrono::DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 1, 1, h, m, 0).unwrap()
    }

    #[test]
    fn aligned_day_fills_every_minute() {
        let user: UserId = Arc::from("u1");
        let hr: Vec<RawHrSample> = (0..4)
            .map(|k| RawHrSample {
                user: user.clone(),
                timestamp: ts(8, 0) + Duration::seconds(15 * k),
                hr_bpm: 60.0 + 2.0 * k as f64,
            })
            .collect();
        let sleep = vec![RawSleepSegment {
            user: user.clone(),
            start: ts(0, 0),
            end: ts(6, 0),
            state: SleepState::Sleep,
        }];
        let tl = UserTimeline::new(user.clone(), &hr, &[], &sleep, &[]);
        let config = AlignConfig {
            tz_offset_minutes: 0,
            profile_scope: ProfileScope::Day,
        };
        let days = align_user(&tl, &config).unwrap();
        assert_eq!(days.len(), 1);
        let d = &days[0];
        assert_eq!(d.minutes.len(), MINUTES_PER_DAY);
        assert!(crate::domain::validate_day_series(&d.minutes).is_clean());
        assert!(d.minutes.iter().all(|m| m.steps == 0 && m.distance_m == 0.0));
        assert_eq!(d.minutes[100].sleep, SleepState::Sleep);
        assert_eq!(d.minutes[600].sleep, SleepState::Unknown);
        assert_eq!(d.minutes[480].pulse, Some(63.0));
        assert_eq!(d.minutes[481].pulse, None);
        let p = d.profile.unwrap();
        assert!(p.low_confidence);
        assert_eq!(p.min_hr, 63.0);
    }

    #[test]
    fn aligned_day_redistributes_blocks_and_schedules() {
        let user: UserId = Arc::from("u1");
        let tax = Taxonomy::default();
        let hr: Vec<RawHrSample> = (0..15)
            .map(|k| RawHrSample {
                user: user.clone(),
                timestamp: ts(10, 15) + Duration::minutes(k),
                hr_bpm: if k < 5 { 100.0 } else { 40.0 },
            })
            .collect();
        let blocks = vec![RawActivityBlock {
            user: user.clone(),
            block_start: ts(10, 15),
            steps: 101,
            distance_m: 80.0,
        }];
        let sched = vec![ScheduleBlock {
            user: user.clone(),
            start: ts(10, 0),
            end: ts(11, 0),
            label: tax.label("Military Drills").unwrap(),
        }];
        let tl = UserTimeline::new(user.clone(), &hr, &blocks, &[], &sched);
        let config = AlignConfig {
            tz_offset_minutes: 0,
            profile_scope: ProfileScope::Day,
        };
        let profile = compute_hr_profile(&tl.day_pulses(ts(0, 0).date_naive(), 0)).unwrap();
        assert_eq!(profile.min_hr, 40.0);
        let d = build_aligned_day(&tl, ts(0, 0).date_naive(), Some(profile), &config).unwrap();
        let total: u32 = d.minutes.iter().map(|m| m.steps).sum();
        assert_eq!(total, 101);
        assert_eq!(d.minutes[615].steps + d.minutes[616].steps, 41);
        assert_eq!(d.minutes[625].steps, 0);
        assert_eq!(d.minutes[600].schedule.as_deref(), Some("Military Drills"));
        assert_eq!(d.minutes[660].schedule, None);
    }

    #[test]
    fn aligned_csv_round_trip() {
        let user: UserId = Arc::from("u1");
        let mut minutes: Vec<AlignedMinute> = (0..MINUTES_PER_DAY).map(AlignedMinute::empty).collect();
        minutes[3].pulse = Some(61.25);
        minutes[3].steps = 12;
        minutes[3].distance_m = 9.5;
        minutes[3].sleep = SleepState::Awake;
        minutes[3].imputed_by = Some(ImputeRule::Rule2);
        minutes[4].schedule = Some(Arc::from("Other"));
        let day = AlignedDay {
            user: user.clone(),
            date: NaiveDate::from_ymd_opt(2024, 1, 1).unwrap(),
            minutes,
            profile: Some(PersonalHrProfile {
                min_hr: 50.5,
                max_hr: 180.0,
                samples: 1,
                low_confidence: true,
            }),
        };
        let mut buf = Vec::new();
        write_aligned(&mut buf, std::slice::from_ref(&day), true).unwrap();
        let mut pbuf = Vec::new();
        write_profiles(&mut pbuf, std::slice::from_ref(&day)).unwrap();
        let profiles = read_profiles(pbuf.as_slice()).unwrap();
        let back = read_aligned(buf.as_slice(), &Taxonomy::default(), &profiles).unwrap();
        assert_eq!(back, vec![day]);
    }
}
