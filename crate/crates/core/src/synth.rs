//! Seeded synthetic cohorts with per-minute ground truth.
//!
//! Each user gets a resting heart rate and a heart-rate range drawn once.
//! Every minute carries a true sleep state, activity label, step count and
//! distance; the generator then emits the four raw streams the ingest module
//! reads, masking part of the sleep stream so imputation has something to
//! recover.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use chrono::{Duration, NaiveDate};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{largest_remainder, AlignedDay};
use crate::domain::{
    derive_seed, from_epoch_minute, local_day_start, epoch_minute, Label, ScheduleBlock,
    SleepState, UserId, MINUTES_PER_DAY,
};
use crate::impute::ImputeRule;
use crate::ingest::{
    write_activity, write_hr, write_schedule, write_sleep, RawActivityBlock, RawHrSample,
    RawSleepSegment, RawStreams, ACTIVITY_BLOCK_MINUTES,
};
use crate::taxonomy::{Taxonomy, AWAKE_LABEL, SLEEP_LABEL};
use crate::{Error, Result};

pub const TRUTH_HEADER: &str =
    "user_id,date,minute,true_sleep,true_activity,true_steps,true_distance_m";

const HR_SAMPLES_PER_MINUTE: usize = 4;
const HR_FLOOR_BPM: f64 = 30.0;
const HR_CEIL_BPM: f64 = 220.0;
/// Waking heart rate never drops below this fraction of the user's range.
const MIN_WAKING_FRAC: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivityProfile {
    /// Mean heart rate as a fraction of the user's range above resting.
    pub hr_mean_frac: f64,
    /// Per-minute heart-rate noise, bpm.
    pub hr_sd: f64,
    pub steps_mean: f64,
    pub steps_sd: f64,
    pub duration_min: usize,
}

impl ActivityProfile {
    const fn new(frac: f64, hr_sd: f64, steps_mean: f64, steps_sd: f64, duration: usize) -> Self {
        ActivityProfile {
            hr_mean_frac: frac,
            hr_sd,
            steps_mean,
            steps_sd,
            duration_min: duration,
        }
    }
}

/// A daily slot; one of `activities` is drawn per day.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleSlot {
    pub start_minute: usize,
    pub activities: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortConfig {
    pub n_users: usize,
    pub n_days: usize,
    pub seed: u64,
    pub start_date: NaiveDate,
    pub tz_offset_minutes: i32,
    pub profiles: BTreeMap<String, ActivityProfile>,
    pub resting_hr_mean: f64,
    pub resting_hr_sd: f64,
    pub hr_range_mean: f64,
    pub hr_range_sd: f64,
    /// Spread of a per-user shift shared by every waking activity's
    /// `hr_mean_frac`; individual fitness.
    pub user_fitness_sd: f64,
    /// Spread of an independent per-user, per-activity `hr_mean_frac` shift.
    pub user_intensity_sd: f64,
    /// Spread of the per-user multiplier on step rates.
    pub user_step_sd: f64,
    pub stride_m_mean: f64,
    pub stride_m_sd: f64,
    /// Noise of individual 15-second samples around the minute's heart rate.
    pub sample_noise_bpm: f64,
    pub hr_sample_jitter_s: f64,
    /// Local bedtime and wake time.
    pub sleep_start_minute: usize,
    pub sleep_end_minute: usize,
    pub sleep_jitter_minutes: usize,
    pub template: Vec<ScheduleSlot>,
    pub slot_jitter_minutes: usize,
    /// Fraction of all minutes left without sleep-stream coverage.
    pub sleep_dropout: f64,
    /// Fraction of minutes without any heart-rate sample.
    pub hr_dropout: f64,
    pub mask_run_min: usize,
    pub mask_run_max: usize,
}

fn slot(start: usize, activities: &[&str]) -> ScheduleSlot {
    ScheduleSlot {
        start_minute: start,
        activities: activities.iter().map(|s| s.to_string()).collect(),
    }
}

impl Default for CohortConfig {
    fn default() -> Self {
        let profiles = [
            (SLEEP_LABEL, ActivityProfile::new(0.0, 2.5, 0.0, 0.0, 480)),
            (AWAKE_LABEL, ActivityProfile::new(0.15, 4.0, 8.0, 10.0, 1)),
            ("Wake Up", ActivityProfile::new(0.25, 5.0, 20.0, 10.0, 20)),
            ("Running Exercise", ActivityProfile::new(0.75, 6.0, 160.0, 15.0, 60)),
            ("Fitness Test", ActivityProfile::new(0.8, 6.0, 120.0, 30.0, 45)),
            ("Military Drills", ActivityProfile::new(0.45, 6.0, 70.0, 20.0, 90)),
            ("Firearms Training", ActivityProfile::new(0.35, 5.0, 15.0, 10.0, 90)),
            ("Obstacle Course Training", ActivityProfile::new(0.7, 7.0, 90.0, 30.0, 60)),
            ("Security Mission", ActivityProfile::new(0.4, 6.0, 40.0, 20.0, 120)),
            ("Contact-Combat", ActivityProfile::new(0.65, 7.0, 60.0, 30.0, 60)),
            ("General Working", ActivityProfile::new(0.3, 5.0, 30.0, 15.0, 90)),
            ("Kitchen Duties", ActivityProfile::new(0.28, 5.0, 25.0, 12.0, 60)),
            ("Other", ActivityProfile::new(0.3, 6.0, 20.0, 15.0, 60)),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        CohortConfig {
            n_users: 20,
            n_days: 30,
            seed: 0,
            start_date: NaiveDate::from_ymd_opt(2024, 1, 1).expect("valid date"),
            tz_offset_minutes: 120,
            profiles,
            resting_hr_mean: 60.0,
            resting_hr_sd: 5.0,
            hr_range_mean: 120.0,
            hr_range_sd: 10.0,
            user_fitness_sd: 0.0,
            user_intensity_sd: 0.03,
            user_step_sd: 0.1,
            stride_m_mean: 0.75,
            stride_m_sd: 0.05,
            sample_noise_bpm: 1.0,
            hr_sample_jitter_s: 2.0,
            sleep_start_minute: 22 * 60,
            sleep_end_minute: 6 * 60,
            sleep_jitter_minutes: 15,
            template: vec![
                slot(360, &["Wake Up"]),
                slot(450, &["Running Exercise", "Fitness Test"]),
                slot(540, &["Military Drills", "Firearms Training"]),
                slot(720, &["Kitchen Duties", "General Working"]),
                slot(840, &["Obstacle Course Training", "Security Mission", "Contact-Combat"]),
                slot(1020, &["General Working", "Other"]),
            ],
            slot_jitter_minutes: 10,
            sleep_dropout: 0.40,
            hr_dropout: 0.02,
            mask_run_min: 30,
            mask_run_max: 240,
        }
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

impl CohortConfig {
    /// Activity order preserved within each user, with users differing in
    /// overall fitness.
    pub fn separable() -> Self {
        CohortConfig {
            user_fitness_sd: 0.05,
            user_intensity_sd: 0.12,
            ..CohortConfig::default()
        }
    }

    pub fn validate(&self, taxonomy: &Taxonomy) -> Result<()> {
        for (name, f) in [("sleep_dropout", self.sleep_dropout), ("hr_dropout", self.hr_dropout)] {
            if !(0.0..=1.0).contains(&f) {
                return Err(invalid(format!("{name} {f} not in [0, 1]")));
            }
        }
        if self.tz_offset_minutes % ACTIVITY_BLOCK_MINUTES as i32 != 0 {
            return Err(invalid("tz_offset_minutes must be a multiple of 15"));
        }
        if self.mask_run_min == 0 || self.mask_run_max < self.mask_run_min {
            return Err(invalid("mask run bounds must satisfy 1 <= min <= max"));
        }
        let spreads = [
            self.resting_hr_sd,
            self.hr_range_sd,
            self.user_fitness_sd,
            self.user_intensity_sd,
            self.user_step_sd,
            self.stride_m_sd,
            self.sample_noise_bpm,
            self.hr_sample_jitter_s,
        ];
        if spreads.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.hr_sample_jitter_s >= 7.5 {
            return Err(invalid("spreads must be finite, non-negative, jitter below 7.5 s"));
        }
        if !(self.hr_range_mean > 0.0 && self.resting_hr_mean > 0.0 && self.stride_m_mean > 0.0) {
            return Err(invalid("heart-rate and stride means must be positive"));
        }
        for required in [SLEEP_LABEL, AWAKE_LABEL] {
            if !self.profiles.contains_key(required) {
                return Err(invalid(format!("profiles must include `{required}`")));
            }
        }
        for (name, p) in &self.profiles {
            taxonomy.index_of(name)?;
            if p.duration_min == 0 {
                return Err(invalid(format!("`{name}` duration must be >= 1")));
            }
            if [p.hr_mean_frac, p.hr_sd, p.steps_mean, p.steps_sd]
                .iter()
                .any(|v| !(v.is_finite() && *v >= 0.0))
            {
                return Err(invalid(format!("`{name}` profile values must be non-negative")));
            }
        }
        let (bed, wake) = (self.sleep_start_minute, self.sleep_end_minute);
        let j = self.sleep_jitter_minutes;
        if bed + j >= MINUTES_PER_DAY || wake < j || wake >= bed.saturating_sub(j) {
            return Err(invalid("sleep window must run overnight from bedtime to wake time"));
        }
        let sj = self.slot_jitter_minutes;
        let mut free_from = wake.saturating_sub(sj);
        for s in &self.template {
            if s.activities.is_empty() {
                return Err(invalid("schedule slot without activities"));
            }
            let mut longest = 0;
            for a in &s.activities {
                if a == SLEEP_LABEL || a == AWAKE_LABEL {
                    return Err(invalid(format!("`{a}` cannot be scheduled")));
                }
                let p = self
                    .profiles
                    .get(a)
                    .ok_or_else(|| invalid(format!("no profile for scheduled `{a}`")))?;
                longest = longest.max(p.duration_min);
            }
            if s.start_minute < free_from + sj {
                return Err(invalid(format!(
                    "slot at minute {} overlaps the previous block",
                    s.start_minute
                )));
            }
            free_from = s.start_minute + sj + longest;
        }
        if free_from > bed - j {
            return Err(invalid("last slot runs into bedtime"));
        }
        Ok(())
    }

    /// Total minutes of the generated timeline per user.
    pub fn minutes_per_user(&self) -> usize {
        self.n_days * MINUTES_PER_DAY
    }
}

/// Per-minute ground truth of one local day.
#[derive(Debug, Clone, PartialEq)]
pub struct TruthDay {
    pub user: UserId,
    pub date: NaiveDate,
    /// `Sleep` or `Awake`, never `Unknown`.
    pub sleep: Vec<SleepState>,
    pub activity: Vec<Label>,
    pub steps: Vec<u32>,
    pub distance_m: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Cohort {
    pub streams: RawStreams,
    pub truth: Vec<TruthDay>,
}

struct UserDraws {
    resting: f64,
    range: f64,
    step_mult: f64,
    stride: f64,
    intensity: HashMap<String, f64>,
}

fn normal(mean: f64, sd: f64) -> Normal<f64> {
    Normal::new(mean, sd).expect("finite, non-negative sd")
}

fn user_draws(config: &CohortConfig, rng: &mut ChaCha8Rng) -> UserDraws {
    let resting = normal(config.resting_hr_mean, config.resting_hr_sd)
        .sample(rng)
        .clamp(40.0, 90.0);
    let range = normal(config.hr_range_mean, config.hr_range_sd)
        .sample(rng)
        .max(0.25 * config.hr_range_mean);
    let step_mult = normal(1.0, config.user_step_sd).sample(rng).max(0.2);
    let stride = normal(config.stride_m_mean, config.stride_m_sd)
        .sample(rng)
        .max(0.2 * config.stride_m_mean);
    let fitness = normal(0.0, config.user_fitness_sd).sample(rng);
    let intensity = config
        .profiles
        .keys()
        .map(|k| {
            let shift = if k == SLEEP_LABEL {
                0.0
            } else {
                fitness + normal(0.0, config.user_intensity_sd).sample(rng)
            };
            (k.clone(), shift)
        })
        .collect();
    UserDraws {
        resting,
        range,
        step_mult,
        stride,
        intensity,
    }
}

fn jitter(rng: &mut ChaCha8Rng, j: usize) -> i64 {
    rng.random_range(-(j as i64)..=j as i64)
}

/// Local-minute label plan of one day: sleep flags and the activity label of
/// each minute.
fn plan_day(
    config: &CohortConfig,
    taxonomy: &Taxonomy,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<bool>, Vec<Label>)> {
    let wake = config.sleep_end_minute - rng.random_range(0..=config.sleep_jitter_minutes);
    let bed = (config.sleep_start_minute as i64 + jitter(rng, config.sleep_jitter_minutes)) as usize;
    let asleep: Vec<bool> = (0..MINUTES_PER_DAY).map(|m| m < wake || m >= bed).collect();
    let sleep_label = taxonomy.label(SLEEP_LABEL)?;
    let awake_label = taxonomy.label(AWAKE_LABEL)?;
    let mut labels: Vec<Label> = asleep
        .iter()
        .map(|&s| if s { sleep_label.clone() } else { awake_label.clone() })
        .collect();
    for s in &config.template {
        let name = &s.activities[rng.random_range(0..s.activities.len())];
        let start = (s.start_minute as i64 + jitter(rng, config.slot_jitter_minutes)).max(wake as i64) as usize;
        let end = (start + config.profiles[name].duration_min).min(bed);
        let label = taxonomy.label(name)?;
        for l in &mut labels[start..end] {
            *l = label.clone();
        }
    }
    Ok((asleep, labels))
}

/// Uncovered-minute mask over a whole timeline: alternating covered gaps and
/// uncovered runs whose total is exactly `round(fraction · len)`.
pub fn dropout_mask(
    len: usize,
    fraction: f64,
    run_min: usize,
    run_max: usize,
    rng: &mut impl Rng,
) -> Vec<bool> {
    let target = (fraction * len as f64).round() as usize;
    let mut mask = vec![false; len];
    if target == 0 {
        return mask;
    }
    if target >= len {
        return vec![true; len];
    }
    let mut runs = Vec::new();
    let mut total = 0;
    while total < target {
        let l = rng.random_range(run_min..=run_max).min(target - total);
        runs.push(l);
        total += l;
    }
    let weights: Vec<f64> = (0..=runs.len()).map(|_| rng.random_range(0.05..1.0)).collect();
    let gaps = largest_remainder((len - target) as u32, &weights);
    let mut pos = gaps[0] as usize;
    for (run, gap) in runs.iter().zip(&gaps[1..]) {
        mask[pos..pos + run].fill(true);
        pos += run + *gap as usize;
    }
    mask
}

fn generate_user(
    index: usize,
    user: UserId,
    config: &CohortConfig,
    taxonomy: &Taxonomy,
) -> Result<(RawStreams, Vec<TruthDay>)> {
    let user_seed = derive_seed(config.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(user_seed);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(derive_seed(user_seed, 1));
    let draws = user_draws(config, &mut rng);
    let sample_noise = normal(0.0, config.sample_noise_bpm);

    let mut streams = RawStreams::default();
    let mut truth = Vec::with_capacity(config.n_days);
    for d in 0..config.n_days {
        let date = config.start_date + Duration::days(d as i64);
        let (asleep, labels) = plan_day(config, taxonomy, &mut rng)?;
        let day_start = epoch_minute(local_day_start(date, config.tz_offset_minutes));
        let mut steps = vec![0u32; MINUTES_PER_DAY];
        let mut distance = vec![0.0f64; MINUTES_PER_DAY];
        for m in 0..MINUTES_PER_DAY {
            let name: &str = &labels[m];
            let p = config.profiles.get(name).unwrap_or(&config.profiles[AWAKE_LABEL]);
            let mut frac = p.hr_mean_frac + draws.intensity.get(name).copied().unwrap_or(0.0);
            if !asleep[m] {
                frac = frac.max(MIN_WAKING_FRAC);
            }
            let hr = draws.resting + frac * draws.range + normal(0.0, p.hr_sd).sample(&mut rng);
            if !asleep[m] {
                let s = normal(p.steps_mean * draws.step_mult, p.steps_sd).sample(&mut rng);
                steps[m] = s.round().max(0.0) as u32;
                distance[m] = steps[m] as f64 * draws.stride;
            }
            let dropped = rng.random::<f64>() < config.hr_dropout;
            let minute_start = from_epoch_minute(day_start + m as i64);
            for k in 0..HR_SAMPLES_PER_MINUTE {
                let offset = 7.5 + 15.0 * k as f64
                    + rng.random_range(-1.0..=1.0) * config.hr_sample_jitter_s;
                let value = (hr + sample_noise.sample(&mut rng)).round().clamp(HR_FLOOR_BPM, HR_CEIL_BPM);
                if !dropped {
                    streams.hr.push(RawHrSample {
                        user: user.clone(),
                        timestamp: minute_start + Duration::milliseconds((offset * 1000.0).round() as i64),
                        hr_bpm: value,
                    });
                }
            }
        }
        for b in (0..MINUTES_PER_DAY).step_by(ACTIVITY_BLOCK_MINUTES as usize) {
            let r = b..b + ACTIVITY_BLOCK_MINUTES as usize;
            streams.activity.push(RawActivityBlock {
                user: user.clone(),
                block_start: from_epoch_minute(day_start + b as i64),
                steps: steps[r.clone()].iter().sum(),
                distance_m: distance[r].iter().sum(),
            });
        }
        let mut m = 0;
        while m < MINUTES_PER_DAY {
            let label = labels[m].clone();
            let mut e = m + 1;
            while e < MINUTES_PER_DAY && labels[e] == label {
                e += 1;
            }
            if taxonomy.parent_of_index(taxonomy.index_of(&label)?) == crate::taxonomy::Level1::Activity {
                streams.schedule.push(ScheduleBlock {
                    user: user.clone(),
                    start: from_epoch_minute(day_start + m as i64),
                    end: from_epoch_minute(day_start + e as i64),
                    label,
                });
            }
            m = e;
        }
        truth.push(TruthDay {
            user: user.clone(),
            date,
            sleep: asleep
                .iter()
                .map(|&s| if s { SleepState::Sleep } else { SleepState::Awake })
                .collect(),
            activity: labels,
            steps,
            distance_m: distance,
        });
    }

    let total = config.minutes_per_user();
    let mask = dropout_mask(
        total,
        config.sleep_dropout,
        config.mask_run_min,
        config.mask_run_max,
        &mut mask_rng,
    );
    let state_at = |i: usize| truth[i / MINUTES_PER_DAY].sleep[i % MINUTES_PER_DAY];
    let timeline_start = epoch_minute(local_day_start(config.start_date, config.tz_offset_minutes));
    let mut i = 0;
    while i < total {
        if mask[i] {
            i += 1;
            continue;
        }
        let state = state_at(i);
        let mut e = i + 1;
        while e < total && !mask[e] && state_at(e) == state {
            e += 1;
        }
        streams.sleep.push(RawSleepSegment {
            user: user.clone(),
            start: from_epoch_minute(timeline_start + i as i64),
            end: from_epoch_minute(timeline_start + e as i64),
            state,
        });
        i = e;
    }
    Ok((streams, truth))
}

pub fn user_id(index: usize, n_users: usize) -> UserId {
    let width = n_users.max(1).to_string().len().max(2);
    Arc::from(format!("u{:0width$}", index + 1))
}

/// Generates every user in parallel; output order and content do not depend
/// on scheduling.
pub fn generate_cohort(config: &CohortConfig, taxonomy: &Taxonomy) -> Result<Cohort> {
    config.validate(taxonomy)?;
    let parts: Vec<(RawStreams, Vec<TruthDay>)> = (0..config.n_users)
        .into_par_iter()
        .map(|u| generate_user(u, user_id(u, config.n_users), config, taxonomy))
        .collect::<Result<_>>()?;
    let mut cohort = Cohort::default();
    for (s, t) in parts {
        cohort.streams.hr.extend(s.hr);
        cohort.streams.activity.extend(s.activity);
        cohort.streams.sleep.extend(s.sleep);
        cohort.streams.schedule.extend(s.schedule);
        cohort.truth.extend(t);
    }
    Ok(cohort)
}

pub fn write_truth<W: Write>(out: W, truth: &[TruthDay]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(TRUTH_HEADER.split(','))?;
    for day in truth {
        let date = day.date.to_string();
        for m in 0..day.sleep.len() {
            w.write_record([
                &*day.user,
                &date,
                &m.to_string(),
                day.sleep[m].as_str(),
                &*day.activity[m],
                &day.steps[m].to_string(),
                &day.distance_m[m].to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads `truth.csv` back into complete days. Days must list all 1440
/// minutes in order.
pub fn read_truth<R: Read>(input: R, taxonomy: &Taxonomy) -> Result<Vec<TruthDay>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(input);
    let mut records = rdr.records();
    let header = records.next().transpose()?.map(|h| h.iter().collect::<Vec<_>>().join(","));
    if header.as_deref() != Some(TRUTH_HEADER) {
        return Err(Error::MissingHeader {
            expected: TRUTH_HEADER.into(),
        });
    }
    let mut days: Vec<TruthDay> = Vec::new();
    for (k, rec) in records.enumerate() {
        let rec = rec?;
        let line = k as u64 + 2;
        let bad = |msg: String| Error::MalformedRow { line, message: msg };
        if rec.len() != 7 {
            return Err(bad(format!("expected 7 fields, found {}", rec.len())));
        }
        let date: NaiveDate = rec[1].parse().map_err(|_| bad(format!("bad date `{}`", &rec[1])))?;
        let minute: usize = rec[2].parse().map_err(|_| bad(format!("bad minute `{}`", &rec[2])))?;
        let sleep: SleepState = rec[3].parse().map_err(|_| bad(format!("bad state `{}`", &rec[3])))?;
        let steps: u32 = rec[5].parse().map_err(|_| bad(format!("bad steps `{}`", &rec[5])))?;
        let dist: f64 = rec[6].parse().map_err(|_| bad(format!("bad distance `{}`", &rec[6])))?;
        let fresh = days.last().is_none_or(|d| &*d.user != &rec[0] || d.date != date);
        if fresh {
            days.push(TruthDay {
                user: Arc::from(&rec[0]),
                date,
                sleep: Vec::with_capacity(MINUTES_PER_DAY),
                activity: Vec::with_capacity(MINUTES_PER_DAY),
                steps: Vec::with_capacity(MINUTES_PER_DAY),
                distance_m: Vec::with_capacity(MINUTES_PER_DAY),
            });
        }
        let day = days.last_mut().expect("day pushed");
        if minute != day.sleep.len() {
            return Err(bad(format!("expected minute {}, found {minute}", day.sleep.len())));
        }
        day.sleep.push(sleep);
        day.activity.push(taxonomy.label(&rec[4])?);
        day.steps.push(steps);
        day.distance_m.push(dist);
    }
    if let Some(d) = days.iter().find(|d| d.sleep.len() != MINUTES_PER_DAY) {
        return Err(Error::MisalignedSeries(format!(
            "{} {} has {} minutes",
            d.user,
            d.date,
            d.sleep.len()
        )));
    }
    Ok(days)
}

pub const COHORT_FILES: [&str; 5] = ["hr.csv", "activity.csv", "sleep.csv", "schedule.csv", "truth.csv"];

/// Writes the four stream files and `truth.csv` into `dir`.
pub fn write_cohort(cohort: &Cohort, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let open = |name: &str| -> Result<std::io::BufWriter<std::fs::File>> {
        Ok(std::io::BufWriter::new(std::fs::File::create(dir.join(name))?))
    };
    write_hr(open(COHORT_FILES[0])?, &cohort.streams.hr)?;
    write_activity(open(COHORT_FILES[1])?, &cohort.streams.activity)?;
    write_sleep(open(COHORT_FILES[2])?, &cohort.streams.sleep)?;
    write_schedule(open(COHORT_FILES[3])?, &cohort.streams.schedule)?;
    write_truth(open(COHORT_FILES[4])?, &cohort.truth)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RuleAgreement {
    /// Masked minutes this rule resolved.
    pub imputed: u64,
    pub correct: u64,
    /// `correct / imputed`; absent when the rule never fired.
    pub precision: Option<f64>,
    /// `correct` over masked minutes whose true state the rule can assign.
    pub recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskReport {
    pub total_minutes: u64,
    /// Minutes without an observed sleep state.
    pub masked_minutes: u64,
    pub resolved: u64,
    pub correct: u64,
    /// `correct / resolved`.
    pub agreement: Option<f64>,
    /// `correct / masked`.
    pub recall: Option<f64>,
    pub residual_unknown: u64,
    pub residual_unknown_fraction: f64,
    pub rules: BTreeMap<String, RuleAgreement>,
}

fn ratio(a: u64, b: u64) -> Option<f64> {
    (b > 0).then(|| a as f64 / b as f64)
}

/// Compares imputed states with the generator's truth. A minute counts as
/// masked when it was imputed or is still unknown.
pub fn mask_report(truth: &[TruthDay], imputed: &[AlignedDay]) -> Result<MaskReport> {
    let index: HashMap<(&str, NaiveDate), &TruthDay> =
        truth.iter().map(|t| ((&*t.user, t.date), t)).collect();
    let rules = [ImputeRule::Rule1, ImputeRule::Rule2, ImputeRule::Rule3];
    let mut imputed_by = [0u64; 3];
    let mut correct_by = [0u64; 3];
    let (mut total, mut masked, mut resolved, mut correct, mut unknown) = (0u64, 0u64, 0u64, 0u64, 0u64);
    let (mut masked_sleep, mut masked_awake) = (0u64, 0u64);
    for day in imputed {
        let t = index.get(&(&*day.user, day.date)).ok_or_else(|| {
            Error::MisalignedSeries(format!("no ground truth for {} {}", day.user, day.date))
        })?;
        if t.sleep.len() != day.minutes.len() {
            return Err(Error::MisalignedSeries(format!(
                "{} {}: {} truth minutes vs {} imputed",
                day.user,
                day.date,
                t.sleep.len(),
                day.minutes.len()
            )));
        }
        for (m, &truth_state) in day.minutes.iter().zip(&t.sleep) {
            total += 1;
            if m.sleep == SleepState::Unknown {
                unknown += 1;
            }
            if m.imputed_by.is_none() && m.sleep.is_known() {
                continue;
            }
            masked += 1;
            match truth_state {
                SleepState::Sleep => masked_sleep += 1,
                _ => masked_awake += 1,
            }
            if let Some(rule) = m.imputed_by {
                let k = rules.iter().position(|r| *r == rule).expect("known rule");
                resolved += 1;
                imputed_by[k] += 1;
                if m.sleep == truth_state {
                    correct += 1;
                    correct_by[k] += 1;
                }
            }
        }
    }
    let eligible = [masked_sleep, masked_awake, masked];
    let per_rule = rules
        .iter()
        .enumerate()
        .map(|(k, r)| {
            (
                r.as_str().to_string(),
                RuleAgreement {
                    imputed: imputed_by[k],
                    correct: correct_by[k],
                    precision: ratio(correct_by[k], imputed_by[k]),
                    recall: ratio(correct_by[k], eligible[k]),
                },
            )
        })
        .collect();
    Ok(MaskReport {
        total_minutes: total,
        masked_minutes: masked,
        resolved,
        correct,
        agreement: ratio(correct, resolved),
        recall: ratio(correct, masked),
        residual_unknown: unknown,
        residual_unknown_fraction: ratio(unknown, total).unwrap_or(0.0),
        rules: per_rule,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::{align_cohort, AlignConfig};
    use crate::impute::{impute_cohort, ImputeConfig};
    use crate::ingest::{parse_activity_blocks, parse_hr_stream, parse_schedule, parse_sleep_segments};

    fn small(users: usize, days: usize) -> CohortConfig {
        CohortConfig {
            n_users: users,
            n_days: days,
            seed: 5,
            ..CohortConfig::default()
        }
    }

    fn files(c: &Cohort) -> Vec<Vec<u8>> {
        let mut out = vec![Vec::new(); 5];
        write_hr(&mut out[0], &c.streams.hr).unwrap();
        write_activity(&mut out[1], &c.streams.activity).unwrap();
        write_sleep(&mut out[2], &c.streams.sleep).unwrap();
        write_schedule(&mut out[3], &c.streams.schedule).unwrap();
        write_truth(&mut out[4], &c.truth).unwrap();
        out
    }

    fn covered_minutes(c: &Cohort) -> i64 {
        c.streams
            .sleep
            .iter()
            .map(|s| epoch_minute(s.end) - epoch_minute(s.start))
            .sum()
    }

    #[test]
    fn default_config_is_valid() {
        CohortConfig::default().validate(&Taxonomy::default()).unwrap();
    }

    #[test]
    fn no_users_gives_header_only_files() {
        let c = generate_cohort(&small(0, 3), &Taxonomy::default()).unwrap();
        let f = files(&c);
        for (bytes, header) in f.iter().zip([
            crate::ingest::HR_HEADER,
            crate::ingest::ACTIVITY_HEADER,
            crate::ingest::SLEEP_HEADER,
            crate::ingest::SCHEDULE_HEADER,
            TRUTH_HEADER,
        ]) {
            assert_eq!(String::from_utf8(bytes.clone()).unwrap(), format!("{header}\n"));
        }
    }

    #[test]
    fn zero_dropout_covers_every_minute() {
        let cfg = CohortConfig {
            sleep_dropout: 0.0,
            ..small(2, 3)
        };
        let c = generate_cohort(&cfg, &Taxonomy::default()).unwrap();
        assert_eq!(covered_minutes(&c), 2 * 3 * 1440);
        let sleep_minutes: usize = c
            .streams
            .sleep
            .iter()
            .filter(|s| s.state == SleepState::Sleep)
            .map(|s| (epoch_minute(s.end) - epoch_minute(s.start)) as usize)
            .sum();
        let truth_sleep: usize = c
            .truth
            .iter()
            .map(|t| t.sleep.iter().filter(|s| **s == SleepState::Sleep).count())
            .sum();
        assert_eq!(sleep_minutes, truth_sleep);
    }

    #[test]
    fn dropout_fraction_is_met() {
        let c = generate_cohort(&small(4, 10), &Taxonomy::default()).unwrap();
        let total = 4 * 10 * 1440;
        let uncovered = 1.0 - covered_minutes(&c) as f64 / total as f64;
        assert!((uncovered - 0.40).abs() <= 0.02, "uncovered {uncovered}");
    }

    #[test]
    fn dropout_mask_runs_respect_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mask = dropout_mask(20_000, 0.3, 30, 240, &mut rng);
        assert_eq!(mask.iter().filter(|m| **m).count(), 6000);
        assert_eq!(dropout_mask(100, 1.0, 30, 240, &mut rng), vec![true; 100]);
        assert_eq!(dropout_mask(100, 0.0, 30, 240, &mut rng), vec![false; 100]);
    }

    #[test]
    fn same_seed_same_bytes() {
        let t = Taxonomy::default();
        let a = files(&generate_cohort(&small(3, 2), &t).unwrap());
        let b = files(&generate_cohort(&small(3, 2), &t).unwrap());
        assert_eq!(a, b);
        let other = CohortConfig {
            seed: 6,
            ..small(3, 2)
        };
        assert_ne!(a[0], files(&generate_cohort(&other, &t).unwrap())[0]);
    }

    #[test]
    fn emitted_files_parse() {
        let t = Taxonomy::default();
        let c = generate_cohort(&small(2, 2), &t).unwrap();
        let f = files(&c);
        assert_eq!(parse_hr_stream(f[0].as_slice()).unwrap(), c.streams.hr);
        assert_eq!(parse_activity_blocks(f[1].as_slice()).unwrap(), c.streams.activity);
        assert_eq!(parse_sleep_segments(f[2].as_slice()).unwrap().len(), c.streams.sleep.len());
        assert_eq!(parse_schedule(f[3].as_slice(), &t).unwrap().len(), c.streams.schedule.len());
        assert_eq!(read_truth(f[4].as_slice(), &t).unwrap(), c.truth);
    }

    #[test]
    fn steps_are_conserved_through_alignment() {
        let t = Taxonomy::default();
        let c = generate_cohort(&small(3, 4), &t).unwrap();
        let days = align_cohort(&c.streams, &AlignConfig::default()).unwrap();
        assert_eq!(days.len(), c.truth.len());
        for (day, truth) in days.iter().zip(&c.truth) {
            assert_eq!((&day.user, day.date), (&truth.user, truth.date));
            let aligned: u64 = day.minutes.iter().map(|m| m.steps as u64).sum();
            let expected: u64 = truth.steps.iter().map(|&s| s as u64).sum();
            assert_eq!(aligned, expected);
            let da: f64 = day.minutes.iter().map(|m| m.distance_m).sum();
            let de: f64 = truth.distance_m.iter().sum();
            assert!((da - de).abs() <= 1e-9 * de.max(1.0));
        }
    }

    #[test]
    fn schedule_matches_truth_labels() {
        let t = Taxonomy::default();
        let cfg = CohortConfig {
            sleep_dropout: 0.0,
            ..small(1, 2)
        };
        let c = generate_cohort(&cfg, &t).unwrap();
        let days = align_cohort(&c.streams, &AlignConfig::default()).unwrap();
        for (day, truth) in days.iter().zip(&c.truth) {
            for (m, (label, state)) in day.minutes.iter().zip(truth.activity.iter().zip(&truth.sleep)) {
                assert_eq!(m.sleep, *state);
                match &m.schedule {
                    Some(s) => assert_eq!(s, label),
                    None => assert!(&**label == SLEEP_LABEL || &**label == AWAKE_LABEL),
                }
            }
        }
    }

    #[test]
    fn zero_noise_separates_activity_bands() {
        let mut cfg = CohortConfig {
            hr_dropout: 0.0,
            user_intensity_sd: 0.0,
            sample_noise_bpm: 0.0,
            ..small(2, 2)
        };
        for p in cfg.profiles.values_mut() {
            p.hr_sd = 0.0;
        }
        let t = Taxonomy::default();
        let c = generate_cohort(&cfg, &t).unwrap();
        let days = align_cohort(&c.streams, &AlignConfig::default()).unwrap();
        for user in ["u01", "u02"] {
            let mut bands: BTreeMap<String, (f64, f64)> = BTreeMap::new();
            for (day, truth) in days.iter().zip(&c.truth).filter(|(d, _)| &*d.user == user) {
                for (m, l) in day.minutes.iter().zip(&truth.activity) {
                    let p = m.pulse.unwrap();
                    let e = bands.entry(l.to_string()).or_insert((p, p));
                    e.0 = e.0.min(p);
                    e.1 = e.1.max(p);
                }
            }
            let v: Vec<_> = bands.into_iter().collect();
            for (i, (a, ra)) in v.iter().enumerate() {
                for (b, rb) in &v[i + 1..] {
                    let fa = cfg.profiles[a].hr_mean_frac;
                    let fb = cfg.profiles[b].hr_mean_frac;
                    if (fa - fb).abs() > 0.02 {
                        assert!(ra.1 < rb.0 || rb.1 < ra.0, "{a} {ra:?} overlaps {b} {rb:?}");
                    }
                }
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let t = Taxonomy::default();
        let bad = [
            CohortConfig {
                sleep_dropout: 1.5,
                ..small(1, 1)
            },
            CohortConfig {
                tz_offset_minutes: 7,
                ..small(1, 1)
            },
            CohortConfig {
                template: vec![slot(400, &["Running Exercise"]), slot(420, &["Other"])],
                ..small(1, 1)
            },
            CohortConfig {
                template: vec![slot(400, &["Jousting"])],
                ..small(1, 1)
            },
        ];
        for cfg in bad {
            assert!(generate_cohort(&cfg, &t).is_err());
        }
        let mut cfg = small(1, 1);
        cfg.profiles.get_mut("Other").unwrap().duration_min = 0;
        assert!(cfg.validate(&t).is_err());
    }

    fn imputed_cohort(cfg: &CohortConfig) -> (Cohort, Vec<AlignedDay>) {
        let c = generate_cohort(cfg, &Taxonomy::default()).unwrap();
        let days = align_cohort(&c.streams, &AlignConfig::default()).unwrap();
        let (days, _) = impute_cohort(days, &ImputeConfig::default());
        (c, days)
    }

    #[test]
    fn report_of_perfect_imputation() {
        let (c, mut days) = imputed_cohort(&small(2, 3));
        for (day, truth) in days.iter_mut().zip(&c.truth) {
            for (m, s) in day.minutes.iter_mut().zip(&truth.sleep) {
                if m.imputed_by.is_some() || m.sleep == SleepState::Unknown {
                    m.sleep = *s;
                    m.imputed_by = Some(if *s == SleepState::Sleep {
                        ImputeRule::Rule1
                    } else {
                        ImputeRule::Rule2
                    });
                }
            }
        }
        let r = mask_report(&c.truth, &days).unwrap();
        assert_eq!(r.agreement, Some(1.0));
        assert_eq!(r.recall, Some(1.0));
        for rule in ["rule1", "rule2"] {
            assert_eq!(r.rules[rule].precision, Some(1.0));
            assert_eq!(r.rules[rule].recall, Some(1.0));
        }
        assert_eq!(r.residual_unknown, 0);
    }

    #[test]
    fn report_when_nothing_is_resolved() {
        let cfg = small(2, 3);
        let c = generate_cohort(&cfg, &Taxonomy::default()).unwrap();
        let days = align_cohort(&c.streams, &AlignConfig::default()).unwrap();
        let r = mask_report(&c.truth, &days).unwrap();
        assert_eq!(r.recall, Some(0.0));
        assert_eq!(r.agreement, None);
        assert!((r.residual_unknown_fraction - cfg.sleep_dropout).abs() < 1e-3);
    }

    #[test]
    fn report_rejects_misaligned_series() {
        let (c, mut days) = imputed_cohort(&small(1, 1));
        days[0].minutes.pop();
        assert!(matches!(mask_report(&c.truth, &days), Err(Error::MisalignedSeries(_))));
        assert!(matches!(mask_report(&[], &days), Err(Error::MisalignedSeries(_))));
    }

    #[test]
    fn imputation_recovers_most_masked_minutes() {
        let (c, days) = imputed_cohort(&small(3, 5));
        let r = mask_report(&c.truth, &days).unwrap();
        assert!(r.residual_unknown_fraction <= 0.08, "{r:?}");
        assert!(r.agreement.unwrap() >= 0.9, "{r:?}");
    }
}
