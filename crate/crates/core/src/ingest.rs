//! Strict parsers for the four exported CSV streams, and their canonical
//! writers.
//!
//! | file           | header                                |
//! |----------------|---------------------------------------|
//! | `hr.csv`       | `user_id,timestamp,hr_bpm`            |
//! | `activity.csv` | `user_id,block_start,steps,distance_m`|
//! | `sleep.csv`    | `user_id,start,end,state`             |
//! | `schedule.csv` | `user_id,start,end,activity_l2`       |
//!
//! Timestamps are ISO-8601 in UTC. Any structural problem rejects the whole
//! file; nothing is silently skipped.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::Arc;

use chrono::{DateTime, SecondsFormat, Timelike, Utc};

use crate::domain::{epoch_minute, ScheduleBlock, SleepState, UserId};
use crate::taxonomy::Taxonomy;
use crate::{Error, Result};

pub const HR_HEADER: &str = "user_id,timestamp,hr_bpm";
pub const ACTIVITY_HEADER: &str = "user_id,block_start,steps,distance_m";
pub const SLEEP_HEADER: &str = "user_id,start,end,state";
pub const SCHEDULE_HEADER: &str = "user_id,start,end,activity_l2";

/// Length of a device activity block in minutes.
pub const ACTIVITY_BLOCK_MINUTES: i64 = 15;

#[derive(Debug, Clone, PartialEq)]
pub struct RawHrSample {
    pub user: UserId,
    pub timestamp: DateTime<Utc>,
    pub hr_bpm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawActivityBlock {
    pub user: UserId,
    pub block_start: DateTime<Utc>,
    pub steps: u32,
    pub distance_m: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawSleepSegment {
    pub user: UserId,
    pub start: DateTime<Utc>,
    pub end: DateTime<Utc>,
    /// Always [`SleepState::Sleep`] or [`SleepState::Awake`].
    pub state: SleepState,
}

/// Deduplicates user-id allocations across rows.
#[derive(Default)]
struct Interner(HashMap<String, UserId>);

impl Interner {
    fn get(&mut self, s: &str) -> UserId {
        if let Some(id) = self.0.get(s) {
            return id.clone();
        }
        let id: UserId = Arc::from(s);
        self.0.insert(s.to_string(), id.clone());
        id
    }
}

fn for_each_row<R, F>(reader: R, header: &str, mut f: F) -> Result<()>
where
    R: Read,
    F: FnMut(u64, &csv::StringRecord) -> Result<()>,
{
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut record = csv::StringRecord::new();
    if !rdr.read_record(&mut record)? {
        return Err(Error::MissingHeader {
            expected: header.into(),
        });
    }
    let found = record.iter().map(str::trim).collect::<Vec<_>>().join(",");
    if found.trim_start_matches('\u{feff}') != header {
        return Err(Error::MissingHeader {
            expected: header.into(),
        });
    }
    let width = header.split(',').count();
    while rdr.read_record(&mut record)? {
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != width {
            return Err(Error::MalformedRow {
                line,
                message: format!("expected {width} fields, found {}", record.len()),
            });
        }
        f(line, &record)?;
    }
    Ok(())
}

fn malformed(line: u64, message: impl Into<String>) -> Error {
    Error::MalformedRow {
        line,
        message: message.into(),
    }
}

fn field_user(line: u64, s: &str, interner: &mut Interner) -> Result<UserId> {
    let s = s.trim();
    if s.is_empty() {
        return Err(malformed(line, "empty user_id"));
    }
    Ok(interner.get(s))
}

fn field_timestamp(line: u64, name: &str, s: &str) -> Result<DateTime<Utc>> {
    let parsed = DateTime::parse_from_rfc3339(s.trim())
        .map_err(|e| malformed(line, format!("{name}: invalid timestamp `{s}`: {e}")))?;
    if parsed.offset().local_minus_utc() != 0 {
        return Err(malformed(line, format!("{name}: timestamp `{s}` is not UTC")));
    }
    Ok(parsed.with_timezone(&Utc))
}

fn field_real(line: u64, name: &str, s: &str) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| malformed(line, format!("{name}: `{s}` is not a number")))?;
    if !v.is_finite() {
        return Err(malformed(line, format!("{name}: `{s}` is not finite")));
    }
    Ok(v)
}

fn is_minute_aligned(t: DateTime<Utc>) -> bool {
    t.second() == 0 && t.nanosecond() == 0
}

pub fn format_timestamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::AutoSi, true)
}

pub fn parse_hr_stream<R: Read>(reader: R) -> Result<Vec<RawHrSample>> {
    let mut interner = Interner::default();
    let mut out = Vec::new();
    for_each_row(reader, HR_HEADER, |line, r| {
        let user = field_user(line, &r[0], &mut interner)?;
        let timestamp = field_timestamp(line, "timestamp", &r[1])?;
        let hr_bpm = field_real(line, "hr_bpm", &r[2])?;
        if hr_bpm <= 0.0 {
            return Err(malformed(line, format!("hr_bpm must be positive, got {hr_bpm}")));
        }
        out.push(RawHrSample {
            user,
            timestamp,
            hr_bpm,
        });
        Ok(())
    })?;
    // Stable sort: among equal (user, timestamp) the earliest row survives.
    out.sort_by(|a, b| (&a.user, a.timestamp).cmp(&(&b.user, b.timestamp)));
    out.dedup_by(|later, earlier| later.user == earlier.user && later.timestamp == earlier.timestamp);
    Ok(out)
}

pub fn parse_activity_blocks<R: Read>(reader: R) -> Result<Vec<RawActivityBlock>> {
    let mut interner = Interner::default();
    let mut rows = Vec::new();
    for_each_row(reader, ACTIVITY_HEADER, |line, r| {
        let user = field_user(line, &r[0], &mut interner)?;
        let block_start = field_timestamp(line, "block_start", &r[1])?;
        if !is_minute_aligned(block_start) || epoch_minute(block_start) % ACTIVITY_BLOCK_MINUTES != 0 {
            return Err(Error::Misaligned {
                line,
                message: format!("block_start {} is not on a 15-minute boundary", &r[1]),
            });
        }
        let steps: i64 = r[2]
            .trim()
            .parse()
            .map_err(|_| malformed(line, format!("steps: `{}` is not an integer", &r[2])))?;
        if steps < 0 {
            return Err(malformed(line, format!("steps must be non-negative, got {steps}")));
        }
        let steps = u32::try_from(steps).map_err(|_| malformed(line, "steps out of range"))?;
        let distance_m = field_real(line, "distance_m", &r[3])?;
        if distance_m < 0.0 {
            return Err(malformed(
                line,
                format!("distance_m must be non-negative, got {distance_m}"),
            ));
        }
        rows.push((
            line,
            RawActivityBlock {
                user,
                block_start,
                steps,
                distance_m,
            },
        ));
        Ok(())
    })?;
    rows.sort_by(|a, b| (&a.1.user, a.1.block_start).cmp(&(&b.1.user, b.1.block_start)));
    for pair in rows.windows(2) {
        let (prev, (line, next)) = (&pair[0].1, &pair[1]);
        if prev.user == next.user && prev.block_start == next.block_start {
            return Err(Error::Overlap {
                line: *line.max(&pair[0].0),
                user: next.user.to_string(),
            });
        }
    }
    Ok(rows.into_iter().map(|(_, b)| b).collect())
}

/// Shared checks for interval records: minute alignment, `end > start`, and
/// per-user non-overlap after sorting.
fn check_intervals<T>(
    rows: &mut [(u64, T)],
    key: impl Fn(&T) -> (&UserId, DateTime<Utc>, DateTime<Utc>),
) -> Result<()> {
    for (line, row) in rows.iter() {
        let (_, start, end) = key(row);
        if !is_minute_aligned(start) || !is_minute_aligned(end) {
            return Err(Error::Misaligned {
                line: *line,
                message: "interval bounds must be whole minutes".into(),
            });
        }
        if end <= start {
            return Err(malformed(*line, "end must be after start"));
        }
    }
    rows.sort_by(|a, b| {
        let (ua, sa, _) = key(&a.1);
        let (ub, sb, _) = key(&b.1);
        (ua, sa).cmp(&(ub, sb))
    });
    for pair in rows.windows(2) {
        let (ua, _, end_a) = key(&pair[0].1);
        let (ub, start_b, _) = key(&pair[1].1);
        if ua == ub && start_b < end_a {
            return Err(Error::Overlap {
                line: pair[0].0.max(pair[1].0),
                user: ub.to_string(),
            });
        }
    }
    Ok(())
}

pub fn parse_sleep_segments<R: Read>(reader: R) -> Result<Vec<RawSleepSegment>> {
    let mut interner = Interner::default();
    let mut rows = Vec::new();
    for_each_row(reader, SLEEP_HEADER, |line, r| {
        let user = field_user(line, &r[0], &mut interner)?;
        let start = field_timestamp(line, "start", &r[1])?;
        let end = field_timestamp(line, "end", &r[2])?;
        let state = match r[3].trim() {
            "sleep" => SleepState::Sleep,
            "awake" => SleepState::Awake,
            other => {
                return Err(malformed(
                    line,
                    format!("state must be `sleep` or `awake`, got `{other}`"),
                ))
            }
        };
        rows.push((
            line,
            RawSleepSegment {
                user,
                start,
                end,
                state,
            },
        ));
        Ok(())
    })?;
    check_intervals(&mut rows, |s| (&s.user, s.start, s.end))?;
    Ok(rows.into_iter().map(|(_, s)| s).collect())
}

pub fn parse_schedule<R: Read>(reader: R, taxonomy: &Taxonomy) -> Result<Vec<ScheduleBlock>> {
    let mut interner = Interner::default();
    let mut rows = Vec::new();
    for_each_row(reader, SCHEDULE_HEADER, |line, r| {
        let user = field_user(line, &r[0], &mut interner)?;
        let start = field_timestamp(line, "start", &r[1])?;
        let end = field_timestamp(line, "end", &r[2])?;
        let label = taxonomy.label(r[3].trim())?;
        rows.push((
            line,
            ScheduleBlock {
                user,
                start,
                end,
                label,
            },
        ));
        Ok(())
    })?;
    check_intervals(&mut rows, |b| (&b.user, b.start, b.end))?;
    Ok(rows.into_iter().map(|(_, b)| b).collect())
}

fn writer<W: Write>(out: W, header: &str) -> Result<csv::Writer<W>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(header.split(','))?;
    Ok(w)
}

pub fn write_hr<W: Write>(out: W, samples: &[RawHrSample]) -> Result<()> {
    let mut w = writer(out, HR_HEADER)?;
    for s in samples {
        w.write_record([
            &*s.user,
            &format_timestamp(s.timestamp),
            &s.hr_bpm.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_activity<W: Write>(out: W, blocks: &[RawActivityBlock]) -> Result<()> {
    let mut w = writer(out, ACTIVITY_HEADER)?;
    for b in blocks {
        w.write_record([
            &*b.user,
            &format_timestamp(b.block_start),
            &b.steps.to_string(),
            &b.distance_m.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sleep<W: Write>(out: W, segments: &[RawSleepSegment]) -> Result<()> {
    let mut w = writer(out, SLEEP_HEADER)?;
    for s in segments {
        w.write_record([
            &*s.user,
            &format_timestamp(s.start),
            &format_timestamp(s.end),
            s.state.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_schedule<W: Write>(out: W, blocks: &[ScheduleBlock]) -> Result<()> {
    let mut w = writer(out, SCHEDULE_HEADER)?;
    for b in blocks {
        w.write_record([
            &*b.user,
            &format_timestamp(b.start),
            &format_timestamp(b.end),
            &*b.label,
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// All four parsed streams of a cohort.
#[derive(Debug, Clone, Default)]
pub struct RawStreams {
    pub hr: Vec<RawHrSample>,
    pub activity: Vec<RawActivityBlock>,
    pub sleep: Vec<RawSleepSegment>,
    pub schedule: Vec<ScheduleBlock>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hr(text: &str) -> Result<Vec<RawHrSample>> {
        parse_hr_stream(text.as_bytes())
    }

    #[test]
    fn hr_single_row() {
        let v = hr("user_id,timestamp,hr_bpm\nu1,2024-01-01T00:00:00Z,62\n").unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(&*v[0].user, "u1");
        assert_eq!(v[0].hr_bpm, 62.0);
    }

    #[test]
    fn hr_header_only_is_empty() {
        assert!(hr("user_id,timestamp,hr_bpm\n").unwrap().is_empty());
    }

    #[test]
    fn hr_missing_header() {
        assert!(matches!(hr(""), Err(Error::MissingHeader { .. })));
        assert!(matches!(
            hr("u1,2024-01-01T00:00:00Z,62\n"),
            Err(Error::MissingHeader { .. })
        ));
    }

    #[test]
    fn hr_non_numeric_reports_line() {
        let err = hr("user_id,timestamp,hr_bpm\nu1,2024-01-01T00:00:00Z,62\nu1,2024-01-01T00:00:15Z,abc\n")
            .unwrap_err();
        assert!(matches!(err, Error::MalformedRow { line: 3, .. }), "{err}");
    }

    #[test]
    fn hr_rejects_non_utc_and_non_positive() {
        assert!(hr("user_id,timestamp,hr_bpm\nu1,2024-01-01T00:00:00+02:00,62\n").is_err());
        assert!(hr("user_id,timestamp,hr_bpm\nu1,2024-01-01T00:00:00Z,0\n").is_err());
        assert!(hr("user_id,timestamp,hr_bpm\nu1,2024-01-01T00:00:00Z\n").is_err());
    }

    #[test]
    fn hr_sorted_and_duplicates_keep_first() {
        let v = hr("user_id,timestamp,hr_bpm\n\
                    u2,2024-01-01T00:00:00Z,70\n\
                    u1,2024-01-01T00:00:15Z,61\n\
                    u1,2024-01-01T00:00:00Z,60\n\
                    u1,2024-01-01T00:00:15Z,99\n")
        .unwrap();
        let got: Vec<_> = v.iter().map(|s| (s.user.to_string(), s.hr_bpm)).collect();
        assert_eq!(
            got,
            vec![("u1".into(), 60.0), ("u1".into(), 61.0), ("u2".into(), 70.0)]
        );
    }

    fn activity(rows: &str) -> Result<Vec<RawActivityBlock>> {
        parse_activity_blocks(format!("{ACTIVITY_HEADER}\n{rows}").as_bytes())
    }

    #[test]
    fn activity_aligned_block_accepted() {
        let v = activity("u1,2024-01-01T10:15:00Z,120,95.5\n").unwrap();
        assert_eq!(v[0].steps, 120);
        assert_eq!(v[0].distance_m, 95.5);
    }

    #[test]
    fn activity_misaligned_block_rejected() {
        assert!(matches!(
            activity("u1,2024-01-01T10:07:00Z,120,95.5\n"),
            Err(Error::Misaligned { line: 2, .. })
        ));
        assert!(matches!(
            activity("u1,2024-01-01T10:15:30Z,120,95.5\n"),
            Err(Error::Misaligned { .. })
        ));
    }

    #[test]
    fn activity_overlap_rejected() {
        let err = activity("u1,2024-01-01T10:15:00Z,120,95.5\nu2,2024-01-01T10:15:00Z,1,1\nu1,2024-01-01T10:15:00Z,3,2\n")
            .unwrap_err();
        assert!(matches!(err, Error::Overlap { line: 4, .. }), "{err}");
    }

    #[test]
    fn activity_negative_values_rejected() {
        assert!(activity("u1,2024-01-01T10:15:00Z,-1,0\n").is_err());
        assert!(activity("u1,2024-01-01T10:15:00Z,1,-0.5\n").is_err());
    }

    fn sleep(rows: &str) -> Result<Vec<RawSleepSegment>> {
        parse_sleep_segments(format!("{SLEEP_HEADER}\n{rows}").as_bytes())
    }

    #[test]
    fn sleep_segments() {
        let v = sleep("u1,2024-01-01T22:00:00Z,2024-01-02T06:00:00Z,sleep\n").unwrap();
        assert_eq!(v[0].state, SleepState::Sleep);
        assert!(sleep("u1,2024-01-01T22:00:00Z,2024-01-02T06:00:00Z,nap\n").is_err());
        assert!(sleep("u1,2024-01-01T22:00:00Z,2024-01-01T22:00:00Z,sleep\n").is_err());
        assert!(matches!(
            sleep("u1,2024-01-01T22:00:00Z,2024-01-02T06:00:00Z,sleep\nu1,2024-01-02T05:00:00Z,2024-01-02T07:00:00Z,awake\n"),
            Err(Error::Overlap { .. })
        ));
        // touching intervals are fine
        assert!(sleep("u1,2024-01-01T22:00:00Z,2024-01-02T06:00:00Z,sleep\nu1,2024-01-02T06:00:00Z,2024-01-02T07:00:00Z,awake\n").is_ok());
    }

    fn schedule(rows: &str) -> Result<Vec<ScheduleBlock>> {
        parse_schedule(
            format!("{SCHEDULE_HEADER}\n{rows}").as_bytes(),
            &Taxonomy::default(),
        )
    }

    #[test]
    fn schedule_blocks() {
        let v = schedule("u1,2024-01-01T06:00:00Z,2024-01-01T06:45:00Z,Running Exercise\n").unwrap();
        assert_eq!(&*v[0].label, "Running Exercise");
        assert!(matches!(
            schedule("u1,2024-01-01T06:00:00Z,2024-01-01T06:45:00Z,Jogging\n"),
            Err(Error::UnknownLabel(l)) if l == "Jogging"
        ));
        assert!(matches!(
            schedule("u1,2024-01-01T06:00:00Z,2024-01-01T06:45:00Z,Running Exercise\nu1,2024-01-01T06:30:00Z,2024-01-01T07:00:00Z,Fitness Test\n"),
            Err(Error::Overlap { .. })
        ));
        assert!(matches!(
            schedule("u1,2024-01-01T06:00:10Z,2024-01-01T06:45:00Z,Running Exercise\n"),
            Err(Error::Misaligned { .. })
        ));
    }

    #[test]
    fn canonical_writer_round_trips() {
        let text = "user_id,timestamp,hr_bpm\nu1,2024-01-01T00:00:00Z,62\nu1,2024-01-01T00:00:15.500Z,63.25\n";
        let v = hr(text).unwrap();
        let mut buf = Vec::new();
        write_hr(&mut buf, &v).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), text);
    }
}
