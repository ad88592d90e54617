//! Per-activity performance metrics and radar charts of one user against the
//! group.
//!
//! Each user is summarised by the median of the five per-minute metrics over
//! the minutes carrying the activity's effective label. The group is the set
//! of those per-user medians; chart axes run from the group minimum (0%) to
//! the group maximum (100%).

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::AlignedDay;
use crate::dataset::effective_label;
use crate::domain::UserId;
use crate::taxonomy::Taxonomy;
use crate::{Error, Result};

pub const METRIC_COUNT: usize = 5;
pub const INDEX_HEADER: &str = "user_id,activity,svg_path";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    DistancePerMin,
    StepsPerMin,
    PulsePerMin,
    PulseToMinRatio,
    PulseToMaxRatio,
}

impl Metric {
    pub const ALL: [Metric; METRIC_COUNT] = [
        Metric::DistancePerMin,
        Metric::StepsPerMin,
        Metric::PulsePerMin,
        Metric::PulseToMinRatio,
        Metric::PulseToMaxRatio,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::DistancePerMin => "Distance per minute",
            Metric::StepsPerMin => "Steps per minute",
            Metric::PulsePerMin => "Pulse per minute",
            Metric::PulseToMinRatio => "Pulse to min ratio",
            Metric::PulseToMaxRatio => "Pulse to max ratio",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivityMetricSet {
    pub distance_per_min: f64,
    pub steps_per_min: f64,
    /// Pulse metrics are absent when no qualifying minute has a pulse.
    pub pulse_per_min: Option<f64>,
    pub pulse_to_min_ratio: Option<f64>,
    pub pulse_to_max_ratio: Option<f64>,
}

impl ActivityMetricSet {
    pub fn get(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::DistancePerMin => Some(self.distance_per_min),
            Metric::StepsPerMin => Some(self.steps_per_min),
            Metric::PulsePerMin => self.pulse_per_min,
            Metric::PulseToMinRatio => self.pulse_to_min_ratio,
            Metric::PulseToMaxRatio => self.pulse_to_max_ratio,
        }
    }
}

/// Median with the two middle values averaged for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Metrics of one user for one activity over that user's days.
pub fn activity_metrics(
    user: &str,
    activity: &str,
    days: &[AlignedDay],
    taxonomy: &Taxonomy,
) -> Result<ActivityMetricSet> {
    let target = taxonomy.index_of(activity)?;
    let (mut dist, mut steps, mut pulse, mut to_min, mut to_max) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for day in days.iter().filter(|d| &*d.user == user) {
        for m in day.minutes.iter().filter(|m| effective_label(m, taxonomy) == target) {
            dist.push(m.distance_m);
            steps.push(m.steps as f64);
            if let Some(p) = m.pulse {
                pulse.push(p);
                if let Some(profile) = day.profile {
                    to_min.push(p / profile.min_hr);
                    to_max.push(p / profile.max_hr);
                }
            }
        }
    }
    if dist.is_empty() {
        return Err(Error::Empty("minutes labelled with the activity"));
    }
    Ok(ActivityMetricSet {
        distance_per_min: median(&dist).expect("non-empty"),
        steps_per_min: median(&steps).expect("non-empty"),
        pulse_per_min: median(&pulse),
        pulse_to_min_ratio: median(&to_min),
        pulse_to_max_ratio: median(&to_max),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStats {
    pub median: f64,
    /// Population standard deviation.
    pub sd: f64,
    pub min: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBaseline {
    pub users: usize,
    /// Indexed like [`Metric::ALL`]; absent when fewer than two users have
    /// the metric.
    pub stats: [Option<MetricStats>; METRIC_COUNT],
}

impl GroupBaseline {
    pub fn get(&self, metric: Metric) -> Option<MetricStats> {
        self.stats[Metric::ALL.iter().position(|m| *m == metric).expect("listed")]
    }
}

fn metric_stats(values: &[f64]) -> MetricStats {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MetricStats {
        median: median(values).expect("non-empty"),
        sd: var.sqrt(),
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

pub fn group_baseline(sets: &[ActivityMetricSet]) -> Result<GroupBaseline> {
    if sets.len() < 2 {
        return Err(Error::TooFewUsers {
            needed: 2,
            found: sets.len(),
        });
    }
    let stats = Metric::ALL.map(|m| {
        let values: Vec<f64> = sets.iter().filter_map(|s| s.get(m)).collect();
        (values.len() >= 2).then(|| metric_stats(&values))
    });
    Ok(GroupBaseline {
        users: sets.len(),
        stats,
    })
}

/// Percentage position of `value` between the group bounds, clamped to
/// [0, 100]; a degenerate range maps to 50.
pub fn normalize_radar(value: f64, min: f64, max: f64) -> f64 {
    if max <= min {
        return 50.0;
    }
    (100.0 * (value - min) / (max - min)).clamp(0.0, 100.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BandMode {
    /// Group median ± one standard deviation.
    Sd,
    /// Group minimum to maximum.
    Range,
}

impl FromStr for BandMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sd" => Ok(BandMode::Sd),
            "range" => Ok(BandMode::Range),
            other => Err(Error::InvalidConfig(format!("unknown band mode `{other}`"))),
        }
    }
}

impl BandMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BandMode::Sd => "sd",
            BandMode::Range => "range",
        }
    }
}

/// Normalised chart values in [0, 100] for every axis.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarValues {
    pub individual: [f64; METRIC_COUNT],
    pub group: [f64; METRIC_COUNT],
    pub band_low: [f64; METRIC_COUNT],
    pub band_high: [f64; METRIC_COUNT],
    /// Axes without data in either the individual or the group.
    pub missing: [bool; METRIC_COUNT],
}

pub fn radar_values(individual: &ActivityMetricSet, group: &GroupBaseline, band: BandMode) -> RadarValues {
    let mut v = RadarValues {
        individual: [0.0; METRIC_COUNT],
        group: [0.0; METRIC_COUNT],
        band_low: [0.0; METRIC_COUNT],
        band_high: [0.0; METRIC_COUNT],
        missing: [true; METRIC_COUNT],
    };
    for (k, m) in Metric::ALL.into_iter().enumerate() {
        let (Some(s), Some(x)) = (group.stats[k], individual.get(m)) else {
            continue;
        };
        let norm = |value: f64| normalize_radar(value, s.min, s.max);
        v.missing[k] = false;
        v.individual[k] = norm(x);
        v.group[k] = norm(s.median);
        let (lo, hi) = match band {
            BandMode::Sd => (s.median - s.sd, s.median + s.sd),
            BandMode::Range => (s.min, s.max),
        };
        v.band_low[k] = norm(lo);
        v.band_high[k] = norm(hi);
    }
    v
}

const WIDTH: f64 = 560.0;
const HEIGHT: f64 = 600.0;
const CX: f64 = 280.0;
const CY: f64 = 300.0;
/// Plotting radius; 100% lies on this circle.
pub const PLOT_RADIUS: f64 = 180.0;

fn vertex(k: usize, percent: f64) -> (f64, f64) {
    let angle = (-90.0 + 72.0 * k as f64).to_radians();
    let r = PLOT_RADIUS * percent / 100.0;
    (CX + r * angle.cos(), CY + r * angle.sin())
}

fn points(values: &[f64; METRIC_COUNT]) -> String {
    values
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let (x, y) = vertex(k, p);
            format!("{x:.3},{y:.3}")
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn ring_path(values: &[f64; METRIC_COUNT]) -> String {
    let mut d = String::new();
    for (k, &p) in values.iter().enumerate() {
        let (x, y) = vertex(k, p);
        let _ = write!(d, "{}{x:.3},{y:.3} ", if k == 0 { "M" } else { "L" });
    }
    d.push('Z');
    d
}

fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

/// Standalone SVG 1.1 radar chart. Output bytes depend only on the inputs.
pub fn render_radar(
    user: &str,
    activity: &str,
    individual: &ActivityMetricSet,
    group: &GroupBaseline,
    band: BandMode,
) -> String {
    let v = radar_values(individual, group, band);
    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(
        s,
        r#"<title>{}: {}</title>"#,
        escape(user),
        escape(activity)
    );
    let _ = writeln!(
        s,
        r#"<text x="{CX}" y="32" text-anchor="middle" font-family="sans-serif" font-size="18">{}: {}</text>"#,
        escape(user),
        escape(activity)
    );
    for pct in [25.0, 50.0, 75.0, 100.0] {
        let _ = writeln!(
            s,
            r##"<path class="grid" d="{}" fill="none" stroke="#cccccc" stroke-width="1"/>"##,
            ring_path(&[pct; METRIC_COUNT])
        );
    }
    for (k, m) in Metric::ALL.into_iter().enumerate() {
        let (x, y) = vertex(k, 100.0);
        let _ = writeln!(
            s,
            r##"<line class="axis" x1="{CX:.3}" y1="{CY:.3}" x2="{x:.3}" y2="{y:.3}" stroke="#888888" stroke-width="1"/>"##
        );
        let (lx, ly) = vertex(k, 116.0);
        let anchor = if (lx - CX).abs() < 1.0 {
            "middle"
        } else if lx > CX {
            "start"
        } else {
            "end"
        };
        let label = if v.missing[k] {
            format!("{} (n/a)", m.name())
        } else {
            m.name().to_string()
        };
        let _ = writeln!(
            s,
            r#"<text x="{lx:.3}" y="{ly:.3}" text-anchor="{anchor}" font-family="sans-serif" font-size="13">{}</text>"#,
            escape(&label)
        );
    }
    let _ = writeln!(
        s,
        r##"<path class="band" d="{} {}" fill="#e74c3c" fill-opacity="0.18" fill-rule="evenodd" stroke="none"/>"##,
        ring_path(&v.band_high),
        ring_path(&v.band_low)
    );
    let _ = writeln!(
        s,
        r##"<polygon class="group" points="{}" fill="none" stroke="#c0392b" stroke-width="2"/>"##,
        points(&v.group)
    );
    let _ = writeln!(
        s,
        r##"<polygon class="individual" points="{}" fill="#2980b9" fill-opacity="0.25" stroke="#2980b9" stroke-width="2"/>"##,
        points(&v.individual)
    );
    let band_text = match band {
        BandMode::Sd => "Group median ± 1 SD",
        BandMode::Range => "Group range",
    };
    let legend = [
        ("#2980b9", "Individual median"),
        ("#c0392b", "Group median"),
        ("#e74c3c", band_text),
    ];
    for (i, (color, text)) in legend.iter().enumerate() {
        let y = 520.0 + 20.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<rect x="24" y="{:.1}" width="14" height="14" fill="{color}"/>"#,
            y - 11.0
        );
        let _ = writeln!(
            s,
            r#"<text x="46" y="{y:.1}" font-family="sans-serif" font-size="13">{}</text>"#,
            escape(text)
        );
    }
    let _ = writeln!(
        s,
        r##"<text x="{:.1}" y="{:.1}" text-anchor="end" font-family="sans-serif" font-size="11" fill="#555555">0% = group minimum, 100% = group maximum of per-user medians ({} users)</text>"##,
        WIDTH - 16.0,
        HEIGHT - 16.0,
        group.users
    );
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadarChart {
    pub user: UserId,
    pub activity: String,
    pub svg: String,
}

/// File-name-safe form of a label.
pub fn slug(text: &str) -> String {
    text.chars()
        .map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' })
        .collect()
}

/// Charts for every (user, activity) pair whose activity has a baseline of at
/// least two users, ordered by activity then user.
pub fn cohort_charts(days: &[AlignedDay], taxonomy: &Taxonomy, band: BandMode) -> Vec<RadarChart> {
    let mut users: Vec<UserId> = days.iter().map(|d| d.user.clone()).collect();
    users.sort();
    users.dedup();
    let per_activity: Vec<Vec<RadarChart>> = taxonomy
        .labels()
        .par_iter()
        .map(|activity| {
            let sets: BTreeMap<UserId, ActivityMetricSet> = users
                .iter()
                .filter_map(|u| {
                    activity_metrics(u, activity, days, taxonomy)
                        .ok()
                        .map(|m| (u.clone(), m))
                })
                .collect();
            let values: Vec<ActivityMetricSet> = sets.values().copied().collect();
            let Ok(group) = group_baseline(&values) else {
                return Vec::new();
            };
            sets.iter()
                .map(|(u, m)| RadarChart {
                    user: u.clone(),
                    activity: activity.to_string(),
                    svg: render_radar(u, activity, m, &group, band),
                })
                .collect()
        })
        .collect();
    per_activity.into_iter().flatten().collect()
}

/// Writes `{user}_{activity}.svg` files into `dir` and returns the relative
/// file names in chart order.
pub fn write_charts(charts: &[RadarChart], dir: &Path) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut names = Vec::with_capacity(charts.len());
    for c in charts {
        let name = format!("{}_{}.svg", slug(&c.user), slug(&c.activity));
        std::fs::write(dir.join(&name), &c.svg)?;
        names.push(name);
    }
    Ok(names)
}

pub fn write_index<W: Write>(out: W, charts: &[RadarChart], paths: &[String]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(INDEX_HEADER.split(','))?;
    for (c, p) in charts.iter().zip(paths) {
        w.write_record([&*c.user, c.activity.as_str(), p.as_str()])?;
    }
    w.flush()?;
    Ok(())
}
