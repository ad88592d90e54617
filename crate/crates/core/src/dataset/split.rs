use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::window::FeatureWindow;
use crate::domain::UserId;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitMode {
    Temporal,
    User,
}

impl SplitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitMode::Temporal => "temporal",
            SplitMode::User => "user",
        }
    }
}

impl fmt::Display for SplitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SplitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "temporal" => Ok(SplitMode::Temporal),
            "user" => Ok(SplitMode::User),
            other => Err(Error::InvalidConfig(format!("unknown split mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub mode: SplitMode,
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            mode: SplitMode::Temporal,
            train: 0.70,
            val: 0.15,
            test: 0.15,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::InvalidConfig("split fractions must lie in [0, 1]".into()));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig("split fractions must sum to 1".into()));
        }
        Ok(())
    }

    /// (train, val, test) sizes for `n` units: floored train and val shares,
    /// remainder to test.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let floor = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
        let train = floor(self.train).min(n);
        let val = floor(self.val).min(n - train);
        (train, val, n - train - val)
    }
}

/// Which split every user-day belongs to.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitAssignment {
    pub days: HashMap<(UserId, NaiveDate), Split>,
    /// Users with too few days for a temporal split; placed wholly in train.
    pub flagged_users: Vec<UserId>,
}

impl SplitAssignment {
    pub fn split_of(&self, window: &FeatureWindow) -> Option<Split> {
        self.days.get(&(window.user.clone(), window.date)).copied()
    }
}

fn assign(n: usize, spec: &SplitSpec) -> Vec<Split> {
    let (train, val, _) = spec.counts(n);
    (0..n)
        .map(|i| match i {
            i if i < train => Split::Train,
            i if i < train + val => Split::Val,
            _ => Split::Test,
        })
        .collect()
}

/// Chronological per-user split of days.
pub fn split_temporal(
    user_days: &BTreeMap<UserId, Vec<NaiveDate>>,
    spec: &SplitSpec,
) -> Result<SplitAssignment> {
    spec.validate()?;
    let mut out = SplitAssignment::default();
    for (user, days) in user_days {
        let mut days = days.clone();
        days.sort_unstable();
        days.dedup();
        if days.len() < 3 {
            out.flagged_users.push(user.clone());
            for d in days {
                out.days.insert((user.clone(), d), Split::Train);
            }
            continue;
        }
        for (d, s) in days.iter().zip(assign(days.len(), spec)) {
            out.days.insert((user.clone(), *d), s);
        }
    }
    Ok(out)
}

/// Seeded shuffle of users, then the same floor scheme over the user list.
pub fn split_users(users: &[UserId], spec: &SplitSpec) -> Result<HashMap<UserId, Split>> {
    spec.validate()?;
    let mut order: Vec<UserId> = users.to_vec();
    order.sort();
    order.dedup();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let splits = assign(order.len(), spec);
    Ok(order.into_iter().zip(splits).collect())
}

pub fn split_user(
    user_days: &BTreeMap<UserId, Vec<NaiveDate>>,
    spec: &SplitSpec,
) -> Result<SplitAssignment> {
    let users: Vec<UserId> = user_days.keys().cloned().collect();
    let by_user = split_users(&users, spec)?;
    let mut out = SplitAssignment::default();
    for (user, days) in user_days {
        for d in days {
            out.days.insert((user.clone(), *d), by_user[user]);
        }
    }
    Ok(out)
}

pub fn split_days(
    user_days: &BTreeMap<UserId, Vec<NaiveDate>>,
    spec: &SplitSpec,
) -> Result<SplitAssignment> {
    match spec.mode {
        SplitMode::Temporal => split_temporal(user_days, spec),
        SplitMode::User => split_user(user_days, spec),
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<FeatureWindow>,
    pub val: Vec<FeatureWindow>,
    pub test: Vec<FeatureWindow>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[FeatureWindow] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn get_mut(&mut self, split: Split) -> &mut Vec<FeatureWindow> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

/// Routes windows by their user-day. Windows from unassigned days are dropped.
pub fn partition_windows(windows: Vec<FeatureWindow>, assignment: &SplitAssignment) -> Splits {
    let mut out = Splits::default();
    for w in windows {
        if let Some(s) = assignment.split_of(&w) {
            out.get_mut(s).push(w);
        }
    }
    out
}
