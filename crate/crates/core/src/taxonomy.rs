//! Two-level activity label hierarchy.

use std::collections::HashMap;
use std::fmt;
use std::io::Read;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::Label;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Level1 {
    Sleep,
    Awake,
    Activity,
}

impl Level1 {
    pub const ALL: [Level1; 3] = [Level1::Sleep, Level1::Awake, Level1::Activity];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Level1> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Level1::Sleep => "Sleep",
            Level1::Awake => "Awake",
            Level1::Activity => "Activity",
        }
    }
}

impl fmt::Display for Level1 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Level1 {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Sleep" => Ok(Level1::Sleep),
            "Awake" => Ok(Level1::Awake),
            "Activity" => Ok(Level1::Activity),
            other => Err(Error::UnknownLabel(other.to_string())),
        }
    }
}

pub const SLEEP_LABEL: &str = "Sleep";
pub const AWAKE_LABEL: &str = "Awake";

/// Default fine-grained activities. Every one of them parents to
/// [`Level1::Activity`].
pub const DEFAULT_ACTIVITIES: [&str; 11] = [
    "Firearms Training",
    "Military Drills",
    "Running Exercise",
    "Obstacle Course Training",
    "Fitness Test",
    "Wake Up",
    "Security Mission",
    "Contact-Combat",
    "General Working",
    "Kitchen Duties",
    "Other",
];

const HEADER: &str = "level2_label,level1_label";

/// Ordered level-2 labels with their level-1 parents. `Sleep` and `Awake` are
/// always present as level-2 labels mapping to themselves.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Taxonomy {
    labels: Vec<Label>,
    parents: Vec<Level1>,
    index: HashMap<Label, usize>,
}

impl Default for Taxonomy {
    fn default() -> Self {
        let mut pairs = vec![
            (SLEEP_LABEL.to_string(), Level1::Sleep),
            (AWAKE_LABEL.to_string(), Level1::Awake),
        ];
        pairs.extend(
            DEFAULT_ACTIVITIES
                .iter()
                .map(|a| (a.to_string(), Level1::Activity)),
        );
        Taxonomy::from_pairs(pairs).expect("default taxonomy is valid")
    }
}

impl Taxonomy {
    pub fn from_pairs<I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (String, Level1)>,
    {
        let mut labels: Vec<Label> = Vec::new();
        let mut parents = Vec::new();
        let mut index = HashMap::new();
        for (label, parent) in pairs {
            let label = label.trim().to_string();
            if label.is_empty() {
                return Err(Error::InvalidConfig("empty level-2 label".into()));
            }
            let expected = match label.as_str() {
                SLEEP_LABEL => Some(Level1::Sleep),
                AWAKE_LABEL => Some(Level1::Awake),
                _ => None,
            };
            if let Some(expected) = expected {
                if parent != expected {
                    return Err(Error::InvalidConfig(format!(
                        "`{label}` must map to {expected}"
                    )));
                }
            }
            let label: Label = Arc::from(label);
            if index.insert(label.clone(), labels.len()).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate label `{label}`")));
            }
            labels.push(label);
            parents.push(parent);
        }
        for required in [SLEEP_LABEL, AWAKE_LABEL] {
            if !index.contains_key(required) {
                return Err(Error::InvalidConfig(format!(
                    "taxonomy must contain `{required}`"
                )));
            }
        }
        Ok(Taxonomy {
            labels,
            parents,
            index,
        })
    }

    /// Reads the `level2_label,level1_label` CSV form. The header is mandatory.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr.headers()?.iter().collect::<Vec<_>>().join(",");
        if header != HEADER {
            return Err(Error::MissingHeader {
                expected: HEADER.into(),
            });
        }
        let mut pairs = Vec::new();
        for record in rdr.records() {
            let record = record?;
            let line = record.position().map_or(0, |p| p.line());
            if record.len() != 2 {
                return Err(Error::MalformedRow {
                    line,
                    message: format!("expected 2 fields, found {}", record.len()),
                });
            }
            let parent: Level1 = record[1].parse().map_err(|_| Error::MalformedRow {
                line,
                message: format!("unknown level-1 label `{}`", &record[1]),
            })?;
            pairs.push((record[0].to_string(), parent));
        }
        Taxonomy::from_pairs(pairs)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(HEADER);
        out.push('\n');
        for (label, parent) in self.labels.iter().zip(&self.parents) {
            out.push_str(label);
            out.push(',');
            out.push_str(parent.as_str());
            out.push('\n');
        }
        out
    }

    /// Hex SHA-256 of the canonical CSV form.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_csv().as_bytes()))
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn index_of(&self, level2: &str) -> Result<usize> {
        self.index
            .get(level2)
            .copied()
            .ok_or_else(|| Error::UnknownLabel(level2.to_string()))
    }

    /// The shared label instance for `level2`.
    pub fn label(&self, level2: &str) -> Result<Label> {
        Ok(self.labels[self.index_of(level2)?].clone())
    }

    pub fn parent_of_index(&self, index: usize) -> Level1 {
        self.parents[index]
    }

    pub fn sleep_index(&self) -> usize {
        self.index[SLEEP_LABEL]
    }

    pub fn awake_index(&self) -> usize {
        self.index[AWAKE_LABEL]
    }
}

/// Level-1 parent of a label. Level-1 names map to themselves.
pub fn level1_of(label: &str, taxonomy: &Taxonomy) -> Result<Level1> {
    if let Ok(l1) = label.parse::<Level1>() {
        return Ok(l1);
    }
    Ok(taxonomy.parent_of_index(taxonomy.index_of(label)?))
}
