use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::split::Splits;
use super::window::FeatureWindow;
use crate::{Error, Result};

/// One JSON object per line.
pub fn write_windows<W: Write>(mut out: W, windows: &[FeatureWindow]) -> Result<()> {
    for w in windows {
        serde_json::to_writer(&mut out, w)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_windows<R: BufRead>(input: R) -> Result<Vec<FeatureWindow>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let w: FeatureWindow = serde_json::from_str(&line).map_err(|e| Error::MalformedRow {
            line: i as u64 + 1,
            message: e.to_string(),
        })?;
        if w.features.len() != w.width {
            return Err(Error::MalformedRow {
                line: i as u64 + 1,
                message: format!("{} feature rows for width {}", w.features.len(), w.width),
            });
        }
        out.push(w);
    }
    Ok(out)
}

/// Window ids per split.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn of(splits: &Splits) -> Self {
        let ids = |ws: &[FeatureWindow]| ws.iter().map(|w| w.id.clone()).collect();
        SplitManifest {
            train: ids(&splits.train),
            val: ids(&splits.val),
            test: ids(&splits.test),
        }
    }

    /// Regroups a flat window list by this manifest. Every id must resolve.
    pub fn resolve(&self, windows: Vec<FeatureWindow>) -> Result<Splits> {
        let mut by_id: std::collections::HashMap<String, FeatureWindow> =
            windows.into_iter().map(|w| (w.id.clone(), w)).collect();
        let mut take = |ids: &[String]| -> Result<Vec<FeatureWindow>> {
            ids.iter()
                .map(|id| {
                    by_id
                        .remove(id)
                        .ok_or_else(|| Error::InvalidConfig(format!("manifest id `{id}` not in store")))
                })
                .collect()
        };
        Ok(Splits {
            train: take(&self.train)?,
            val: take(&self.val)?,
            test: take(&self.test)?,
        })
    }
}
