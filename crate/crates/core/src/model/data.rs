use ndarray::Array2;

use crate::dataset::{FeatureWindow, CHANNELS};
use crate::taxonomy::Taxonomy;
use crate::{Error, Result};

/// Windows of one width packed for the network, with class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSet {
    pub width: usize,
    /// Sample-major `n × width × CHANNELS`.
    pub features: Vec<f64>,
    pub l1: Vec<usize>,
    pub l2: Vec<usize>,
}

impl EncodedSet {
    pub fn from_windows<'a, I>(windows: I, taxonomy: &Taxonomy) -> Result<Self>
    where
        I: IntoIterator<Item = &'a FeatureWindow>,
    {
        let mut set = EncodedSet {
            width: 0,
            features: Vec::new(),
            l1: Vec::new(),
            l2: Vec::new(),
        };
        for w in windows {
            if set.l1.is_empty() {
                set.width = w.width;
            } else if w.width != set.width {
                return Err(Error::Shape(format!(
                    "mixed window widths {} and {}",
                    set.width, w.width
                )));
            }
            if w.features.len() != w.width {
                return Err(Error::Shape(format!("window {} has {} rows", w.id, w.features.len())));
            }
            set.features.extend(w.features.iter().flatten());
            set.l1.push(w.label_l1.index());
            set.l2.push(taxonomy.index_of(&w.label_l2)?);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.l1.len()
    }

    pub fn is_empty(&self) -> bool {
        self.l1.is_empty()
    }

    /// Time-major batch of the given samples.
    pub fn batch(&self, indices: &[usize]) -> Batch {
        let (t, b) = (self.width, indices.len());
        let mut x = Array2::zeros((t * b, CHANNELS));
        for (j, &i) in indices.iter().enumerate() {
            for step in 0..t {
                let src = &self.features[(i * t + step) * CHANNELS..][..CHANNELS];
                x.row_mut(step * b + j)
                    .iter_mut()
                    .zip(src)
                    .for_each(|(d, s)| *d = *s);
            }
        }
        Batch {
            x,
            steps: t,
            size: b,
            l1: indices.iter().map(|&i| self.l1[i]).collect(),
            l2: indices.iter().map(|&i| self.l2[i]).collect(),
        }
    }
}

/// `x` holds row `step * size + sample`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub x: Array2<f64>,
    pub steps: usize,
    pub size: usize,
    pub l1: Vec<usize>,
    pub l2: Vec<usize>,
}
