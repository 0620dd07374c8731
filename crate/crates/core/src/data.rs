//! In-memory datasets with train/val/test split tags.

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::LabelVec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for SplitTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Val => "val",
            SplitTag::Test => "test",
        })
    }
}

/// Features, labels and a split tag per row. Every row has exactly one tag,
/// so the splits are disjoint and cover the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    features: Array2<f64>,
    labels: Vec<usize>,
    tags: Vec<SplitTag>,
    k: usize,
    /// Labels before any injected noise, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    clean_labels: Option<Vec<usize>>,
}

/// Rows of one split, copied out of a [`Dataset`].
#[derive(Debug, Clone)]
pub struct Split {
    pub tag: SplitTag,
    pub features: Array2<f64>,
    pub labels: LabelVec,
    /// Row indices in the parent dataset.
    pub indices: Vec<usize>,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        labels: Vec<usize>,
        tags: Vec<SplitTag>,
        k: usize,
    ) -> Result<Self> {
        let n = features.nrows();
        if labels.len() != n || tags.len() != n {
            return Err(Error::shape(format!(
                "{n} rows, {} labels, {} tags",
                labels.len(),
                tags.len()
            )));
        }
        LabelVec::new(labels.clone(), k)?;
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature".into()));
        }
        Ok(Self {
            features,
            labels,
            tags,
            k,
            clean_labels: None,
        })
    }

    pub fn with_clean_labels(mut self, clean: Vec<usize>) -> Result<Self> {
        if clean.len() != self.labels.len() {
            return Err(Error::shape("clean labels length"));
        }
        LabelVec::new(clean.clone(), self.k)?;
        self.clean_labels = Some(clean);
        Ok(self)
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn clean_labels(&self) -> Option<&[usize]> {
        self.clean_labels.as_deref()
    }

    pub fn tags(&self) -> &[SplitTag] {
        &self.tags
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn split_indices(&self, tag: SplitTag) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, t)| **t == tag)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn split(&self, tag: SplitTag) -> Split {
        let indices = self.split_indices(tag);
        Split {
            tag,
            features: self.features.select(Axis(0), &indices),
            labels: LabelVec::new(indices.iter().map(|&i| self.labels[i]).collect(), self.k)
                .expect("labels validated at construction"),
            indices,
        }
    }
}
