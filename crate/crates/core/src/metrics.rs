//! Calibration metrics over a probability matrix and its labels.
//!
//! Two binning schemes back everything here:
//!
//! * **Equal width** (`M` bins over top-label confidence): bins are
//!   `[0, 1/M), [1/M, 2/M), ..., [(M-1)/M, 1]`, the last one closed. ECE and
//!   its overconfident/underconfident halves are bin-weighted gaps between
//!   mean accuracy and mean confidence.
//! * **Equal count** (`R` bins per class): for every class the samples are
//!   sorted ascending by `(probability of that class, sample index)` and cut
//!   into `R` contiguous groups whose sizes differ by at most one, the first
//!   `N mod R` groups taking the extra sample. ACE averages the per-group
//!   gaps over all classes and groups.
//!
//! The scalar metrics are always computed from a [`BinPartition`], so a
//! partition returned by [`reliability_bins`] reproduces them exactly.

use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::{LabelVec, ProbMatrix};

pub const DEFAULT_ECE_BINS: usize = 15;
pub const DEFAULT_ACE_BINS: usize = 15;

/// Lower clamp on the label-class probability inside the NLL.
pub const NLL_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "scheme", content = "bins", rename_all = "snake_case")]
pub enum BinScheme {
    EqualWidth(usize),
    EqualCount(usize),
}

/// Statistics for one bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinStats {
    pub count: usize,
    pub mean_confidence: f64,
    pub mean_accuracy: f64,
    /// Equal width: the nominal interval. Equal count: smallest and largest
    /// confidence actually in the bin (NaN when empty).
    pub lower: f64,
    pub upper: f64,
}

impl BinStats {
    fn gap(&self) -> f64 {
        self.mean_accuracy - self.mean_confidence
    }
}

/// One family of bins: the top-label bins for equal width, or one class's
/// bins for equal count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinGroup {
    pub class: Option<usize>,
    pub bins: Vec<BinStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinPartition {
    pub scheme: BinScheme,
    pub n: usize,
    pub k: usize,
    pub groups: Vec<BinGroup>,
}

impl BinPartition {
    /// `(ece_over, ece_under)` of an equal-width partition.
    pub fn ece_parts(&self) -> Result<(f64, f64)> {
        let bins = self.width_bins()?;
        let n = self.n as f64;
        let mut over = 0.0;
        let mut under = 0.0;
        for b in bins.iter().filter(|b| b.count > 0) {
            let w = b.count as f64 / n;
            let gap = b.gap();
            over += w * (-gap).max(0.0);
            under += w * gap.max(0.0);
        }
        Ok((over, under))
    }

    pub fn ece(&self) -> Result<f64> {
        let bins = self.width_bins()?;
        let n = self.n as f64;
        Ok(bins
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| b.count as f64 / n * b.gap().abs())
            .sum())
    }

    /// ACE of an equal-count partition.
    pub fn ace(&self) -> Result<f64> {
        let BinScheme::EqualCount(r) = self.scheme else {
            return Err(Error::InvalidBins("ACE needs an equal-count partition".into()));
        };
        let total: f64 = self
            .groups
            .iter()
            .flat_map(|g| g.bins.iter())
            .map(|b| b.gap().abs())
            .sum();
        Ok(total / (self.k * r) as f64)
    }

    fn width_bins(&self) -> Result<&[BinStats]> {
        match (self.scheme, self.groups.as_slice()) {
            (BinScheme::EqualWidth(_), [g]) => Ok(&g.bins),
            _ => Err(Error::InvalidBins("ECE needs an equal-width partition".into())),
        }
    }
}

/// Bin index of `conf` among `m` equal-width bins, left-closed, last bin closed.
///
/// Boundaries are compared in the same floating-point form they are reported
/// in (`j as f64 / m as f64`), so assignment agrees with the reported edges.
pub fn equal_width_index(conf: f64, m: usize) -> usize {
    let mf = m as f64;
    let mut idx = ((conf * mf).floor().max(0.0) as usize).min(m - 1);
    while idx + 1 < m && conf >= (idx + 1) as f64 / mf {
        idx += 1;
    }
    while idx > 0 && conf < idx as f64 / mf {
        idx -= 1;
    }
    idx
}

/// Sizes of `r` contiguous equal-count groups over `n` samples.
pub fn equal_count_sizes(n: usize, r: usize) -> Vec<usize> {
    let base = n / r;
    let extra = n % r;
    (0..r).map(|i| base + usize::from(i < extra)).collect()
}

pub fn reliability_bins(
    probs: &ProbMatrix,
    labels: &LabelVec,
    scheme: BinScheme,
) -> Result<BinPartition> {
    labels.check_pairs_with(probs.n(), probs.k())?;
    let groups = match scheme {
        BinScheme::EqualWidth(m) => {
            if m < 1 {
                return Err(Error::InvalidBins("need at least one bin".into()));
            }
            vec![width_group(probs, labels, m)]
        }
        BinScheme::EqualCount(r) => {
            if r < 1 {
                return Err(Error::InvalidBins("need at least one bin".into()));
            }
            if r > probs.n() {
                return Err(Error::InvalidBins(format!(
                    "{r} equal-count bins over {} samples",
                    probs.n()
                )));
            }
            (0..probs.k())
                .map(|class| count_group(probs, labels, class, r))
                .collect()
        }
    };
    Ok(BinPartition {
        scheme,
        n: probs.n(),
        k: probs.k(),
        groups,
    })
}

fn width_group(probs: &ProbMatrix, labels: &LabelVec, m: usize) -> BinGroup {
    let mut count = vec![0usize; m];
    let mut conf_sum = vec![0.0; m];
    let mut acc_sum = vec![0.0; m];
    for (i, (conf, pred)) in probs.confidences().into_iter().enumerate() {
        let b = equal_width_index(conf, m);
        count[b] += 1;
        conf_sum[b] += conf;
        if pred == labels.get(i) {
            acc_sum[b] += 1.0;
        }
    }
    let bins = (0..m)
        .map(|b| {
            let (mean_confidence, mean_accuracy) = if count[b] == 0 {
                (0.0, 0.0)
            } else {
                let c = count[b] as f64;
                (conf_sum[b] / c, acc_sum[b] / c)
            };
            BinStats {
                count: count[b],
                mean_confidence,
                mean_accuracy,
                lower: b as f64 / m as f64,
                upper: (b + 1) as f64 / m as f64,
            }
        })
        .collect();
    BinGroup { class: None, bins }
}

fn count_group(probs: &ProbMatrix, labels: &LabelVec, class: usize, r: usize) -> BinGroup {
    let column = probs.values().index_axis_move(Axis(1), class);
    let mut order: Vec<usize> = (0..probs.n()).collect();
    order.sort_by(|&a, &b| column[a].total_cmp(&column[b]).then(a.cmp(&b)));

    let mut bins = Vec::with_capacity(r);
    let mut start = 0;
    for size in equal_count_sizes(probs.n(), r) {
        let members = &order[start..start + size];
        start += size;
        let c = size as f64;
        let conf_sum: f64 = members.iter().map(|&i| column[i]).sum();
        let hits = members.iter().filter(|&&i| labels.get(i) == class).count();
        bins.push(BinStats {
            count: size,
            mean_confidence: conf_sum / c,
            mean_accuracy: hits as f64 / c,
            lower: members.first().map_or(f64::NAN, |&i| column[i]),
            upper: members.last().map_or(f64::NAN, |&i| column[i]),
        });
    }
    BinGroup {
        class: Some(class),
        bins,
    }
}

/// Expected calibration error over `m` equal-width bins.
pub fn ece(probs: &ProbMatrix, labels: &LabelVec, m: usize) -> Result<f64> {
    reliability_bins(probs, labels, BinScheme::EqualWidth(m))?.ece()
}

/// Overconfident and underconfident halves of ECE; they sum to [`ece`].
pub fn ece_decomposed(probs: &ProbMatrix, labels: &LabelVec, m: usize) -> Result<(f64, f64)> {
    reliability_bins(probs, labels, BinScheme::EqualWidth(m))?.ece_parts()
}

/// Adaptive calibration error over `r` equal-count bins per class.
pub fn ace(probs: &ProbMatrix, labels: &LabelVec, r: usize) -> Result<f64> {
    reliability_bins(probs, labels, BinScheme::EqualCount(r))?.ace()
}

/// Mean negative log-likelihood of the label class, probabilities clamped at
/// [`NLL_CLAMP`].
pub fn nll(probs: &ProbMatrix, labels: &LabelVec) -> Result<f64> {
    labels.check_pairs_with(probs.n(), probs.k())?;
    let v = probs.values();
    let total: f64 = labels
        .as_slice()
        .iter()
        .enumerate()
        .map(|(i, &y)| -v[[i, y]].max(NLL_CLAMP).ln())
        .sum();
    Ok(total / probs.n() as f64)
}

/// All scalar metrics of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub ece: f64,
    pub ece_over: f64,
    pub ece_under: f64,
    pub ace: f64,
    pub accuracy: f64,
    pub nll: f64,
    pub n: usize,
    pub k: usize,
    pub m_bins: usize,
    pub r_bins: usize,
}

pub fn full_report(
    probs: &ProbMatrix,
    labels: &LabelVec,
    m: usize,
    r: usize,
) -> Result<CalibrationReport> {
    let width = reliability_bins(probs, labels, BinScheme::EqualWidth(m))?;
    let (ece_over, ece_under) = width.ece_parts()?;
    Ok(CalibrationReport {
        ece: width.ece()?,
        ece_over,
        ece_under,
        ace: ace(probs, labels, r)?,
        accuracy: crate::prob::accuracy(probs, labels)?,
        // -ln(1) is -0.0; keep the report non-negative in sign too.
        nll: nll(probs, labels)? + 0.0,
        n: probs.n(),
        k: probs.k(),
        m_bins: m,
        r_bins: r,
    })
}
