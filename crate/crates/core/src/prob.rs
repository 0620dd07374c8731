//! Logit and probability containers plus tempered softmax.
//!
//! Every matrix here is row-major `N x K`: one row per sample, one column per
//! class. Constructors validate their invariants and the types are immutable
//! afterwards, so a `ProbMatrix` in hand is always row-stochastic.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-sum tolerance accepted when building a [`ProbMatrix`] from outside data.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// Raw model scores, `N x K`, all finite, `N >= 1`, `K >= 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    values: Array2<f64>,
}

impl LogitMatrix {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        check_dims(&values)?;
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite logit {bad}")));
        }
        Ok(Self { values })
    }

    /// Builds from nested rows; rows must share one length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows_to_array(rows)?)
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn k(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    /// Row-wise argmax with ties going to the lowest class index.
    pub fn argmax(&self) -> Vec<usize> {
        rowwise_argmax(self.values.view())
    }
}

/// Row-stochastic probabilities, `N x K`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix {
    values: Array2<f64>,
}

impl ProbMatrix {
    /// Validates entries in `[0, 1]` and row sums within [`ROW_SUM_TOLERANCE`].
    /// Rows that miss the tolerance are rejected, not renormalized.
    pub fn new(values: Array2<f64>) -> Result<Self> {
        check_dims(&values)?;
        for (i, row) in values.axis_iter(Axis(0)).enumerate() {
            if let Some(bad) = row.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(Error::InvalidInput(format!(
                    "row {i}: probability {bad} outside [0, 1]"
                )));
            }
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::InvalidInput(format!("row {i} sums to {sum}")));
            }
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        Self::new(rows_to_array(rows)?)
    }

    /// For values produced by a softmax in this crate.
    pub(crate) fn from_softmax(values: Array2<f64>) -> Self {
        debug_assert!(values
            .axis_iter(Axis(0))
            .all(|r| (r.sum() - 1.0).abs() <= ROW_SUM_TOLERANCE));
        Self { values }
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn k(&self) -> usize {
        self.values.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.values.row(i)
    }

    pub fn argmax(&self) -> Vec<usize> {
        rowwise_argmax(self.values.view())
    }

    /// Top-label confidence and predicted class per row.
    pub fn confidences(&self) -> Vec<(f64, usize)> {
        self.values
            .axis_iter(Axis(0))
            .map(|row| {
                let j = argmax_row(row);
                (row[j], j)
            })
            .collect()
    }
}

/// Integer class labels in `[0, k)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelVec {
    labels: Vec<usize>,
    k: usize,
}

impl LabelVec {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 classes, got {k}")));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= k) {
            return Err(Error::InvalidInput(format!("label {bad} outside [0, {k})")));
        }
        Ok(Self { labels, k })
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, i: usize) -> usize {
        self.labels[i]
    }

    /// Dense `N x K` one-hot encoding.
    pub fn one_hot(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.labels.len(), self.k));
        for (i, &y) in self.labels.iter().enumerate() {
            out[[i, y]] = 1.0;
        }
        out
    }

    /// Checks that these labels pair with an `n x k` matrix.
    pub fn check_pairs_with(&self, n: usize, k: usize) -> Result<()> {
        if self.labels.len() != n {
            return Err(Error::shape(format!(
                "{} labels for {} rows",
                self.labels.len(),
                n
            )));
        }
        if self.k != k {
            return Err(Error::shape(format!(
                "labels declare {} classes, matrix has {}",
                self.k, k
            )));
        }
        Ok(())
    }
}

/// A softmax temperature, positive and finite.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub const ONE: Temperature = Temperature(1.0);

    pub fn new(t: f64) -> Result<Self> {
        if t > 0.0 && t.is_finite() {
            Ok(Self(t))
        } else {
            Err(Error::InvalidTemperature(t))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;
    fn try_from(t: f64) -> Result<Self> {
        Temperature::new(t)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

/// `softmax(z / t)` row-wise, with per-row max subtraction.
pub fn tempered_softmax(logits: &LogitMatrix, t: Temperature) -> ProbMatrix {
    ProbMatrix::from_softmax(softmax_rows(logits.values(), t.get()))
}

/// Entrywise log of [`tempered_softmax`], via log-sum-exp.
pub fn log_tempered_softmax(logits: &LogitMatrix, t: Temperature) -> Array2<f64> {
    log_softmax_rows(logits.values(), t.get())
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(probs: &ProbMatrix, labels: &LabelVec) -> Result<f64> {
    labels.check_pairs_with(probs.n(), probs.k())?;
    let correct = probs
        .argmax()
        .iter()
        .zip(labels.as_slice())
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / probs.n() as f64)
}

/// Unchecked row-wise tempered softmax over a raw view. `t` must be positive.
pub(crate) fn softmax_rows(z: ArrayView2<'_, f64>, t: f64) -> Array2<f64> {
    let mut out = z.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / t));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v / t - max).exp();
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
    out
}

pub(crate) fn log_softmax_rows(z: ArrayView2<'_, f64>, t: f64) -> Array2<f64> {
    let mut out = z.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        row.mapv_inplace(|v| v / t);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Lowest index among the maxima of a row.
pub(crate) fn argmax_row(row: ArrayView1<'_, f64>) -> usize {
    let mut best = 0;
    for j in 1..row.len() {
        if row[j] > row[best] {
            best = j;
        }
    }
    best
}

pub(crate) fn rowwise_argmax(m: ArrayView2<'_, f64>) -> Vec<usize> {
    m.axis_iter(Axis(0)).map(argmax_row).collect()
}

fn check_dims(values: &Array2<f64>) -> Result<()> {
    if values.nrows() < 1 {
        return Err(Error::shape("need at least one row"));
    }
    if values.ncols() < 2 {
        return Err(Error::shape(format!(
            "need at least 2 classes, got {}",
            values.ncols()
        )));
    }
    Ok(())
}

fn rows_to_array(rows: &[Vec<f64>]) -> Result<Array2<f64>> {
    let k = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != k) {
        return Err(Error::shape("ragged rows"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), k), flat).map_err(|e| Error::shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn logits(rows: &[Vec<f64>]) -> LogitMatrix {
        LogitMatrix::from_rows(rows).unwrap()
    }

    fn t(v: f64) -> Temperature {
        Temperature::new(v).unwrap()
    }

    #[test]
    fn symmetric_row_is_uniform() {
        let p = tempered_softmax(&logits(&[vec![0.0, 0.0]]), Temperature::ONE);
        assert_eq!(p.values(), array![[0.5, 0.5]]);
    }

    #[test]
    fn temperature_two_halves_the_logits() {
        let p = tempered_softmax(&logits(&[vec![2.0, 0.0]]), t(2.0));
        let e = std::f64::consts::E;
        assert!((p.values()[[0, 0]] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p.values()[[0, 1]] - 1.0 / (e + 1.0)).abs() < 1e-12);
        assert!((p.values()[[0, 0]] - 0.73106).abs() < 1e-5);
    }

    #[test]
    fn log_softmax_survives_huge_gap() {
        let l = log_tempered_softmax(&logits(&[vec![1000.0, 0.0]]), Temperature::ONE);
        assert!(l.iter().all(|v| v.is_finite()));
        assert!(l[[0, 0]].abs() < 1e-300);
        assert!((l[[0, 1]] + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn log_softmax_of_symmetric_row() {
        let l = log_tempered_softmax(&logits(&[vec![0.0, 0.0]]), Temperature::ONE);
        assert_eq!(l, array![[0.5f64.ln(), 0.5f64.ln()]]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            LogitMatrix::from_rows(&[vec![f64::NAN, 0.0]]),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            LogitMatrix::from_rows(&[vec![f64::INFINITY, 0.0]]),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(Temperature::new(0.0), Err(Error::InvalidTemperature(_))));
        assert!(matches!(Temperature::new(-1.0), Err(Error::InvalidTemperature(_))));
        assert!(Temperature::new(f64::INFINITY).is_err());
        assert!(LogitMatrix::from_rows(&[vec![1.0]]).is_err());
        assert!(ProbMatrix::from_rows(&[vec![0.5, 0.6]]).is_err());
        assert!(ProbMatrix::from_rows(&[vec![1.2, -0.2]]).is_err());
        assert!(LabelVec::new(vec![0, 3], 3).is_err());
    }

    #[test]
    fn accuracy_counts() {
        let p = ProbMatrix::from_rows(&[
            vec![0.9, 0.1],
            vec![0.2, 0.8],
            vec![0.6, 0.4],
            vec![0.3, 0.7],
        ])
        .unwrap();
        let all = LabelVec::new(vec![0, 1, 0, 1], 2).unwrap();
        let none = LabelVec::new(vec![1, 0, 1, 0], 2).unwrap();
        let three = LabelVec::new(vec![0, 1, 0, 0], 2).unwrap();
        assert_eq!(accuracy(&p, &all).unwrap(), 1.0);
        assert_eq!(accuracy(&p, &none).unwrap(), 0.0);
        assert_eq!(accuracy(&p, &three).unwrap(), 0.75);
        let short = LabelVec::new(vec![0], 2).unwrap();
        assert!(matches!(accuracy(&p, &short), Err(Error::Shape(_))));
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let l = logits(&[vec![1.0, 3.0, 3.0], vec![2.0, 2.0, 2.0]]);
        assert_eq!(l.argmax(), vec![1, 0]);
        assert_eq!(tempered_softmax(&l, t(7.0)).argmax(), vec![1, 0]);
    }

    #[test]
    fn huge_temperature_is_uniform() {
        let l = logits(&[vec![5.0, -3.0, 0.5, 12.0]]);
        let p = tempered_softmax(&l, t(1e6));
        assert!(p.values().iter().all(|v| (v - 0.25).abs() < 1e-4));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn logit_matrix() -> impl Strategy<Value = LogitMatrix> {
            (1usize..6, 2usize..6).prop_flat_map(|(n, k)| {
                proptest::collection::vec(-30.0f64..30.0, n * k).prop_map(move |v| {
                    LogitMatrix::new(Array2::from_shape_vec((n, k), v).unwrap()).unwrap()
                })
            })
        }

        proptest! {
            #[test]
            fn exp_log_softmax_matches_softmax(l in logit_matrix(), temp in 0.1f64..10.0) {
                let t = Temperature::new(temp).unwrap();
                let p = tempered_softmax(&l, t);
                let lp = log_tempered_softmax(&l, t);
                for (a, b) in p.values().iter().zip(lp.iter()) {
                    prop_assert!((a - b.exp()).abs() < 1e-12);
                }
                for row in p.values().axis_iter(Axis(0)) {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-12);
                }
            }

            #[test]
            fn argmax_invariant_and_flattening(l in logit_matrix(), t1 in 0.1f64..10.0, dt in 0.01f64..10.0) {
                let lo = tempered_softmax(&l, Temperature::new(t1).unwrap());
                let hi = tempered_softmax(&l, Temperature::new(t1 + dt).unwrap());
                prop_assert_eq!(lo.argmax(), l.argmax());
                prop_assert_eq!(hi.argmax(), l.argmax());
                for (a, b) in lo.confidences().iter().zip(hi.confidences()) {
                    prop_assert!(b.0 <= a.0 + 1e-15);
                }
            }
        }
    }
}
