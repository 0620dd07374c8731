//! Post-hoc calibrators for a frozen model's logits.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prob::{self, LabelVec, LogitMatrix, ProbMatrix, Temperature};

/// Calibration temperature used when none is given.
pub const DEFAULT_CALIBRATION_TEMPERATURE: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemperatureSearch {
    pub lo: f64,
    pub hi: f64,
    /// Final bracket width, measured in log-temperature.
    pub tol: f64,
}

impl Default for TemperatureSearch {
    fn default() -> Self {
        Self {
            lo: 0.05,
            hi: 10.0,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VectorScalingFit {
    pub steps: usize,
    pub lr: f64,
}

impl Default for VectorScalingFit {
    fn default() -> Self {
        Self { steps: 2000, lr: 0.05 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FitMetadata {
    pub nll_before: f64,
    pub nll_after: f64,
    /// Seed of the data split the fit ran on, when known.
    pub split_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Calibrator {
    FixedTemperature {
        t: Temperature,
    },
    FittedTemperature {
        t: Temperature,
        fit_metadata: FitMetadata,
    },
    VectorScaling {
        w: Vec<f64>,
        b: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        fit_metadata: Option<FitMetadata>,
    },
}

impl Calibrator {
    pub fn fixed(t: f64) -> Result<Self> {
        Ok(Calibrator::FixedTemperature {
            t: Temperature::new(t)?,
        })
    }

    pub fn identity_vector(k: usize) -> Self {
        Calibrator::VectorScaling {
            w: vec![1.0; k],
            b: vec![0.0; k],
            fit_metadata: None,
        }
    }

    pub fn temperature(&self) -> Option<Temperature> {
        match self {
            Calibrator::FixedTemperature { t } | Calibrator::FittedTemperature { t, .. } => {
                Some(*t)
            }
            Calibrator::VectorScaling { .. } => None,
        }
    }

    pub fn fit_metadata(&self) -> Option<&FitMetadata> {
        match self {
            Calibrator::FixedTemperature { .. } => None,
            Calibrator::FittedTemperature { fit_metadata, .. } => Some(fit_metadata),
            Calibrator::VectorScaling { fit_metadata, .. } => fit_metadata.as_ref(),
        }
    }

    /// Short human-readable label, e.g. `fixed-T(1.5)`.
    pub fn describe(&self) -> String {
        match self {
            Calibrator::FixedTemperature { t } => format!("fixed-T({})", t.get()),
            Calibrator::FittedTemperature { t, .. } => format!("fitted-T({:.4})", t.get()),
            Calibrator::VectorScaling { .. } => "vector-scaling".to_string(),
        }
    }

    /// Calibrated logits: `z / t` for temperatures, `w * z + b` for vector
    /// scaling. Softmax of these is [`Calibrator::apply`].
    pub fn transform_logits(&self, logits: &LogitMatrix) -> Result<LogitMatrix> {
        match self {
            Calibrator::FixedTemperature { t } | Calibrator::FittedTemperature { t, .. } => {
                let t = t.get();
                LogitMatrix::new(logits.values().mapv(|z| z / t))
            }
            Calibrator::VectorScaling { w, b, .. } => {
                if w.len() != logits.k() || b.len() != logits.k() {
                    return Err(Error::shape(format!(
                        "vector scaling has {} classes, logits have {}",
                        w.len(),
                        logits.k()
                    )));
                }
                LogitMatrix::new(affine_logits(
                    logits.values(),
                    &Array1::from(w.clone()),
                    &Array1::from(b.clone()),
                ))
            }
        }
    }

    pub fn apply(&self, logits: &LogitMatrix) -> Result<ProbMatrix> {
        match self {
            Calibrator::FixedTemperature { t } | Calibrator::FittedTemperature { t, .. } => {
                Ok(prob::tempered_softmax(logits, *t))
            }
            Calibrator::VectorScaling { .. } => Ok(prob::tempered_softmax(
                &self.transform_logits(logits)?,
                Temperature::ONE,
            )),
        }
    }
}

fn affine_logits(z: ArrayView2<'_, f64>, w: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = z.to_owned();
    for mut row in out.axis_iter_mut(Axis(0)) {
        for ((v, wj), bj) in row.iter_mut().zip(w).zip(b) {
            *v = wj * *v + bj;
        }
    }
    out
}

/// Mean NLL of `softmax(z / t)` against the labels.
pub fn nll_at_temperature(logits: &LogitMatrix, labels: &LabelVec, t: f64) -> f64 {
    let z = logits.values();
    let mut total = 0.0;
    for (row, &y) in z.axis_iter(Axis(0)).zip(labels.as_slice()) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / t));
        let lse = max + row.iter().map(|&v| (v / t - max).exp()).sum::<f64>().ln();
        total += lse - row[y] / t;
    }
    total / z.nrows() as f64
}

fn single_class_warning(labels: &LabelVec) -> Vec<String> {
    let first = labels.as_slice().first().copied();
    if labels.as_slice().iter().all(|&y| Some(y) == first) {
        vec!["labels contain a single class; the fit is degenerate".to_string()]
    } else {
        Vec::new()
    }
}

/// NLL-optimal temperature found by golden-section search on `ln t`.
///
/// A dense log-spaced grid replaces the golden section when the objective
/// does not bracket a minimum in the interior of `[lo, hi]`. The result is
/// never worse in NLL than `t = 1`.
pub fn fit_temperature(
    logits: &LogitMatrix,
    labels: &LabelVec,
    search: TemperatureSearch,
) -> Result<Calibrator> {
    labels.check_pairs_with(logits.n(), logits.k())?;
    if !(search.lo > 0.0 && search.hi > search.lo && search.tol > 0.0) {
        return Err(Error::Config(format!("bad temperature search {search:?}")));
    }
    let warnings = single_class_warning(labels);
    let f = |u: f64| nll_at_temperature(logits, labels, u.exp());

    let (a, b) = (search.lo.ln(), search.hi.ln());
    let mut best_u = if brackets_minimum(&f, a, b) {
        golden_section(&f, a, b, search.tol)
    } else {
        dense_grid(&f, a, b, 401)
    };

    // Local refinement on a grid spanning a few tolerances around the optimum.
    let step = search.tol / 4.0;
    let mut best_f = f(best_u);
    for i in -8i32..=8 {
        let u = (best_u + f64::from(i) * step).clamp(a, b);
        let fu = f(u);
        if fu < best_f {
            best_f = fu;
            best_u = u;
        }
    }

    let nll_before = f(0.0);
    let mut t = best_u.exp();
    if nll_before < best_f {
        t = 1.0;
        best_f = nll_before;
    }
    if !best_f.is_finite() {
        return Err(Error::FitDiverged("non-finite NLL in temperature search".into()));
    }
    Ok(Calibrator::FittedTemperature {
        t: Temperature::new(t)?,
        fit_metadata: FitMetadata {
            nll_before,
            nll_after: best_f,
            split_seed: None,
            warnings,
        },
    })
}

fn brackets_minimum(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> bool {
    let probes: Vec<f64> = (0..=8).map(|i| f(a + (b - a) * i as f64 / 8.0)).collect();
    let interior_min = probes[1..8].iter().copied().fold(f64::INFINITY, f64::min);
    interior_min < probes[0] && interior_min < probes[8]
}

fn golden_section(f: &impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while b - a > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

fn dense_grid(f: &impl Fn(f64) -> f64, a: f64, b: f64, points: usize) -> f64 {
    let mut best = (a, f(a));
    for i in 1..points {
        let u = a + (b - a) * i as f64 / (points - 1) as f64;
        let fu = f(u);
        if fu < best.1 {
            best = (u, fu);
        }
    }
    best.0
}

/// Mean NLL of `softmax(w * z + b)` and its gradient in `(w, b)`.
fn vector_nll_and_grad(
    z: ArrayView2<'_, f64>,
    labels: &LabelVec,
    w: &Array1<f64>,
    b: &Array1<f64>,
) -> (f64, Array1<f64>, Array1<f64>) {
    let n = z.nrows() as f64;
    let scaled = affine_logits(z, w, b);
    let logp = prob::log_softmax_rows(scaled.view(), 1.0);
    let mut loss = 0.0;
    let mut gw = Array1::zeros(w.len());
    let mut gb = Array1::zeros(b.len());
    for (i, &y) in labels.as_slice().iter().enumerate() {
        loss -= logp[[i, y]];
        for j in 0..w.len() {
            let d = logp[[i, j]].exp() - if j == y { 1.0 } else { 0.0 };
            gw[j] += d * z[[i, j]];
            gb[j] += d;
        }
    }
    (loss / n, gw / n, gb / n)
}

/// Full-batch gradient descent on mean NLL over per-class `(w, b)`, starting
/// from the identity. The best iterate seen is returned, so the result never
/// has higher NLL than the identity.
pub fn fit_vector_scaling(
    logits: &LogitMatrix,
    labels: &LabelVec,
    fit: VectorScalingFit,
) -> Result<Calibrator> {
    labels.check_pairs_with(logits.n(), logits.k())?;
    let k = logits.k();
    let z = logits.values();
    let mut w = Array1::from_elem(k, 1.0);
    let mut b = Array1::zeros(k);
    let (nll_before, mut gw, mut gb) = vector_nll_and_grad(z, labels, &w, &b);
    let mut best = (nll_before, w.clone(), b.clone());

    for step in 0..fit.steps {
        if gw.iter().chain(gb.iter()).any(|g| !g.is_finite()) {
            return Err(Error::FitDiverged(format!("non-finite gradient at step {step}")));
        }
        w.scaled_add(-fit.lr, &gw);
        b.scaled_add(-fit.lr, &gb);
        let (loss, nw, nb) = vector_nll_and_grad(z, labels, &w, &b);
        if !loss.is_finite() {
            return Err(Error::FitDiverged(format!("non-finite NLL at step {step}")));
        }
        if loss < best.0 {
            best = (loss, w.clone(), b.clone());
        }
        gw = nw;
        gb = nb;
    }

    let (nll_after, w, b) = best;
    Ok(Calibrator::VectorScaling {
        w: w.to_vec(),
        b: b.to_vec(),
        fit_metadata: Some(FitMetadata {
            nll_before,
            nll_after,
            split_seed: None,
            warnings: single_class_warning(labels),
        }),
    })
}

/// Attaches the seed of the split a calibrator was fitted on.
pub fn with_split_seed(mut c: Calibrator, seed: u64) -> Calibrator {
    match &mut c {
        Calibrator::FittedTemperature { fit_metadata, .. } => fit_metadata.split_seed = Some(seed),
        Calibrator::VectorScaling {
            fit_metadata: Some(m),
            ..
        } => m.split_seed = Some(seed),
        _ => {}
    }
    c
}
