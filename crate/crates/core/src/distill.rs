//! Knowledge distillation from a (possibly calibrated) teacher.
//!
//! The student is trained on
//!
//! ```text
//! loss = (1 - lambda) * CE(y, softmax(s)) + lambda * s_kd * KL(p || softmax(s / t_kd))
//! p    = softmax(z_teacher / (t_cal * t_kd))
//! ```
//!
//! where `s_kd` is `t_kd^2` by default and 1 when the scaling flag is off.
//! The calibration temperature only ever touches the teacher; the student
//! sees `t_kd` alone.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::calibrate::Calibrator;
use crate::data::{Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::metrics::{self, CalibrationReport};
use crate::nn::{self, MlpModel, Objective, TrainConfig, TrainLog};
use crate::prob::{self, LabelVec, LogitMatrix, ProbMatrix, Temperature};

pub const DEFAULT_LAMBDA: f64 = 0.9;
pub const DEFAULT_KD_TEMPERATURE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KdConfig {
    pub lambda: f64,
    pub t_kd: Temperature,
    pub t_cal: Temperature,
    #[serde(default = "default_true")]
    pub scale_kd_by_t_squared: bool,
}

fn default_true() -> bool {
    true
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            t_kd: Temperature::new(DEFAULT_KD_TEMPERATURE).expect("positive"),
            t_cal: Temperature::new(crate::calibrate::DEFAULT_CALIBRATION_TEMPERATURE)
                .expect("positive"),
            scale_kd_by_t_squared: true,
        }
    }
}

impl KdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("lambda {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }

    pub fn with_t_cal(mut self, t_cal: f64) -> Result<Self> {
        self.t_cal = Temperature::new(t_cal)?;
        Ok(self)
    }

    /// Temperature the teacher's logits are divided by before the KL term.
    pub fn teacher_temperature(&self) -> f64 {
        self.t_cal.get() * self.t_kd.get()
    }

    pub fn terms(&self) -> KdTerms {
        KdTerms {
            lambda: self.lambda,
            t_kd: self.t_kd.get(),
            kd_scale: if self.scale_kd_by_t_squared {
                self.t_kd.get() * self.t_kd.get()
            } else {
                1.0
            },
        }
    }
}

/// The student-side knobs of the composite loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdTerms {
    pub lambda: f64,
    pub t_kd: f64,
    pub kd_scale: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdLoss {
    pub loss: f64,
    /// Mean hard cross-entropy at temperature 1.
    pub ce: f64,
    /// Mean KL, already multiplied by the KD scale.
    pub kd: f64,
    /// Gradient of `loss` with respect to the student logits.
    pub grad: Array2<f64>,
}

/// Mean row-wise KL(p || q) from log-probabilities of q; `0 log 0 = 0`.
fn mean_kl(p: ArrayView2<'_, f64>, log_q: ArrayView2<'_, f64>) -> f64 {
    let mut total = 0.0;
    for (pi, lqi) in p.iter().zip(log_q.iter()) {
        if *pi > 0.0 {
            total += pi * (pi.ln() - lqi);
        }
    }
    total / p.nrows() as f64
}

pub(crate) fn kd_loss_with_grad(
    student_logits: ArrayView2<'_, f64>,
    teacher_probs: ArrayView2<'_, f64>,
    labels: &[usize],
    terms: &KdTerms,
) -> KdLoss {
    let n = student_logits.nrows() as f64;
    let (ce, ce_grad) = crate::nn::loss::hard_ce(student_logits, labels);
    let log_q = prob::log_softmax_rows(student_logits, terms.t_kd);
    let kd = terms.kd_scale * mean_kl(teacher_probs, log_q.view());

    // d/ds [scale * KL(p || softmax(s / t))] = scale * (q_t - p) / (t * N)
    let kd_coef = terms.lambda * terms.kd_scale / (terms.t_kd * n);
    let ce_weight = 1.0 - terms.lambda;
    let mut grad = ce_grad;
    for (g, (lq, p)) in grad.iter_mut().zip(log_q.iter().zip(teacher_probs.iter())) {
        *g = ce_weight * *g + kd_coef * (lq.exp() - p);
    }

    KdLoss {
        loss: (1.0 - terms.lambda) * ce + terms.lambda * kd,
        ce,
        kd,
        grad,
    }
}

/// Composite KD loss for a student/teacher logit pair.
pub fn kd_loss(
    student_logits: &LogitMatrix,
    teacher_logits: &LogitMatrix,
    labels: &LabelVec,
    cfg: &KdConfig,
) -> Result<KdLoss> {
    cfg.validate()?;
    if student_logits.values().dim() != teacher_logits.values().dim() {
        return Err(Error::shape(format!(
            "student {:?} vs teacher {:?}",
            student_logits.values().dim(),
            teacher_logits.values().dim()
        )));
    }
    labels.check_pairs_with(student_logits.n(), student_logits.k())?;
    let p = prob::softmax_rows(teacher_logits.values(), cfg.teacher_temperature());
    let out = kd_loss_with_grad(student_logits.values(), p.view(), labels.as_slice(), &cfg.terms());
    if !out.loss.is_finite() {
        return Err(Error::numerical("kd_loss", "non-finite loss"));
    }
    Ok(out)
}

/// A teacher distribution written as a calibrated part plus an
/// overconfident one-hot part: `p = (1 - k) p_cal + k onehot(y)`.
#[derive(Debug, Clone)]
pub struct DecompositionSpec {
    pub k_over: f64,
    pub p_cal: ProbMatrix,
    pub labels: LabelVec,
}

impl DecompositionSpec {
    pub fn new(k_over: f64, p_cal: ProbMatrix, labels: LabelVec) -> Result<Self> {
        if !(0.0..=1.0).contains(&k_over) {
            return Err(Error::InvalidInput(format!("k = {k_over} outside [0, 1]")));
        }
        labels.check_pairs_with(p_cal.n(), p_cal.k())?;
        Ok(Self {
            k_over,
            p_cal,
            labels,
        })
    }

    /// The composed teacher distribution.
    pub fn teacher(&self) -> Result<ProbMatrix> {
        let mut p = self.p_cal.values().mapv(|v| (1.0 - self.k_over) * v);
        p.scaled_add(self.k_over, &self.labels.one_hot());
        ProbMatrix::new(p)
    }
}

#[derive(Debug, Clone)]
pub struct Decomposition {
    /// `(1 - lambda) CE(y, q) + lambda CE(p, q)`.
    pub direct: f64,
    /// `(1 - lambda + lambda k) CE(y, q) + lambda (1 - k) CE(p_cal, q)`.
    pub decomposed: f64,
    /// Weight on the one-hot term, `1 - lambda + lambda k`.
    pub one_hot_coef: f64,
    /// Weight on the calibrated-teacher term, `lambda (1 - k)`.
    pub kd_coef: f64,
    /// `-lambda H(p)`: what separates the KL form of the loss from `direct`.
    pub kl_constant: f64,
    pub grad_direct: Array2<f64>,
    pub grad_decomposed: Array2<f64>,
}

fn mean_ce(target: ArrayView2<'_, f64>, log_q: ArrayView2<'_, f64>) -> f64 {
    let mut total = 0.0;
    for (t, lq) in target.iter().zip(log_q.iter()) {
        if *t != 0.0 {
            total -= t * lq;
        }
    }
    total / target.nrows() as f64
}

/// Evaluates the unit-temperature KD loss both directly and in its
/// one-hot/calibrated split, with gradients in the student logits.
pub fn decompose_loss(
    student_logits: &LogitMatrix,
    spec: &DecompositionSpec,
    lambda: f64,
) -> Result<Decomposition> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::InvalidInput(format!("lambda = {lambda} outside [0, 1]")));
    }
    spec.labels
        .check_pairs_with(student_logits.n(), student_logits.k())?;
    let n = student_logits.n() as f64;
    let k = spec.k_over;
    let y = spec.labels.one_hot();
    let p = spec.teacher()?;
    let p = p.values();
    let p_cal = spec.p_cal.values();
    let log_q = prob::log_softmax_rows(student_logits.values(), 1.0);
    let q = log_q.mapv(f64::exp);

    let ce_y = mean_ce(y.view(), log_q.view());
    let direct = (1.0 - lambda) * ce_y + lambda * mean_ce(p, log_q.view());
    let one_hot_coef = 1.0 - lambda + lambda * k;
    let kd_coef = lambda * (1.0 - k);
    let decomposed = one_hot_coef * ce_y + kd_coef * mean_ce(p_cal, log_q.view());

    let mut grad_direct = Array2::zeros(q.raw_dim());
    let mut grad_decomposed = Array2::zeros(q.raw_dim());
    for ((i, j), qv) in q.indexed_iter() {
        let yv = y[[i, j]];
        grad_direct[[i, j]] = ((1.0 - lambda) * (qv - yv) + lambda * (qv - p[[i, j]])) / n;
        grad_decomposed[[i, j]] =
            (one_hot_coef * (qv - yv) + kd_coef * (qv - p_cal[[i, j]])) / n;
    }

    let entropy: f64 = p
        .axis_iter(Axis(0))
        .map(|row| row.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum::<f64>())
        .sum::<f64>()
        / n;

    Ok(Decomposition {
        direct,
        decomposed,
        one_hot_coef,
        kd_coef,
        kl_constant: -lambda * entropy,
        grad_direct,
        grad_decomposed,
    })
}

/// Teacher probabilities on `features` at the distillation temperature,
/// after the optional calibrator.
pub fn teacher_targets(
    teacher: &MlpModel,
    calibrator: Option<&Calibrator>,
    features: ArrayView2<'_, f64>,
    cfg: &KdConfig,
) -> Result<Array2<f64>> {
    let mut logits = teacher.forward(features)?;
    if let Some(c) = calibrator {
        logits = c.transform_logits(&logits)?;
    }
    Ok(prob::softmax_rows(logits.values(), cfg.teacher_temperature()))
}

#[derive(Debug, Clone)]
pub struct DistillOutcome {
    pub student: MlpModel,
    pub log: TrainLog,
    /// Student metrics on the test split.
    pub test_report: CalibrationReport,
}

/// Trains `student_init` against a frozen teacher.
///
/// The calibrator, if any, must already be fitted (on the validation split).
/// Its output logits then go through the usual `t_cal * t_kd` division, so
/// callers supplying a calibrator normally set `t_cal = 1`.
#[allow(clippy::too_many_arguments)]
pub fn distill_student(
    student_init: MlpModel,
    teacher: &MlpModel,
    calibrator: Option<&Calibrator>,
    data: &Dataset,
    train_cfg: &TrainConfig,
    kd_cfg: &KdConfig,
    m_bins: usize,
    r_bins: usize,
) -> Result<DistillOutcome> {
    kd_cfg.validate()?;
    if teacher.num_classes() != student_init.num_classes() {
        return Err(Error::shape("teacher and student disagree on class count"));
    }
    let train = data.split(SplitTag::Train);
    let targets = teacher_targets(teacher, calibrator, train.features.view(), kd_cfg)?;
    let objective = Objective::Kd {
        teacher_probs: targets,
        terms: kd_cfg.terms(),
    };
    let (student, log) = nn::train(student_init, data, train_cfg, &objective)?;
    let test_report = evaluate(&student, data, SplitTag::Test, m_bins, r_bins)?;
    Ok(DistillOutcome {
        student,
        log,
        test_report,
    })
}

/// Uncalibrated metrics of `model` on one split.
pub fn evaluate(
    model: &MlpModel,
    data: &Dataset,
    tag: SplitTag,
    m_bins: usize,
    r_bins: usize,
) -> Result<CalibrationReport> {
    let split = data.split(tag);
    let probs = prob::tempered_softmax(&model.forward(split.features.view())?, Temperature::ONE);
    metrics::full_report(&probs, &split.labels, m_bins, r_bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn cfg(lambda: f64, t_kd: f64, t_cal: f64) -> KdConfig {
        KdConfig {
            lambda,
            t_kd: Temperature::new(t_kd).unwrap(),
            t_cal: Temperature::new(t_cal).unwrap(),
            scale_kd_by_t_squared: true,
        }
    }

    fn logits(rows: &[Vec<f64>]) -> LogitMatrix {
        LogitMatrix::from_rows(rows).unwrap()
    }

    #[test]
    fn identical_logits_have_zero_kd() {
        let s = logits(&[vec![1.0, -0.5, 2.0], vec![0.3, 0.3, -1.0]]);
        let y = LabelVec::new(vec![2, 0], 3).unwrap();
        let out = kd_loss(&s, &s, &y, &cfg(0.9, 4.0, 1.0)).unwrap();
        assert!(out.kd.abs() < 1e-13);
        assert!((out.loss - 0.1 * out.ce).abs() < 1e-13);
    }

    #[test]
    fn lambda_zero_is_hard_ce() {
        let s = logits(&[vec![1.0, -0.5, 2.0]]);
        let t = logits(&[vec![3.0, 0.0, 0.0]]);
        let y = LabelVec::new(vec![1], 3).unwrap();
        let out = kd_loss(&s, &t, &y, &cfg(0.0, 4.0, 1.5)).unwrap();
        let (ce, grad) = crate::nn::loss::hard_ce(s.values(), y.as_slice());
        assert_eq!(out.loss, ce);
        assert_eq!(out.grad, grad);
    }

    #[test]
    fn unit_temperature_kl_by_hand() {
        let s = logits(&[vec![0.0, 1.0, 2.0]]);
        let t = logits(&[vec![2.0, 1.0, 0.0]]);
        let y = LabelVec::new(vec![0], 3).unwrap();
        let out = kd_loss(&s, &t, &y, &cfg(1.0, 1.0, 1.0)).unwrap();
        // p is q reversed: p = [a, b, c], q = [c, b, a]; KL = a ln(a/c) + c ln(c/a)
        let z: f64 = 1.0 + 1f64.exp() + 2f64.exp();
        let (a, c) = (2f64.exp() / z, 1.0 / z);
        let expect = (a - c) * (a / c).ln();
        assert!((out.loss - expect).abs() < 1e-12);
        assert!((expect - 2.0 * (a - c)).abs() < 1e-12);
    }

    #[test]
    fn decomposition_limits() {
        let p_cal = ProbMatrix::from_rows(&[vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]]).unwrap();
        let y = LabelVec::new(vec![1, 2], 3).unwrap();
        let s = logits(&[vec![0.1, 0.4, -0.2], vec![1.0, 0.0, 0.5]]);
        let zero = decompose_loss(&s, &DecompositionSpec::new(0.0, p_cal.clone(), y.clone()).unwrap(), 0.9).unwrap();
        assert!((zero.one_hot_coef - 0.1).abs() < 1e-15);
        assert_eq!(zero.kd_coef, 0.9);
        let one = decompose_loss(&s, &DecompositionSpec::new(1.0, p_cal.clone(), y.clone()).unwrap(), 0.9).unwrap();
        assert_eq!(one.kd_coef, 0.0);
        assert!((one.one_hot_coef - 1.0).abs() < 1e-15);
        assert!((one.direct - one.decomposed).abs() < 1e-12);
        assert!(DecompositionSpec::new(1.5, p_cal, y).is_err());
    }

    #[test]
    fn composite_temperature_law() {
        let z = logits(&[vec![3.0, -1.0, 0.5, 2.0], vec![0.0, 7.0, -2.0, 1.0]]);
        let c = Calibrator::fixed(1.5).unwrap();
        let calibrated = c.transform_logits(&z).unwrap();
        let two_step = prob::softmax_rows(calibrated.values(), 4.0);
        let one_step = prob::softmax_rows(z.values(), 6.0);
        for (a, b) in two_step.iter().zip(one_step.iter()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn teacher_shift_invariance() {
        let s = logits(&[vec![0.5, -0.5, 1.0]]);
        let t = logits(&[vec![2.0, 0.0, 1.0]]);
        let shifted = LogitMatrix::new(&t.values() + &array![[100.0, 100.0, 100.0]]).unwrap();
        let y = LabelVec::new(vec![0], 3).unwrap();
        let a = kd_loss(&s, &t, &y, &KdConfig::default()).unwrap();
        let b = kd_loss(&s, &shifted, &y, &KdConfig::default()).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
    }

    #[test]
    fn kd_config_json() {
        let v = serde_json::to_value(KdConfig::default()).unwrap();
        assert_eq!(
            v,
            serde_json::json!({"lambda": 0.9, "t_kd": 4.0, "t_cal": 1.5, "scale_kd_by_t_squared": true})
        );
        assert!(cfg(1.2, 4.0, 1.0).validate().is_err());
    }
}
