use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{CalibratorChoice, StudentSpec, ZooEntry};
use super::records::{CellTiming, ExperimentRecord};
use crate::calibrate::{self, Calibrator, TemperatureSearch, VectorScalingFit};
use crate::data::{Dataset, Split, SplitTag};
use crate::distill::{self, KdConfig};
use crate::error::{Error, Result};
use crate::metrics::{self, CalibrationReport};
use crate::nn::{self, init_model, MlpModel, Objective, TrainLog};
use crate::prob::{LogitMatrix, Temperature};
use crate::stats::{self, PairedSeries};

/// A zoo teacher after training, with its uncalibrated test metrics.
#[derive(Debug, Clone)]
pub struct TrainedTeacher {
    pub entry: ZooEntry,
    pub model: MlpModel,
    pub log: TrainLog,
    pub report: CalibrationReport,
}

impl TrainedTeacher {
    pub fn id(&self) -> &str {
        &self.entry.id
    }
}

#[derive(Debug)]
pub struct ZooMember {
    pub entry: ZooEntry,
    pub outcome: std::result::Result<TrainedTeacher, String>,
}

pub fn layer_dims(data: &Dataset, hidden: &[usize]) -> Vec<usize> {
    std::iter::once(data.dim())
        .chain(hidden.iter().copied())
        .chain(std::iter::once(data.k()))
        .collect()
}

pub fn train_teacher(
    data: &Dataset,
    entry: &ZooEntry,
    m_bins: usize,
    r_bins: usize,
) -> Result<TrainedTeacher> {
    let init = init_model(&layer_dims(data, &entry.hidden), entry.init_seed)?;
    let (model, log) = nn::train(init, data, &entry.train, &Objective::HardCe)?;
    let report = distill::evaluate(&model, data, SplitTag::Test, m_bins, r_bins)?;
    Ok(TrainedTeacher {
        entry: entry.clone(),
        model,
        log,
        report,
    })
}

/// Trains every zoo entry in parallel. A failed entry is recorded and the
/// rest continue.
pub fn run_teacher_zoo(data: &Dataset, zoo: &[ZooEntry], m_bins: usize, r_bins: usize) -> Vec<ZooMember> {
    zoo.par_iter()
        .map(|entry| ZooMember {
            entry: entry.clone(),
            outcome: train_teacher(data, entry, m_bins, r_bins).map_err(|e| e.to_string()),
        })
        .collect()
}

/// One (teacher, calibrator, temperature, seed) distillation run.
#[derive(Debug, Clone)]
pub struct KdCell<'a> {
    pub study: &'a str,
    pub teacher_id: &'a str,
    /// The network whose logits are distilled (a mixup-retrained teacher for
    /// the mixup variant).
    pub teacher: &'a MlpModel,
    pub calibrator: Option<&'a Calibrator>,
    pub calibrator_label: String,
    pub kd: KdConfig,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct CellOutput {
    pub record: ExperimentRecord,
    pub student: MlpModel,
    pub student_log: TrainLog,
    pub timing: CellTiming,
}

/// File name of a cell's student checkpoint under `checkpoints/students/`.
pub fn student_checkpoint_name(study: &str, teacher: &str, calibrator: &str, t_cal: f64, seed: u64) -> String {
    let clean = |s: &str| -> String {
        s.chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
            .collect()
    };
    format!(
        "checkpoints/students/{}__{}__{}__t{}__s{}.json",
        clean(study),
        clean(teacher),
        clean(calibrator),
        t_cal,
        seed
    )
}

/// Test metrics of a teacher after its calibrator and calibration temperature.
pub fn teacher_view_report(
    teacher: &MlpModel,
    calibrator: Option<&Calibrator>,
    t_cal: Temperature,
    data: &Dataset,
    m_bins: usize,
    r_bins: usize,
) -> Result<CalibrationReport> {
    let test = data.split(SplitTag::Test);
    let mut logits = teacher.forward(test.features.view())?;
    if let Some(c) = calibrator {
        logits = c.transform_logits(&logits)?;
    }
    let probs = crate::prob::tempered_softmax(&logits, t_cal);
    metrics::full_report(&probs, &test.labels, m_bins, r_bins)
}

pub fn student_config(student: &StudentSpec, seed: u64) -> nn::TrainConfig {
    nn::TrainConfig {
        seed,
        ..student.train.clone()
    }
}

pub fn run_cell(
    data: &Dataset,
    student: &StudentSpec,
    cell: &KdCell<'_>,
    m_bins: usize,
    r_bins: usize,
) -> Result<CellOutput> {
    let start = Instant::now();
    let teacher_report =
        teacher_view_report(cell.teacher, cell.calibrator, cell.kd.t_cal, data, m_bins, r_bins)?;
    let init = init_model(&layer_dims(data, &student.hidden), cell.seed)?;
    let outcome = distill::distill_student(
        init,
        cell.teacher,
        cell.calibrator,
        data,
        &student_config(student, cell.seed),
        &cell.kd,
        m_bins,
        r_bins,
    )?;
    let t_cal = cell.kd.t_cal.get();
    let record = ExperimentRecord::new(
        cell.study,
        cell.teacher_id,
        &cell.calibrator_label,
        t_cal,
        cell.seed,
        &teacher_report,
        &outcome.test_report,
        student_checkpoint_name(cell.study, cell.teacher_id, &cell.calibrator_label, t_cal, cell.seed),
    );
    let timing = CellTiming {
        study: cell.study.to_string(),
        teacher_id: cell.teacher_id.to_string(),
        calibrator: cell.calibrator_label.clone(),
        t_cal,
        seed: cell.seed,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    Ok(CellOutput {
        record,
        student: outcome.student,
        student_log: outcome.log,
        timing,
    })
}

fn run_cells(
    data: &Dataset,
    student: &StudentSpec,
    cells: &[KdCell<'_>],
    m_bins: usize,
    r_bins: usize,
) -> Result<Vec<CellOutput>> {
    cells
        .par_iter()
        .map(|cell| {
            run_cell(data, student, cell, m_bins, r_bins).map_err(|e| match e {
                Error::Numerical { stage, message } => Error::Numerical {
                    stage: format!(
                        "{}/{}/{}/seed {}: {stage}",
                        cell.study, cell.teacher_id, cell.calibrator_label, cell.seed
                    ),
                    message,
                },
                other => other,
            })
        })
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; 0 for fewer than two values.
pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherPoint {
    pub teacher_id: String,
    pub teacher_accuracy: f64,
    pub teacher_ace: f64,
    pub mean_student_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationSummary {
    pub points: Vec<TeacherPoint>,
    pub r2_acc: Option<f64>,
    pub r2_ace: Option<f64>,
    pub spearman_ace: Option<f64>,
    pub spearman_acc: Option<f64>,
    pub pearson_ace: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CorrelationStudy {
    pub summary: CorrelationSummary,
    pub cells: Vec<CellOutput>,
}

impl CorrelationStudy {
    pub fn records(&self) -> Vec<ExperimentRecord> {
        self.cells.iter().map(|c| c.record.clone()).collect()
    }
}

/// Correlations across teachers, one point per teacher with the student
/// accuracy averaged over seeds. Degenerate series leave the statistic
/// empty and add a note.
pub fn correlate(points: &[TeacherPoint]) -> CorrelationSummary {
    let mut notes = Vec::new();
    let y: Vec<f64> = points.iter().map(|p| p.mean_student_accuracy).collect();
    let acc: Vec<f64> = points.iter().map(|p| p.teacher_accuracy).collect();
    let ace: Vec<f64> = points.iter().map(|p| p.teacher_ace).collect();
    let mut stat = |name: &str, x: &[f64], f: fn(&PairedSeries) -> Result<f64>| {
        match PairedSeries::new(x.to_vec(), y.clone()).and_then(|s| f(&s)) {
            Ok(v) => Some(v),
            Err(e) => {
                notes.push(format!("{name}: {e}"));
                None
            }
        }
    };
    CorrelationSummary {
        points: points.to_vec(),
        r2_acc: stat("r2_acc", &acc, stats::r_squared),
        r2_ace: stat("r2_ace", &ace, stats::r_squared),
        spearman_ace: stat("spearman_ace", &ace, stats::spearman),
        spearman_acc: stat("spearman_acc", &acc, stats::spearman),
        pearson_ace: stat("pearson_ace", &ace, stats::pearson),
        notes,
    }
}

/// Plain KD (no calibration) from every teacher for every seed.
#[allow(clippy::too_many_arguments)]
pub fn run_correlation_study(
    data: &Dataset,
    teachers: &[TrainedTeacher],
    student: &StudentSpec,
    kd: &KdConfig,
    seeds: &[u64],
    m_bins: usize,
    r_bins: usize,
) -> Result<CorrelationStudy> {
    let plain = kd.with_t_cal(1.0)?;
    let cells: Vec<KdCell<'_>> = teachers
        .iter()
        .flat_map(|t| {
            seeds.iter().map(move |&seed| KdCell {
                study: "correlation",
                teacher_id: t.id(),
                teacher: &t.model,
                calibrator: None,
                calibrator_label: "none".to_string(),
                kd: plain,
                seed,
            })
        })
        .collect();
    let outputs = run_cells(data, student, &cells, m_bins, r_bins)?;
    let points: Vec<TeacherPoint> = teachers
        .iter()
        .map(|t| {
            let accs: Vec<f64> = outputs
                .iter()
                .filter(|o| o.record.teacher_id == t.id())
                .map(|o| o.record.student_accuracy)
                .collect();
            TeacherPoint {
                teacher_id: t.id().to_string(),
                teacher_accuracy: t.report.accuracy,
                teacher_ace: t.report.ace,
                mean_student_accuracy: mean(&accs),
            }
        })
        .collect();
    Ok(CorrelationStudy {
        summary: correlate(&points),
        cells: outputs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub t_cal: f64,
    pub mean_student_accuracy: f64,
    pub std_student_accuracy: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub teacher_id: String,
    pub rows: Vec<AblationRow>,
    /// Root mean square of the per-temperature seed standard deviations.
    pub pooled_std: f64,
    /// Best mean among `t_cal > 1` minus the mean at `t_cal = 1`, if both exist.
    pub best_gain: Option<f64>,
    pub best_t_cal: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TemperatureAblation {
    pub summary: AblationSummary,
    pub cells: Vec<CellOutput>,
}

pub fn summarize_ablation(teacher_id: &str, grid: &[f64], records: &[ExperimentRecord]) -> AblationSummary {
    let rows: Vec<AblationRow> = grid
        .iter()
        .map(|&t| {
            let accs: Vec<f64> = records
                .iter()
                .filter(|r| r.t_cal == t)
                .map(|r| r.student_accuracy)
                .collect();
            AblationRow {
                t_cal: t,
                mean_student_accuracy: mean(&accs),
                std_student_accuracy: sample_std(&accs),
                runs: accs.len(),
            }
        })
        .collect();
    let pooled_std = (rows.iter().map(|r| r.std_student_accuracy.powi(2)).sum::<f64>()
        / rows.len() as f64)
        .sqrt();
    let baseline = rows.iter().find(|r| r.t_cal == 1.0).map(|r| r.mean_student_accuracy);
    let best = rows
        .iter()
        .filter(|r| r.t_cal > 1.0)
        .max_by(|a, b| a.mean_student_accuracy.total_cmp(&b.mean_student_accuracy));
    let (best_gain, best_t_cal) = match (baseline, best) {
        (Some(base), Some(b)) => (Some(b.mean_student_accuracy - base), Some(b.t_cal)),
        _ => (None, None),
    };
    AblationSummary {
        teacher_id: teacher_id.to_string(),
        rows,
        pooled_std,
        best_gain,
        best_t_cal,
    }
}

/// KD from one teacher at each calibration temperature of the grid.
#[allow(clippy::too_many_arguments)]
pub fn run_temperature_ablation(
    data: &Dataset,
    teacher: &TrainedTeacher,
    student: &StudentSpec,
    kd_base: &KdConfig,
    t_cal_grid: &[f64],
    seeds: &[u64],
    m_bins: usize,
    r_bins: usize,
) -> Result<TemperatureAblation> {
    let mut cells = Vec::new();
    for &t in t_cal_grid {
        let kd = kd_base.with_t_cal(t)?;
        for &seed in seeds {
            cells.push(KdCell {
                study: "ablation",
                teacher_id: teacher.id(),
                teacher: &teacher.model,
                calibrator: None,
                calibrator_label: "none".to_string(),
                kd,
                seed,
            });
        }
    }
    let outputs = run_cells(data, student, &cells, m_bins, r_bins)?;
    let records: Vec<ExperimentRecord> = outputs.iter().map(|o| o.record.clone()).collect();
    Ok(TemperatureAblation {
        summary: summarize_ablation(teacher.id(), t_cal_grid, &records),
        cells: outputs,
    })
}

/// Fits a calibrator on a validation split. Any other split is refused.
pub fn fit_on_validation(
    choice: CalibratorChoice,
    teacher: &MlpModel,
    val: &Split,
    fixed_t: Temperature,
    split_seed: Option<u64>,
) -> Result<Option<Calibrator>> {
    if val.tag != SplitTag::Val {
        return Err(Error::Config(format!(
            "calibrators are fitted on the validation split, got {}",
            val.tag
        )));
    }
    let logits = || -> Result<LogitMatrix> { teacher.forward(val.features.view()) };
    let fitted = match choice {
        CalibratorChoice::None | CalibratorChoice::MixupTeacher => return Ok(None),
        CalibratorChoice::FixedTemperature => Calibrator::FixedTemperature { t: fixed_t },
        CalibratorChoice::FittedTemperature => {
            calibrate::fit_temperature(&logits()?, &val.labels, TemperatureSearch::default())?
        }
        CalibratorChoice::VectorScaling => {
            calibrate::fit_vector_scaling(&logits()?, &val.labels, VectorScalingFit::default())?
        }
    };
    Ok(Some(match split_seed {
        Some(seed) => calibrate::with_split_seed(fitted, seed),
        None => fitted,
    }))
}

/// A calibrated variant of one teacher, ready for distillation.
#[derive(Debug, Clone)]
pub struct PreparedTeacher {
    pub teacher_id: String,
    pub choice: CalibratorChoice,
    pub model: MlpModel,
    pub calibrator: Option<Calibrator>,
    /// Uncalibrated NLL of the (possibly retrained) teacher on the test split.
    pub test_nll_raw: f64,
    /// NLL after calibration on the test split.
    pub test_nll_calibrated: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub teacher_id: String,
    pub calibrator: String,
    pub teacher_accuracy: f64,
    pub teacher_ace: f64,
    pub teacher_ece_over: f64,
    pub teacher_ece_under: f64,
    pub teacher_nll: f64,
    pub mean_student_accuracy: f64,
    pub std_student_accuracy: f64,
    pub mean_student_ace: f64,
    pub mean_student_ece_over: f64,
    pub mean_student_ece_under: f64,
}

#[derive(Debug, Clone)]
pub struct CalibratorComparison {
    pub rows: Vec<ComparisonRow>,
    pub prepared: Vec<PreparedTeacher>,
    pub cells: Vec<CellOutput>,
}

#[allow(clippy::too_many_arguments)]
pub fn prepare_teacher(
    data: &Dataset,
    teacher: &TrainedTeacher,
    choice: CalibratorChoice,
    fixed_t: Temperature,
    mixup_alpha: f64,
    split_seed: Option<u64>,
    m_bins: usize,
    r_bins: usize,
) -> Result<PreparedTeacher> {
    let model = if choice == CalibratorChoice::MixupTeacher {
        let mut entry = teacher.entry.clone();
        entry.train.mixup_alpha = mixup_alpha;
        train_teacher(data, &entry, m_bins, r_bins)?.model
    } else {
        teacher.model.clone()
    };
    let val = data.split(SplitTag::Val);
    let calibrator = fit_on_validation(choice, &model, &val, fixed_t, split_seed)?;
    let raw = teacher_view_report(&model, None, Temperature::ONE, data, m_bins, r_bins)?;
    let cal = teacher_view_report(&model, calibrator.as_ref(), Temperature::ONE, data, m_bins, r_bins)?;
    Ok(PreparedTeacher {
        teacher_id: teacher.id().to_string(),
        choice,
        model,
        calibrator,
        test_nll_raw: raw.nll,
        test_nll_calibrated: cal.nll,
    })
}

/// Distills each listed teacher under each calibrator for every seed.
///
/// Calibrators are fitted on the validation split; the calibration
/// temperature inside KD is held at 1 so that the calibrator alone decides
/// how the teacher is softened before the KD temperature.
#[allow(clippy::too_many_arguments)]
pub fn run_calibrator_comparison(
    data: &Dataset,
    teachers: &[&TrainedTeacher],
    choices: &[CalibratorChoice],
    student: &StudentSpec,
    kd: &KdConfig,
    seeds: &[u64],
    mixup_alpha: f64,
    split_seed: Option<u64>,
    m_bins: usize,
    r_bins: usize,
) -> Result<CalibratorComparison> {
    let jobs: Vec<(&TrainedTeacher, CalibratorChoice)> = teachers
        .iter()
        .flat_map(|&t| choices.iter().map(move |&c| (t, c)))
        .collect();
    let prepared: Vec<PreparedTeacher> = jobs
        .par_iter()
        .map(|(t, c)| prepare_teacher(data, t, *c, kd.t_cal, mixup_alpha, split_seed, m_bins, r_bins))
        .collect::<Result<_>>()?;

    let plain = kd.with_t_cal(1.0)?;
    let cells: Vec<KdCell<'_>> = prepared
        .iter()
        .flat_map(|p| {
            seeds.iter().map(move |&seed| KdCell {
                study: "calibrators",
                teacher_id: &p.teacher_id,
                teacher: &p.model,
                calibrator: p.calibrator.as_ref(),
                calibrator_label: p.choice.label().to_string(),
                kd: plain,
                seed,
            })
        })
        .collect();
    let outputs = run_cells(data, student, &cells, m_bins, r_bins)?;

    let rows = prepared
        .iter()
        .map(|p| {
            let recs: Vec<&ExperimentRecord> = outputs
                .iter()
                .map(|o| &o.record)
                .filter(|r| r.teacher_id == p.teacher_id && r.calibrator == p.choice.label())
                .collect();
            let col = |f: fn(&ExperimentRecord) -> f64| -> Vec<f64> { recs.iter().map(|r| f(r)).collect() };
            let first = recs[0];
            let accs = col(|r| r.student_accuracy);
            ComparisonRow {
                teacher_id: p.teacher_id.clone(),
                calibrator: p.choice.label().to_string(),
                teacher_accuracy: first.teacher_accuracy,
                teacher_ace: first.teacher_ace,
                teacher_ece_over: first.teacher_ece_over,
                teacher_ece_under: first.teacher_ece_under,
                teacher_nll: first.teacher_nll,
                mean_student_accuracy: mean(&accs),
                std_student_accuracy: sample_std(&accs),
                mean_student_ace: mean(&col(|r| r.student_ace)),
                mean_student_ece_over: mean(&col(|r| r.student_ece_over)),
                mean_student_ece_under: mean(&col(|r| r.student_ece_under)),
            }
        })
        .collect();
    Ok(CalibratorComparison {
        rows,
        prepared,
        cells: outputs,
    })
}
