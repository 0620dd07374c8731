use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::CalibrationReport;

/// One distilled student and the teacher it learned from, both measured on
/// the test split.
///
/// Teacher metrics describe the teacher as the student saw it: after the
/// calibrator and the calibration temperature, before the KD temperature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub study: String,
    pub teacher_id: String,
    pub calibrator: String,
    pub t_cal: f64,
    pub seed: u64,
    pub teacher_accuracy: f64,
    pub teacher_ace: f64,
    pub teacher_ece: f64,
    pub teacher_ece_over: f64,
    pub teacher_ece_under: f64,
    pub teacher_nll: f64,
    pub student_accuracy: f64,
    pub student_ace: f64,
    pub student_ece: f64,
    pub student_ece_over: f64,
    pub student_ece_under: f64,
    pub student_nll: f64,
    /// Path of the student checkpoint, relative to the output directory.
    pub student_checkpoint: String,
}

/// Column order of `records.csv`.
pub const RECORD_COLUMNS: [&str; 18] = [
    "study",
    "teacher_id",
    "calibrator",
    "t_cal",
    "seed",
    "teacher_accuracy",
    "teacher_ace",
    "teacher_ece",
    "teacher_ece_over",
    "teacher_ece_under",
    "teacher_nll",
    "student_accuracy",
    "student_ace",
    "student_ece",
    "student_ece_over",
    "student_ece_under",
    "student_nll",
    "student_checkpoint",
];

impl ExperimentRecord {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        study: &str,
        teacher_id: &str,
        calibrator: &str,
        t_cal: f64,
        seed: u64,
        teacher: &CalibrationReport,
        student: &CalibrationReport,
        student_checkpoint: String,
    ) -> Self {
        Self {
            study: study.to_string(),
            teacher_id: teacher_id.to_string(),
            calibrator: calibrator.to_string(),
            t_cal,
            seed,
            teacher_accuracy: teacher.accuracy,
            teacher_ace: teacher.ace,
            teacher_ece: teacher.ece,
            teacher_ece_over: teacher.ece_over,
            teacher_ece_under: teacher.ece_under,
            teacher_nll: teacher.nll,
            student_accuracy: student.accuracy,
            student_ace: student.ace,
            student_ece: student.ece,
            student_ece_over: student.ece_over,
            student_ece_under: student.ece_under,
            student_nll: student.nll,
            student_checkpoint,
        }
    }

    /// True when the student metrics equal `report` within `tol`.
    pub fn student_matches(&self, report: &CalibrationReport, tol: f64) -> bool {
        [
            (self.student_accuracy, report.accuracy),
            (self.student_ace, report.ace),
            (self.student_ece, report.ece),
            (self.student_ece_over, report.ece_over),
            (self.student_ece_under, report.ece_under),
            (self.student_nll, report.nll),
        ]
        .iter()
        .all(|(a, b)| (a - b).abs() <= tol)
    }
}

/// Wall-clock cost of one cell. Kept out of `records.csv`, which must be
/// byte-identical across reruns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellTiming {
    pub study: String,
    pub teacher_id: String,
    pub calibrator: String,
    pub t_cal: f64,
    pub seed: u64,
    pub wall_time_s: f64,
}

pub fn write_csv<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: impl AsRef<Path>) -> Result<Vec<ExperimentRecord>> {
    let mut r = csv::Reader::from_path(path.as_ref())?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
