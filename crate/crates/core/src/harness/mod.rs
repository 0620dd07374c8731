//! End-to-end experiments on the synthetic benchmark: teacher zoo,
//! correlation study, calibration-temperature ablation and calibrator
//! comparison, driven by a JSON [`Manifest`].
//!
//! Output directory layout written by [`run_manifest`]:
//!
//! ```text
//! manifest.json          copy of the manifest that was run
//! records.csv            one ExperimentRecord per distilled student
//! summary.json           correlations, ablation table, calibrator table
//! zoo.csv                uncalibrated test metrics of every teacher
//! ablation.csv           t_cal, mean/std student accuracy
//! calibrators.csv        per (teacher, calibrator) means over seeds
//! timings.csv            wall time per cell (not reproducible)
//! calibrators/*.json     fitted calibrators
//! checkpoints/teachers/  teacher checkpoints
//! checkpoints/students/  student checkpoints referenced from records.csv
//! ```
//!
//! Everything except `timings.csv` is byte-identical across reruns of the
//! same manifest on the same platform.

mod experiments;
mod manifest;
mod records;
mod synthetic;

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use experiments::*;
pub use manifest::*;
pub use records::*;
pub use synthetic::*;

use crate::data::{Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::CalibrationReport;
use crate::nn::Checkpoint;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "CALIKD_THREADS";

/// Thread pool sized by `CALIKD_THREADS`, or the available cores.
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a thread count")))?;
        if n > 0 {
            builder = builder.num_threads(n);
        }
    }
    builder.build().map_err(|e| Error::Config(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stages {
    pub correlation: bool,
    pub ablation: bool,
    pub comparison: bool,
}

impl Stages {
    pub const ALL: Stages = Stages {
        correlation: true,
        ablation: true,
        comparison: true,
    };
    pub const CORRELATION: Stages = Stages {
        correlation: true,
        ablation: false,
        comparison: false,
    };
    pub const ABLATION: Stages = Stages {
        correlation: false,
        ablation: true,
        comparison: false,
    };
    pub const COMPARISON: Stages = Stages {
        correlation: false,
        ablation: false,
        comparison: true,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZooRow {
    pub teacher_id: String,
    pub hidden: String,
    pub epochs: usize,
    pub weight_decay: f64,
    pub status: String,
    pub final_val_accuracy: Option<f64>,
    pub accuracy: Option<f64>,
    pub ace: Option<f64>,
    pub ece: Option<f64>,
    pub ece_over: Option<f64>,
    pub ece_under: Option<f64>,
    pub nll: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedCalibratorRow {
    pub teacher_id: String,
    pub calibrator: String,
    pub description: String,
    pub test_nll_raw: f64,
    pub test_nll_calibrated: f64,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub zoo: Vec<ZooRow>,
    pub correlation: Option<CorrelationSummary>,
    pub ablation: Option<AblationSummary>,
    pub calibrators: Option<Vec<ComparisonRow>>,
    pub fitted: Option<Vec<FittedCalibratorRow>>,
    pub record_count: usize,
}

/// Wall-clock seconds per stage of one [`run_manifest`] call.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimes {
    pub zoo: f64,
    pub correlation: f64,
    pub ablation: f64,
    pub comparison: f64,
}

/// Result of [`run_manifest`], with the trained teachers for further use.
pub struct RunOutput {
    pub summary: RunSummary,
    pub records: Vec<ExperimentRecord>,
    pub dataset: Dataset,
    pub teachers: Vec<TrainedTeacher>,
    pub times: StageTimes,
}

fn zoo_row(member: &ZooMember) -> ZooRow {
    let hidden = member
        .entry
        .hidden
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("x");
    let base = ZooRow {
        teacher_id: member.entry.id.clone(),
        hidden,
        epochs: member.entry.train.epochs,
        weight_decay: member.entry.train.weight_decay,
        status: "ok".into(),
        final_val_accuracy: None,
        accuracy: None,
        ace: None,
        ece: None,
        ece_over: None,
        ece_under: None,
        nll: None,
    };
    match &member.outcome {
        Ok(t) => ZooRow {
            final_val_accuracy: t.log.final_val_accuracy(),
            accuracy: Some(t.report.accuracy),
            ace: Some(t.report.ace),
            ece: Some(t.report.ece),
            ece_over: Some(t.report.ece_over),
            ece_under: Some(t.report.ece_under),
            nll: Some(t.report.nll),
            ..base
        },
        Err(e) => ZooRow {
            status: format!("failed: {e}"),
            ..base
        },
    }
}

fn save_student(out_dir: &Path, cell: &CellOutput) -> Result<()> {
    let ck = Checkpoint::from_model(
        &cell.student,
        None,
        Some(cell.record.seed),
        cell.student_log.final_val_accuracy(),
    );
    ck.save(out_dir.join(&cell.record.student_checkpoint))
}

/// Runs the selected stages of a manifest and writes every output file.
pub fn run_manifest(manifest: &Manifest, out_dir: &Path, stages: Stages) -> Result<RunOutput> {
    manifest.validate()?;
    let pool = worker_pool()?;
    pool.install(|| run_manifest_inner(manifest, out_dir, stages))
}

fn run_manifest_inner(manifest: &Manifest, out_dir: &Path, stages: Stages) -> Result<RunOutput> {
    let (m, r) = (manifest.m_bins, manifest.r_bins);
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    io::write_json(out_dir.join("manifest.json"), manifest)?;

    let mut times = StageTimes::default();
    let clock = Instant::now();
    let data = gen_dataset(&manifest.dataset)?;
    let members = run_teacher_zoo(&data, &manifest.zoo, m, r);
    let zoo_rows: Vec<ZooRow> = members.iter().map(zoo_row).collect();
    write_csv(out_dir.join("zoo.csv"), &zoo_rows)?;
    let teachers: Vec<TrainedTeacher> = members.into_iter().filter_map(|z| z.outcome.ok()).collect();
    for t in &teachers {
        Checkpoint::from_model(
            &t.model,
            Some(&t.entry.train),
            Some(t.entry.init_seed),
            t.log.final_val_accuracy(),
        )
        .save(out_dir.join(format!("checkpoints/teachers/{}.json", t.id())))?;
    }
    times.zoo = clock.elapsed().as_secs_f64();
    let find = |id: &str| -> Result<&TrainedTeacher> {
        teachers
            .iter()
            .find(|t| t.id() == id)
            .ok_or_else(|| Error::numerical("zoo", format!("teacher {id} failed to train")))
    };

    let mut records = Vec::new();
    let mut timings = Vec::new();
    let mut summary = RunSummary {
        zoo: zoo_rows,
        correlation: None,
        ablation: None,
        calibrators: None,
        fitted: None,
        record_count: 0,
    };

    if stages.correlation {
        let clock = Instant::now();
        let study = run_correlation_study(&data, &teachers, &manifest.student, &manifest.kd, &manifest.seeds, m, r)?;
        for c in &study.cells {
            save_student(out_dir, c)?;
            records.push(c.record.clone());
            timings.push(c.timing.clone());
        }
        summary.correlation = Some(study.summary);
        times.correlation = clock.elapsed().as_secs_f64();
    }

    if let (true, Some(spec)) = (stages.ablation, &manifest.ablation) {
        let clock = Instant::now();
        let teacher = match &spec.teacher {
            Some(id) => find(id)?,
            None => teachers
                .iter()
                .max_by(|a, b| a.report.accuracy.total_cmp(&b.report.accuracy))
                .ok_or_else(|| Error::numerical("zoo", "no teacher trained"))?,
        };
        let ablation =
            run_temperature_ablation(&data, teacher, &manifest.student, &manifest.kd, &spec.t_cal_grid, &spec.seeds, m, r)?;
        for c in &ablation.cells {
            save_student(out_dir, c)?;
            records.push(c.record.clone());
            timings.push(c.timing.clone());
        }
        write_csv(out_dir.join("ablation.csv"), &ablation.summary.rows)?;
        summary.ablation = Some(ablation.summary);
        times.ablation = clock.elapsed().as_secs_f64();
    }

    if let (true, Some(spec)) = (stages.comparison, &manifest.comparison) {
        let clock = Instant::now();
        let subset: Vec<&TrainedTeacher> = spec.teachers.iter().map(|id| find(id)).collect::<Result<_>>()?;
        let cmp = run_calibrator_comparison(
            &data,
            &subset,
            &spec.calibrators,
            &manifest.student,
            &manifest.kd,
            &manifest.seeds,
            spec.mixup_alpha,
            Some(manifest.dataset.seed),
            m,
            r,
        )?;
        for c in &cmp.cells {
            save_student(out_dir, c)?;
            records.push(c.record.clone());
            timings.push(c.timing.clone());
        }
        let mut fitted = Vec::new();
        for p in &cmp.prepared {
            if let Some(c) = &p.calibrator {
                io::write_json(
                    out_dir.join(format!("calibrators/{}__{}.json", p.teacher_id, p.choice.label())),
                    c,
                )?;
            }
            fitted.push(FittedCalibratorRow {
                teacher_id: p.teacher_id.clone(),
                calibrator: p.choice.label().to_string(),
                description: p
                    .calibrator
                    .as_ref()
                    .map_or_else(|| p.choice.label().to_string(), |c| c.describe()),
                test_nll_raw: p.test_nll_raw,
                test_nll_calibrated: p.test_nll_calibrated,
            });
        }
        write_csv(out_dir.join("calibrators.csv"), &cmp.rows)?;
        summary.calibrators = Some(cmp.rows);
        summary.fitted = Some(fitted);
        times.comparison = clock.elapsed().as_secs_f64();
    }

    summary.record_count = records.len();
    write_csv(out_dir.join("records.csv"), &records)?;
    write_csv(out_dir.join("timings.csv"), &timings)?;
    io::write_json(out_dir.join("summary.json"), &summary)?;
    Ok(RunOutput {
        summary,
        records,
        dataset: data,
        teachers,
        times,
    })
}

/// Largest absolute difference between stored student metrics and a fresh
/// evaluation of each persisted student checkpoint on the test split.
pub fn verify_records(out_dir: &Path, data: &Dataset) -> Result<f64> {
    let manifest: Manifest = io::read_json(out_dir.join("manifest.json"))?;
    let records = read_records(out_dir.join("records.csv"))?;
    let mut worst: f64 = 0.0;
    for rec in &records {
        let model = Checkpoint::load(out_dir.join(&rec.student_checkpoint))?.to_model()?;
        let report: CalibrationReport =
            crate::distill::evaluate(&model, data, SplitTag::Test, manifest.m_bins, manifest.r_bins)?;
        for (a, b) in [
            (rec.student_accuracy, report.accuracy),
            (rec.student_ace, report.ace),
            (rec.student_ece, report.ece),
            (rec.student_ece_over, report.ece_over),
            (rec.student_ece_under, report.ece_under),
            (rec.student_nll, report.nll),
        ] {
            worst = worst.max((a - b).abs());
        }
    }
    Ok(worst)
}

/// Human-readable tables from an output directory's `summary.json`.
pub fn render_report(out_dir: &Path) -> Result<String> {
    let summary: RunSummary = io::read_json(out_dir.join("summary.json"))?;
    let mut s = String::new();
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));

    s.push_str("Teacher zoo (test split, uncalibrated)\n");
    s.push_str(&format!(
        "{:<28} {:>8} {:>8} {:>8} {:>8} {:>8}\n",
        "teacher", "acc", "ace", "ece", "ece_o", "ece_u"
    ));
    for z in &summary.zoo {
        s.push_str(&format!(
            "{:<28} {:>8} {:>8} {:>8} {:>8} {:>8}{}\n",
            z.teacher_id,
            opt(z.accuracy),
            opt(z.ace),
            opt(z.ece),
            opt(z.ece_over),
            opt(z.ece_under),
            if z.status == "ok" { String::new() } else { format!("  [{}]", z.status) }
        ));
    }

    if let Some(c) = &summary.correlation {
        s.push_str("\nCorrelation with mean student accuracy\n");
        s.push_str(&format!("  R^2 (teacher accuracy): {}\n", opt(c.r2_acc)));
        s.push_str(&format!("  R^2 (teacher ACE):      {}\n", opt(c.r2_ace)));
        s.push_str(&format!("  Spearman (teacher ACE): {}\n", opt(c.spearman_ace)));
        for n in &c.notes {
            s.push_str(&format!("  note: {n}\n"));
        }
    }

    if let Some(a) = &summary.ablation {
        s.push_str(&format!("\nCalibration temperature ablation (teacher {})\n", a.teacher_id));
        s.push_str(&format!("{:>8} {:>10} {:>10} {:>6}\n", "t_cal", "mean_acc", "std", "runs"));
        for r in &a.rows {
            s.push_str(&format!(
                "{:>8} {:>10.4} {:>10.4} {:>6}\n",
                r.t_cal, r.mean_student_accuracy, r.std_student_accuracy, r.runs
            ));
        }
        s.push_str(&format!(
            "  best gain over t_cal=1: {} at t_cal={} (pooled seed std {:.4})\n",
            opt(a.best_gain),
            opt(a.best_t_cal),
            a.pooled_std
        ));
    }

    if let Some(rows) = &summary.calibrators {
        s.push_str("\nCalibrator comparison (teacher metrics after calibration; student means over seeds)\n");
        s.push_str(&format!(
            "{:<26} {:<20} {:>8} {:>8} {:>8} {:>9} {:>9} {:>9}\n",
            "teacher", "calibrator", "t_ece_o", "t_ece_u", "t_ace", "s_acc", "s_ece_o", "s_ace"
        ));
        for r in rows {
            s.push_str(&format!(
                "{:<26} {:<20} {:>8.4} {:>8.4} {:>8.4} {:>9.4} {:>9.4} {:>9.4}\n",
                r.teacher_id,
                r.calibrator,
                r.teacher_ece_over,
                r.teacher_ece_under,
                r.teacher_ace,
                r.mean_student_accuracy,
                r.mean_student_ece_over,
                r.mean_student_ace
            ));
        }
    }
    s.push_str(&format!("\n{} experiment records\n", summary.record_count));
    Ok(s)
}
