//! `calikd` command-line tool.
//!
//! Exit codes: 0 success, 1 usage error, 2 numerical or runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use calikd::calibrate::{nll_at_temperature, VectorScalingFit};
use calikd::harness::{
    self, gen_dataset, render_report, run_manifest, scaled_decay, train_teacher, verify_records, zoo_id,
    Manifest, Stages, SyntheticSpec, ZooEntry,
};
use calikd::io::{read_json, read_labels_csv, read_logits_csv, write_json, write_labels_csv, write_matrix_csv};
use calikd::nn::init_model;
use calikd::{
    distill, fit_temperature, fit_vector_scaling, full_report, tempered_softmax, Calibrator, Checkpoint, Dataset,
    KdConfig, SplitTag, Temperature, TemperatureSearch, TrainConfig, DEFAULT_ACE_BINS,
    DEFAULT_CALIBRATION_TEMPERATURE, DEFAULT_ECE_BINS, DEFAULT_KD_TEMPERATURE, DEFAULT_LAMBDA,
};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "calikd", version, about = "Calibration metrics, teacher calibrators and calibrated-teacher KD")]
#[command(after_help = "Environment:\n  CALIKD_THREADS  cap on worker threads (default: available cores)")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic Gaussian-cluster dataset.
    GenData(GenData),
    /// Train one teacher MLP with hard-label cross-entropy.
    TrainTeacher(TrainTeacher),
    /// Build a calibrator from validation logits and labels.
    Calibrate(Calibrate),
    /// Compute ECE, ECE_o, ECE_u, ACE, accuracy and NLL; writes report.json.
    EvalCalibration(EvalCalibration),
    /// Distill a student from a (optionally calibrated) teacher.
    Distill(Distill),
    /// Teacher zoo + plain KD; correlates teacher ACE and accuracy with student accuracy.
    SweepCorrelation(Sweep),
    /// Calibration-temperature ablation on one teacher.
    SweepTemperature(Sweep),
    /// Compare calibrators on the manifest's comparison teachers.
    SweepCalibrators(Sweep),
    /// Print the tables of a finished sweep directory.
    Report(Report),
}

#[derive(Args, Debug)]
struct Bins {
    /// Equal-width bins for ECE.
    #[arg(long, default_value_t = DEFAULT_ECE_BINS)]
    m_bins: usize,
    /// Equal-count bins per class for ACE.
    #[arg(long, default_value_t = DEFAULT_ACE_BINS)]
    r_bins: usize,
}

#[derive(Args, Debug)]
struct GenData {
    /// Output dataset file (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Take the dataset spec from a manifest instead of the flags below.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 5000)]
    n_train: usize,
    #[arg(long, default_value_t = 1000)]
    n_val: usize,
    #[arg(long, default_value_t = 2000)]
    n_test: usize,
    /// Feature dimension.
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Number of classes.
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 3.5)]
    class_separation: f64,
    /// Fraction of training labels flipped to another class.
    #[arg(long, default_value_t = 0.0)]
    label_noise: f64,
    /// Also write headerless CSVs (features and labels per split) to this directory.
    #[arg(long)]
    csv_dir: Option<PathBuf>,
}

macro_rules! recipe {
    ($name:ident, $hidden:literal, $epochs:literal) => {
        #[derive(Args, Debug, Clone)]
        struct $name {
            /// Hidden layer widths, comma separated.
            #[arg(long, value_delimiter = ',', default_value = $hidden)]
            hidden: Vec<usize>,
            /// Learning rate drops 10x at 35/60 and 50/60 of the run.
            #[arg(long, default_value_t = $epochs)]
            epochs: usize,
            #[arg(long, default_value_t = 64)]
            batch_size: usize,
            #[arg(long, default_value_t = 0.1)]
            lr: f64,
            #[arg(long, default_value_t = 0.9)]
            momentum: f64,
            #[arg(long, default_value_t = 5e-5)]
            weight_decay: f64,
            /// Seed for initialization and batch order.
            #[arg(long, default_value_t = 0)]
            seed: u64,
        }

        impl $name {
            fn train_config(&self, mixup_alpha: f64) -> TrainConfig {
                TrainConfig {
                    epochs: self.epochs,
                    batch_size: self.batch_size,
                    lr0: self.lr,
                    lr_decay_epochs: scaled_decay(self.epochs),
                    lr_decay_factor: 0.1,
                    momentum: self.momentum,
                    weight_decay: self.weight_decay,
                    seed: self.seed,
                    mixup_alpha,
                }
            }
        }
    };
}

recipe!(TeacherRecipe, "128,128", 40);
recipe!(StudentRecipe, "24", 60);

#[derive(Args, Debug)]
struct TrainTeacher {
    /// Dataset file written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output checkpoint (JSON).
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    recipe: TeacherRecipe,
    /// Mixup Beta parameter; 0 disables mixup.
    #[arg(long, default_value_t = 0.0)]
    mixup_alpha: f64,
    /// Write val/test logits and labels as headerless CSV to this directory.
    #[arg(long)]
    logits_dir: Option<PathBuf>,
    #[command(flatten)]
    bins: Bins,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    Fixed,
    FitTemperature,
    VectorScaling,
}

#[derive(Args, Debug)]
struct Calibrate {
    #[arg(long, value_enum)]
    mode: Mode,
    /// Validation logits (headerless CSV).
    #[arg(long)]
    logits: PathBuf,
    /// Validation labels (headerless CSV, one integer per row).
    #[arg(long)]
    labels: PathBuf,
    /// Temperature for `--mode fixed`.
    #[arg(long, default_value_t = DEFAULT_CALIBRATION_TEMPERATURE)]
    temperature: f64,
    /// Output calibrator (JSON).
    #[arg(long)]
    out: PathBuf,
    /// Recorded in the fit metadata.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct EvalCalibration {
    #[arg(long)]
    logits: PathBuf,
    #[arg(long)]
    labels: PathBuf,
    #[command(flatten)]
    bins: Bins,
    /// Apply this calibrator (from `calibrate`) before evaluating.
    #[arg(long)]
    calibrator: Option<PathBuf>,
    /// Output report.
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Distill {
    #[arg(long)]
    data: PathBuf,
    /// Teacher checkpoint.
    #[arg(long)]
    teacher: PathBuf,
    /// Calibrator JSON applied to the teacher logits. When given, the calibration temperature is 1.
    #[arg(long, conflicts_with = "t_cal")]
    calibrator: Option<PathBuf>,
    /// Output student checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Student test report (JSON).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    /// KD temperature, shared by teacher and student.
    #[arg(long, default_value_t = DEFAULT_KD_TEMPERATURE)]
    t_kd: f64,
    /// Calibration temperature applied to the teacher only.
    #[arg(long, default_value_t = DEFAULT_CALIBRATION_TEMPERATURE)]
    t_cal: f64,
    /// Do not multiply the KD term by t_kd squared.
    #[arg(long)]
    no_t_squared: bool,
    #[command(flatten)]
    recipe: StudentRecipe,
    #[command(flatten)]
    bins: Bins,
}

#[derive(Args, Debug)]
struct Sweep {
    /// Experiment manifest (JSON). The built-in default benchmark when absent.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the dataset seed of the manifest.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the experiment seeds, comma separated.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
}

#[derive(Args, Debug)]
struct Report {
    /// Output directory of a sweep.
    #[arg(long, required_unless_present = "default_manifest")]
    dir: Option<PathBuf>,
    /// Re-evaluate every student checkpoint and compare with records.csv.
    #[arg(long)]
    verify: bool,
    /// Print the default benchmark manifest and exit.
    #[arg(long, conflicts_with = "dir")]
    default_manifest: bool,
}

enum Failure {
    Usage(String),
    Runtime { stage: &'static str, message: String },
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

trait Stage<T> {
    fn stage(self, stage: &'static str) -> Outcome<T>;
}

impl<T> Stage<T> for calikd::Result<T> {
    fn stage(self, stage: &'static str) -> Outcome<T> {
        self.map_err(|e| Failure::Runtime {
            stage,
            message: e.to_string(),
        })
    }
}

fn input(flag: &str, path: &Path) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("--{flag}: no such file {}", path.display())))
    }
}

/// Refuses outputs that would overwrite one of the inputs.
fn distinct(out: &Path, inputs: &[&Path]) -> Outcome {
    let canon = |p: &Path| std::fs::canonicalize(p).ok();
    match canon(out) {
        Some(o) if inputs.iter().any(|i| canon(i).as_ref() == Some(&o)) => Err(Failure::Usage(format!(
            "output {} would overwrite an input file",
            out.display()
        ))),
        _ => Ok(()),
    }
}

fn load_dataset(path: &Path) -> Outcome<Dataset> {
    input("data", path)?;
    read_json(path).stage("reading dataset")
}

fn gen_data(a: GenData) -> Outcome {
    let spec = match &a.manifest {
        Some(p) => {
            input("manifest", p)?;
            distinct(&a.out, &[p])?;
            read_json::<Manifest>(p).stage("reading manifest")?.dataset
        }
        None => SyntheticSpec {
            n_train: a.n_train,
            n_val: a.n_val,
            n_test: a.n_test,
            d: a.dim,
            k: a.classes,
            class_separation: a.class_separation,
            label_noise: a.label_noise,
            seed: a.seed,
        },
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let data = gen_dataset(&spec).stage("generating data")?;
    write_json(&a.out, &data).stage("writing dataset")?;
    if let Some(dir) = &a.csv_dir {
        for tag in [SplitTag::Train, SplitTag::Val, SplitTag::Test] {
            let split = data.split(tag);
            write_matrix_csv(dir.join(format!("{tag}_features.csv")), &split.features).stage("writing csv")?;
            write_labels_csv(dir.join(format!("{tag}_labels.csv")), split.labels.as_slice()).stage("writing csv")?;
        }
    }
    println!(
        "{} rows ({} train, {} val, {} test), d = {}, k = {} -> {}",
        data.len(),
        spec.n_train,
        spec.n_val,
        spec.n_test,
        spec.d,
        spec.k,
        a.out.display()
    );
    Ok(())
}

fn print_report(label: &str, r: &calikd::CalibrationReport) {
    println!(
        "{label}: acc {:.4}  ece {:.4}  ece_o {:.4}  ece_u {:.4}  ace {:.4}  nll {:.4}  (n = {})",
        r.accuracy, r.ece, r.ece_over, r.ece_under, r.ace, r.nll, r.n
    );
}

fn train_teacher_cmd(a: TrainTeacher) -> Outcome {
    let data = load_dataset(&a.data)?;
    distinct(&a.out, &[&a.data])?;
    let train = a.recipe.train_config(a.mixup_alpha);
    train.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let entry = ZooEntry {
        id: zoo_id(&a.recipe.hidden, a.recipe.epochs, a.recipe.weight_decay, a.mixup_alpha),
        hidden: a.recipe.hidden.clone(),
        init_seed: a.recipe.seed,
        train,
    };
    let t = train_teacher(&data, &entry, a.bins.m_bins, a.bins.r_bins).stage("teacher training")?;
    Checkpoint::from_model(&t.model, Some(&entry.train), Some(entry.init_seed), t.log.final_val_accuracy())
        .save(&a.out)
        .stage("writing checkpoint")?;
    if let Some(dir) = &a.logits_dir {
        for tag in [SplitTag::Val, SplitTag::Test] {
            let split = data.split(tag);
            let logits = t.model.forward(split.features.view()).stage("forward pass")?;
            write_matrix_csv(dir.join(format!("{tag}_logits.csv")), &logits.into_inner()).stage("writing logits")?;
            write_labels_csv(dir.join(format!("{tag}_labels.csv")), split.labels.as_slice())
                .stage("writing labels")?;
        }
    }
    print_report(&format!("{} test", entry.id), &t.report);
    println!("checkpoint -> {}", a.out.display());
    Ok(())
}

fn read_pair(logits: &Path, labels: &Path) -> Outcome<(calikd::LogitMatrix, calikd::LabelVec)> {
    input("logits", logits)?;
    input("labels", labels)?;
    let z = read_logits_csv(logits).stage("reading logits")?;
    let y = read_labels_csv(labels, z.k()).stage("reading labels")?;
    y.check_pairs_with(z.n(), z.k()).stage("reading labels")?;
    Ok((z, y))
}

fn calibrate_cmd(a: Calibrate) -> Outcome {
    let (z, y) = read_pair(&a.logits, &a.labels)?;
    distinct(&a.out, &[&a.logits, &a.labels])?;
    let cal = match a.mode {
        Mode::Fixed => Calibrator::fixed(a.temperature).map_err(|e| Failure::Usage(format!("--temperature: {e}")))?,
        Mode::FitTemperature => fit_temperature(&z, &y, TemperatureSearch::default()).stage("temperature fit")?,
        Mode::VectorScaling => fit_vector_scaling(&z, &y, VectorScalingFit::default()).stage("vector scaling fit")?,
    };
    let cal = match a.seed {
        Some(s) => calikd::calibrate::with_split_seed(cal, s),
        None => cal,
    };
    let before = nll_at_temperature(&z, &y, 1.0);
    let after = calikd::nll(&cal.apply(&z).stage("applying calibrator")?, &y).stage("nll")?;
    write_json(&a.out, &cal).stage("writing calibrator")?;
    println!("{}: nll_before {before:.6}  nll_after {after:.6}", cal.describe());
    if let Some(meta) = cal.fit_metadata() {
        for w in &meta.warnings {
            println!("warning: {w}");
        }
    }
    println!("calibrator -> {}", a.out.display());
    Ok(())
}

fn eval_calibration(a: EvalCalibration) -> Outcome {
    let (z, y) = read_pair(&a.logits, &a.labels)?;
    let mut inputs = vec![a.logits.as_path(), a.labels.as_path()];
    let probs = match &a.calibrator {
        Some(p) => {
            input("calibrator", p)?;
            inputs.push(p);
            let c: Calibrator = read_json(p).stage("reading calibrator")?;
            c.apply(&z).stage("applying calibrator")?
        }
        None => tempered_softmax(&z, Temperature::ONE),
    };
    distinct(&a.out, &inputs)?;
    let report = full_report(&probs, &y, a.bins.m_bins, a.bins.r_bins)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    write_json(&a.out, &report).stage("writing report")?;
    print_report("report", &report);
    println!("report -> {}", a.out.display());
    Ok(())
}

fn distill_cmd(a: Distill) -> Outcome {
    let data = load_dataset(&a.data)?;
    input("teacher", &a.teacher)?;
    let mut inputs = vec![a.data.as_path(), a.teacher.as_path()];
    let teacher = Checkpoint::load(&a.teacher)
        .and_then(|c| c.to_model())
        .stage("reading teacher")?;
    let calibrator: Option<Calibrator> = match &a.calibrator {
        Some(p) => {
            input("calibrator", p)?;
            inputs.push(p);
            Some(read_json(p).stage("reading calibrator")?)
        }
        None => None,
    };
    distinct(&a.out, &inputs)?;
    if let Some(r) = &a.report {
        distinct(r, &inputs)?;
    }
    let temp = |flag: &str, t: f64| Temperature::new(t).map_err(|e| Failure::Usage(format!("--{flag}: {e}")));
    let kd = KdConfig {
        lambda: a.lambda,
        t_kd: temp("t-kd", a.t_kd)?,
        t_cal: if calibrator.is_some() { Temperature::ONE } else { temp("t-cal", a.t_cal)? },
        scale_kd_by_t_squared: !a.no_t_squared,
    };
    kd.validate().map_err(|e| Failure::Usage(format!("--lambda: {e}")))?;
    let train = a.recipe.train_config(0.0);
    train.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let init = init_model(&harness::layer_dims(&data, &a.recipe.hidden), a.recipe.seed).stage("student init")?;
    let out = distill::distill_student(
        init,
        &teacher,
        calibrator.as_ref(),
        &data,
        &train,
        &kd,
        a.bins.m_bins,
        a.bins.r_bins,
    )
    .stage("distillation")?;
    Checkpoint::from_model(&out.student, Some(&train), Some(a.recipe.seed), out.log.final_val_accuracy())
        .save(&a.out)
        .stage("writing checkpoint")?;
    if let Some(r) = &a.report {
        write_json(r, &out.test_report).stage("writing report")?;
    }
    print_report("student test", &out.test_report);
    println!("checkpoint -> {}", a.out.display());
    Ok(())
}

fn sweep(a: Sweep, stages: Stages) -> Outcome {
    let mut manifest = match &a.manifest {
        Some(p) => {
            input("manifest", p)?;
            read_json::<Manifest>(p).stage("reading manifest")?
        }
        None => Manifest::default_benchmark(),
    };
    if let Some(s) = a.seed {
        manifest.dataset.seed = s;
    }
    if let Some(seeds) = a.seeds {
        manifest.seeds = seeds;
    }
    manifest.validate().map_err(|e| Failure::Usage(format!("--manifest: {e}")))?;
    if stages.ablation && manifest.ablation.is_none() {
        return Err(Failure::Usage("--manifest: no \"ablation\" section".into()));
    }
    if stages.comparison && manifest.comparison.is_none() {
        return Err(Failure::Usage("--manifest: no \"comparison\" section".into()));
    }
    if let Some(p) = &a.manifest {
        if std::fs::canonicalize(p).ok() == std::fs::canonicalize(a.out.join("manifest.json")).ok() {
            return Err(Failure::Usage("--out: would overwrite the input manifest".into()));
        }
    }
    let out = run_manifest(&manifest, &a.out, stages).stage("sweep")?;
    println!("{}", render_report(&a.out).stage("report")?);
    println!("{} records -> {}", out.records.len(), a.out.join("records.csv").display());
    Ok(())
}

fn report(a: Report) -> Outcome {
    if a.default_manifest {
        let text = serde_json::to_string_pretty(&Manifest::default_benchmark()).expect("manifest serializes");
        println!("{text}");
        return Ok(());
    }
    let dir = a.dir.expect("required unless --default-manifest");
    input("dir", &dir.join("summary.json"))?;
    println!("{}", render_report(&dir).stage("report")?);
    if a.verify {
        let manifest: Manifest = read_json(dir.join("manifest.json")).stage("reading manifest")?;
        let data = gen_dataset(&manifest.dataset).stage("generating data")?;
        let worst = verify_records(&dir, &data).stage("verifying records")?;
        println!("max |stored - recomputed| over student metrics: {worst:.3e}");
        if worst > 1e-9 {
            return Err(Failure::Runtime {
                stage: "verifying records",
                message: format!("records disagree with checkpoints by {worst:e}"),
            });
        }
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Outcome {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::TrainTeacher(a) => train_teacher_cmd(a),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::EvalCalibration(a) => eval_calibration(a),
        Command::Distill(a) => distill_cmd(a),
        Command::SweepCorrelation(a) => sweep(a, Stages::CORRELATION),
        Command::SweepTemperature(a) => sweep(a, Stages::ABLATION),
        Command::SweepCalibrators(a) => sweep(a, Stages::COMPARISON),
        Command::Report(a) => report(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let pool = match harness::worker_pool() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| dispatch(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime { stage, message }) => {
            eprintln!("error in stage {stage}: {message}");
            ExitCode::from(2)
        }
    }
}
