use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use calikd::harness::{AblationSpec, CalibratorChoice, ComparisonSpec, Manifest, StudentSpec, SyntheticSpec, ZooEntry};
use calikd::{full_report, tempered_softmax, KdConfig, LabelVec, LogitMatrix, Temperature, TrainConfig};
use serde_json::Value;

fn calikd(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_calikd"))
        .args(args)
        .current_dir(cwd)
        .env_remove("CALIKD_THREADS")
        .output()
        .expect("spawn calikd")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn ok(out: Output) -> Output {
    assert_eq!(code(&out), 0, "stderr: {}", stderr(&out));
    out
}

fn write_csv(path: &Path, rows: &[Vec<f64>]) {
    let text: String = rows
        .iter()
        .map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",") + "\n")
        .collect();
    fs::write(path, text).unwrap();
}

fn write_labels(path: &Path, y: &[usize]) {
    fs::write(path, y.iter().map(|v| format!("{v}\n")).collect::<String>()).unwrap();
}

/// Deterministic 3-class logits where the label agrees with the argmax
/// about two thirds of the time, scaled up to be overconfident.
fn overconfident(n: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let top = i % 3;
        let mut row = vec![0.0; 3];
        row[top] = 8.0;
        row[(top + 1) % 3] = 2.0 + (i % 7) as f64 * 0.3;
        rows.push(row);
        labels.push(if i % 3 == 0 { (top + 1) % 3 } else { top });
    }
    (rows, labels)
}

fn tiny_manifest() -> Manifest {
    let recipe = |epochs, seed| TrainConfig {
        epochs,
        batch_size: 32,
        lr0: 0.05,
        lr_decay_epochs: vec![],
        seed,
        ..TrainConfig::default()
    };
    Manifest {
        dataset: SyntheticSpec {
            n_train: 300,
            n_val: 100,
            n_test: 200,
            d: 5,
            k: 3,
            class_separation: 2.5,
            label_noise: 0.0,
            seed: 9,
        },
        zoo: vec![
            ZooEntry { id: "a".into(), hidden: vec![8], train: recipe(2, 1), init_seed: 1 },
            ZooEntry { id: "b".into(), hidden: vec![16], train: recipe(6, 2), init_seed: 2 },
            ZooEntry { id: "c".into(), hidden: vec![12, 12], train: recipe(6, 3), init_seed: 3 },
        ],
        student: StudentSpec { hidden: vec![4], train: recipe(2, 0) },
        kd: KdConfig::default(),
        seeds: vec![1, 2],
        m_bins: 10,
        r_bins: 10,
        ablation: Some(AblationSpec { teacher: None, t_cal_grid: vec![1.0, 2.0], seeds: vec![1] }),
        comparison: Some(ComparisonSpec {
            teachers: vec!["b".into()],
            calibrators: vec![CalibratorChoice::None, CalibratorChoice::FittedTemperature],
            mixup_alpha: 0.2,
        }),
    }
}

#[test]
fn help_shows_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let top = stdout(&ok(calikd(&["--help"], dir.path())));
    for sub in [
        "gen-data",
        "train-teacher",
        "calibrate",
        "eval-calibration",
        "distill",
        "sweep-correlation",
        "sweep-temperature",
        "sweep-calibrators",
        "report",
    ] {
        assert!(top.contains(sub), "{sub} missing from help");
    }
    assert!(top.contains("CALIKD_THREADS"));
    let distill = stdout(&ok(calikd(&["distill", "--help"], dir.path())));
    assert!(distill.contains("--t-cal <T_CAL>") && distill.contains("[default: 1.5]"));
    assert!(distill.contains("--lambda <LAMBDA>") && distill.contains("[default: 0.9]"));
    assert!(distill.contains("--t-kd <T_KD>") && distill.contains("[default: 4]"));
    let eval = stdout(&ok(calikd(&["eval-calibration", "--help"], dir.path())));
    assert_eq!(eval.matches("[default: 15]").count(), 2, "{eval}");
    let cal = stdout(&ok(calikd(&["calibrate", "--help"], dir.path())));
    for mode in ["fixed", "fit-temperature", "vector-scaling"] {
        assert!(cal.contains(mode));
    }
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = calikd(&["eval-calibration", "--logits", "a.csv", "--labels", "b.csv", "--bogus"], dir.path());
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--bogus"));

    let out = calikd(&["eval-calibration", "--logits", "missing.csv", "--labels", "b.csv"], dir.path());
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("--logits"), "{}", stderr(&out));

    assert_eq!(code(&calikd(&["calibrate", "--mode", "platt"], dir.path())), 1);
    assert_eq!(code(&calikd(&[], dir.path())), 1);
    assert_eq!(code(&calikd(&["no-such-command"], dir.path())), 1);
}

#[test]
fn eval_calibration_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let (rows, labels) = overconfident(90);
    write_csv(&dir.path().join("z.csv"), &rows);
    write_labels(&dir.path().join("y.csv"), &labels);
    ok(calikd(
        &["eval-calibration", "--logits", "z.csv", "--labels", "y.csv", "--m-bins", "15", "--r-bins", "15"],
        dir.path(),
    ));
    let report: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let mut keys: Vec<&str> = report.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort_unstable();
    assert_eq!(keys, ["accuracy", "ace", "ece", "ece_over", "ece_under", "k", "m_bins", "n", "nll", "r_bins"]);

    let z = LogitMatrix::from_rows(&rows).unwrap();
    let want = full_report(&tempered_softmax(&z, Temperature::ONE), &LabelVec::new(labels, 3).unwrap(), 15, 15).unwrap();
    assert_eq!(report, serde_json::to_value(&want).unwrap());
    assert_eq!(report["n"], 90);
}

#[test]
fn fit_temperature_lowers_nll_on_overconfident_logits() {
    let dir = tempfile::tempdir().unwrap();
    let (rows, labels) = overconfident(120);
    write_csv(&dir.path().join("z.csv"), &rows);
    write_labels(&dir.path().join("y.csv"), &labels);
    let before = fs::read(dir.path().join("z.csv")).unwrap();
    for mode in ["fit-temperature", "vector-scaling"] {
        let out = ok(calikd(
            &["calibrate", "--mode", mode, "--logits", "z.csv", "--labels", "y.csv", "--out", "c.json"],
            dir.path(),
        ));
        let c: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("c.json")).unwrap()).unwrap();
        let meta = &c["fit_metadata"];
        assert!(meta["nll_after"].as_f64().unwrap() < meta["nll_before"].as_f64().unwrap(), "{mode}: {c}");
        assert!(stdout(&out).contains("nll_after"));
    }
    assert_eq!(fs::read(dir.path().join("z.csv")).unwrap(), before);

    ok(calikd(&["calibrate", "--mode", "fixed", "--logits", "z.csv", "--labels", "y.csv", "--out", "f.json"], dir.path()));
    let c: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("f.json")).unwrap()).unwrap();
    assert_eq!(c["kind"], "fixed_temperature");
    assert_eq!(c["t"], 1.5);
}

#[test]
fn refuses_to_overwrite_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let (rows, labels) = overconfident(30);
    write_csv(&dir.path().join("z.csv"), &rows);
    write_labels(&dir.path().join("y.csv"), &labels);
    let before = fs::read(dir.path().join("y.csv")).unwrap();
    let out = calikd(&["eval-calibration", "--logits", "z.csv", "--labels", "y.csv", "--out", "y.csv"], dir.path());
    assert_eq!(code(&out), 1);
    assert_eq!(fs::read(dir.path().join("y.csv")).unwrap(), before);
}

fn hash_files(dir: &Path, names: &[&str]) -> Vec<Vec<u8>> {
    names.iter().map(|n| fs::read(dir.join(n)).unwrap()).collect()
}

#[test]
fn train_calibrate_distill_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(calikd(
        &["gen-data", "--out", "d.json", "--n-train", "300", "--n-val", "100", "--n-test", "150", "--dim", "5", "--classes", "3", "--seed", "2", "--csv-dir", "csv"],
        p,
    ));
    assert!(p.join("csv/test_labels.csv").is_file() && p.join("csv/train_features.csv").is_file());
    ok(calikd(
        &["train-teacher", "--data", "d.json", "--out", "t.json", "--hidden", "16", "--epochs", "5", "--logits-dir", "lg"],
        p,
    ));
    let ck: Value = serde_json::from_str(&fs::read_to_string(p.join("t.json")).unwrap()).unwrap();
    assert_eq!(ck["layer_dims"], serde_json::json!([5, 16, 3]));
    assert_eq!(fs::read_to_string(p.join("lg/test_labels.csv")).unwrap().lines().count(), 150);

    ok(calikd(
        &["calibrate", "--mode", "fit-temperature", "--logits", "lg/val_logits.csv", "--labels", "lg/val_labels.csv", "--out", "cal.json"],
        p,
    ));
    let inputs = ["d.json", "t.json", "cal.json"];
    let before = hash_files(p, &inputs);
    let student = |extra: &[&str], out: &str| {
        let mut args = vec!["distill", "--data", "d.json", "--teacher", "t.json", "--epochs", "3", "--out", out, "--report", "r.json"];
        args.extend_from_slice(extra);
        ok(calikd(&args, p));
        (fs::read(p.join(out)).unwrap(), fs::read_to_string(p.join("r.json")).unwrap())
    };
    let (s1, r1) = student(&["--seed", "4"], "s1.json");
    let (s1b, r1b) = student(&["--seed", "4"], "s1b.json");
    assert_eq!((s1, r1), (s1b, r1b), "same seed, same student");
    let (s2, _) = student(&["--seed", "5"], "s2.json");
    assert_ne!(fs::read(p.join("s1.json")).unwrap(), s2);
    // A fixed-T(1) calibrator file gives the same student as --t-cal 1.
    ok(calikd(
        &["calibrate", "--mode", "fixed", "--temperature", "1", "--logits", "lg/val_logits.csv", "--labels", "lg/val_labels.csv", "--out", "one.json"],
        p,
    ));
    let (a, _) = student(&["--calibrator", "one.json"], "sa.json");
    let (b, _) = student(&["--t-cal", "1"], "sb.json");
    assert_eq!(a, b);
    student(&["--calibrator", "cal.json"], "sc.json");
    assert_eq!(hash_files(p, &inputs), before, "inputs were modified");
    let report: Value = serde_json::from_str(&fs::read_to_string(p.join("r.json")).unwrap()).unwrap();
    assert_eq!(report["n"], 150);
}

#[test]
fn divergence_exits_2_naming_the_stage() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(calikd(&["gen-data", "--out", "d.json", "--n-train", "200", "--n-val", "50", "--n-test", "50", "--dim", "4", "--classes", "3"], p));
    let out = calikd(&["train-teacher", "--data", "d.json", "--out", "t.json", "--lr", "1e4", "--epochs", "3"], p);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert!(stderr(&out).contains("teacher training"), "{}", stderr(&out));
    assert!(!p.join("t.json").exists());
}

#[test]
fn thread_cap_is_read_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let run = |threads: &str| {
        Command::new(env!("CARGO_BIN_EXE_calikd"))
            .args(["gen-data", "--out", "d.json", "--n-train", "50", "--n-val", "10", "--n-test", "10", "--dim", "3", "--classes", "2"])
            .current_dir(dir.path())
            .env("CALIKD_THREADS", threads)
            .output()
            .unwrap()
    };
    assert_eq!(code(&run("1")), 0);
    let bad = run("many");
    assert_eq!(code(&bad), 1);
    assert!(stderr(&bad).contains("CALIKD_THREADS"));
}

#[test]
fn sweeps_are_byte_identical_and_verifiable() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let manifest = serde_json::to_string_pretty(&tiny_manifest()).unwrap();
    fs::write(p.join("m.json"), &manifest).unwrap();
    for out in ["run1", "run2"] {
        let o = ok(calikd(&["sweep-correlation", "--manifest", "m.json", "--out", out], p));
        assert!(stdout(&o).contains("Spearman"), "{}", stdout(&o));
    }
    let records = |d: &str| fs::read(p.join(d).join("records.csv")).unwrap();
    assert_eq!(records("run1"), records("run2"));
    assert_eq!(String::from_utf8(records("run1")).unwrap().lines().count(), 1 + 3 * 2);
    assert_eq!(fs::read_to_string(p.join("m.json")).unwrap(), manifest);

    ok(calikd(&["sweep-temperature", "--manifest", "m.json", "--out", "abl"], p));
    assert!(p.join("abl/ablation.csv").is_file());
    ok(calikd(&["sweep-calibrators", "--manifest", "m.json", "--out", "cmp", "--seeds", "3"], p));
    assert!(p.join("cmp/calibrators.csv").is_file());
    let cmp = String::from_utf8(records("cmp")).unwrap();
    assert_eq!(cmp.lines().count(), 1 + 2);

    let verify = ok(calikd(&["report", "--dir", "run1", "--verify"], p));
    assert!(stdout(&verify).contains("recomputed"));
    assert_eq!(code(&calikd(&["report", "--dir", "nowhere"], p)), 1);

    // the seed flag reseeds the dataset
    ok(calikd(&["sweep-correlation", "--manifest", "m.json", "--out", "run3", "--seed", "10"], p));
    assert_ne!(records("run1"), records("run3"));

    let mut no_ablation = tiny_manifest();
    no_ablation.ablation = None;
    fs::write(p.join("n.json"), serde_json::to_string(&no_ablation).unwrap()).unwrap();
    let out = calikd(&["sweep-temperature", "--manifest", "n.json", "--out", "x"], p);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("ablation"));
}

#[test]
fn shipped_manifest_is_the_default_benchmark() {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../manifests/default.json");
    let shipped: Manifest = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(shipped, Manifest::default_benchmark());
    let dir = tempfile::tempdir().unwrap();
    let printed: Manifest = serde_json::from_slice(&ok(calikd(&["report", "--default-manifest"], dir.path())).stdout).unwrap();
    assert_eq!(printed, shipped);
}
