use calikd::distill::{distill_student, evaluate};
use calikd::harness::{gen_dataset, SyntheticSpec};
use calikd::nn::{init_model, train, Checkpoint, Objective};
use calikd::{Calibrator, KdConfig, SplitTag, TrainConfig};

fn blobs(separation: f64, seed: u64) -> calikd::Dataset {
    gen_dataset(&SyntheticSpec {
        n_train: 1500,
        n_val: 300,
        n_test: 600,
        d: 8,
        k: 4,
        class_separation: separation,
        label_noise: 0.0,
        seed,
    })
    .unwrap()
}

fn quick(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        lr0: 0.05,
        lr_decay_epochs: vec![epochs * 2 / 3],
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn separable_blobs_are_learned() {
    let data = blobs(8.0, 1);
    let (model, log) = train(init_model(&[8, 32, 4], 5).unwrap(), &data, &quick(10, 3), &Objective::HardCe).unwrap();
    assert!(log.final_val_accuracy().unwrap() >= 0.95, "{:?}", log.final_val_accuracy());
    assert!(evaluate(&model, &data, SplitTag::Test, 15, 15).unwrap().accuracy >= 0.95);
    assert_eq!(log.epochs.len(), 10);
}

#[test]
fn same_seed_same_weights() {
    let data = blobs(3.0, 2);
    let run = |mix: f64| {
        let cfg = TrainConfig {
            mixup_alpha: mix,
            ..quick(4, 9)
        };
        train(init_model(&[8, 16, 16, 4], 1).unwrap(), &data, &cfg, &Objective::HardCe).unwrap().0
    };
    assert_eq!(run(0.0), run(0.0));
    assert_eq!(run(0.3), run(0.3));
    assert_ne!(run(0.0), run(0.3));
    let other = train(init_model(&[8, 16, 16, 4], 1).unwrap(), &data, &quick(4, 10), &Objective::HardCe).unwrap().0;
    assert_ne!(run(0.0), other);
}

#[test]
fn trained_checkpoint_reloads_exactly() {
    let data = blobs(3.0, 3);
    let cfg = quick(3, 1);
    let (model, log) = train(init_model(&[8, 12, 4], 2).unwrap(), &data, &cfg, &Objective::HardCe).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    Checkpoint::from_model(&model, Some(&cfg), Some(2), log.final_val_accuracy()).save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap().to_model().unwrap();
    assert_eq!(back, model);
    assert_eq!(
        evaluate(&back, &data, SplitTag::Test, 15, 15).unwrap(),
        evaluate(&model, &data, SplitTag::Test, 15, 15).unwrap()
    );
}

fn teacher(data: &calikd::Dataset) -> calikd::MlpModel {
    train(init_model(&[8, 32, 4], 7).unwrap(), data, &quick(5, 7), &Objective::HardCe).unwrap().0
}

#[test]
fn zero_lambda_kd_is_plain_cross_entropy() {
    let data = blobs(3.0, 4);
    let t = teacher(&data);
    let cfg = quick(3, 11);
    let kd = KdConfig {
        lambda: 0.0,
        ..KdConfig::default()
    };
    let init = init_model(&[8, 6, 4], 11).unwrap();
    let distilled = distill_student(init.clone(), &t, None, &data, &cfg, &kd, 15, 15).unwrap();
    let (plain, log) = train(init, &data, &cfg, &Objective::HardCe).unwrap();
    assert_eq!(distilled.student, plain);
    assert_eq!(distilled.log, log);
}

#[test]
fn unit_calibrators_change_nothing() {
    let data = blobs(3.0, 5);
    let t = teacher(&data);
    let cfg = quick(3, 12);
    let kd = KdConfig::default().with_t_cal(1.0).unwrap();
    let init = init_model(&[8, 6, 4], 12).unwrap();
    let run = |c: Option<&Calibrator>| distill_student(init.clone(), &t, c, &data, &cfg, &kd, 15, 15).unwrap();
    let none = run(None);
    let fixed = run(Some(&Calibrator::fixed(1.0).unwrap()));
    let identity = run(Some(&Calibrator::identity_vector(4)));
    assert_eq!(none.student, fixed.student);
    assert_eq!(none.student, identity.student);
    assert_eq!(none.test_report, fixed.test_report);

    // the calibrator temperature and t_cal compose
    let via_cfg = distill_student(init.clone(), &t, None, &data, &cfg, &KdConfig::default(), 15, 15).unwrap();
    let via_cal = run(Some(&Calibrator::fixed(1.5).unwrap()));
    let gap = via_cfg
        .student
        .params()
        .zip(via_cal.student.params())
        .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
    assert!(gap < 1e-9, "{gap}");
}

#[test]
fn kd_with_mixup_is_rejected() {
    let data = blobs(3.0, 6);
    let t = teacher(&data);
    let cfg = TrainConfig {
        mixup_alpha: 0.2,
        ..quick(2, 1)
    };
    let init = init_model(&[8, 6, 4], 1).unwrap();
    assert!(distill_student(init, &t, None, &data, &cfg, &KdConfig::default(), 15, 15).is_err());
}
