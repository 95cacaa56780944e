use cemt_core::data::{generate_synthetic, split, SamplePool, SemiDataset};
use cemt_core::model::build_network;
use cemt_core::trainer::{evaluate_checkpoint, lr_at, train, train_observed, Method, Seeds, TrainConfig};

fn data() -> (SemiDataset, SamplePool) {
    let pool = generate_synthetic(4, 10, &[16, 16], 2).unwrap();
    let (train_pool, test) = pool.partition(3).unwrap();
    (split(&train_pool, 3, 1).unwrap(), test)
}

fn config(method: Method, iterations: usize) -> TrainConfig {
    let mut cfg = TrainConfig::desk(method);
    cfg.iterations = iterations;
    cfg.schedule_step = 5;
    cfg.batch.patch_shape = vec![16, 16];
    cfg.seeds = Seeds::from_run_seed(4, 1);
    cfg
}

#[test]
fn trace_columns_follow_the_method() {
    let (d, test) = data();
    for method in Method::ALL {
        let report = train(&config(method, 12), &d, &test).unwrap().report;
        assert_eq!(report.trace.len(), 12);
        for (i, row) in report.trace.iter().enumerate() {
            assert_eq!(row.step, i);
            assert_eq!(row.lr, lr_at(i, &report.config));
            assert!((0.0..=1.0).contains(&row.dice_l1));
            assert_eq!(row.loss_m2.is_some(), method.has_second_student());
            assert_eq!(row.dice_l2.is_some(), method.has_second_student());
            assert_eq!(row.r1.is_some(), method.has_teacher());
            match (method, row.r1, row.r2) {
                (Method::MeanTeacher, Some(r1), Some(r2)) => assert_eq!((r1, r2), (1.0, 0.0)),
                (Method::CompetitiveUnidirectional, Some(r1), Some(r2)) => {
                    assert!(r1 == 1.0 && r2 == 0.0 || r1 == 0.0 && r2 == 1.0);
                    assert_eq!(r1 == 1.0, row.dice_l1 < row.dice_l2.unwrap());
                }
                (Method::CompetitiveBidirectional, Some(r1), Some(r2)) => {
                    assert!((r1 + r2 - 1.0).abs() < 1e-12 && r1 >= 0.0 && r2 >= 0.0);
                }
                _ => {}
            }
        }
        assert_eq!(report.cases.len(), 3);
    }
}

#[test]
fn consistency_weight_ramps_up() {
    let (d, test) = data();
    let report = train(&config(Method::MeanTeacher, 20), &d, &test).unwrap().report;
    let lambdas: Vec<f64> = report.trace.iter().map(|r| r.lambda_con).collect();
    assert!(lambdas.windows(2).all(|w| w[1] >= w[0]));
    assert!(lambdas[0] < lambdas[19]);
    assert!(lambdas[19] <= 0.1 + 1e-12);
}

#[test]
fn zero_iterations_keeps_the_initial_weights() {
    let (d, test) = data();
    let cfg = config(Method::CompetitiveBidirectional, 0);
    let out = train(&cfg, &d, &test).unwrap();
    assert!(out.report.trace.is_empty());
    let init = build_network(&cfg.network, cfg.seeds.init).unwrap();
    assert_eq!(out.models.predictor().params(), init.params());
    assert_eq!(out.models.m2.as_ref().unwrap().params(), init.params());
}

#[test]
fn observer_sees_every_teacher_update() {
    let (d, test) = data();
    let mut steps = Vec::new();
    let out = train_observed(&config(Method::CompetitiveUnidirectional, 6), &d, &test, |s, p| {
        steps.push((s, p.values.len()))
    })
    .unwrap();
    let n = out.models.teacher.as_ref().unwrap().num_params();
    assert_eq!(steps, (0..6).map(|s| (s, n)).collect::<Vec<_>>());

    let mut calls = 0;
    train_observed(&config(Method::Supervised, 6), &d, &test, |_, _| calls += 1).unwrap();
    assert_eq!(calls, 0);
}

#[test]
fn checkpoints_reproduce_the_reported_metrics() {
    let (d, test) = data();
    let cfg = config(Method::CompetitiveBidirectional, 8);
    let out = train(&cfg, &d, &test).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let names = out.models.save_checkpoints(dir.path()).unwrap();
    assert_eq!(names, ["m1.ckpt", "m2.ckpt", "teacher.ckpt"]);
    let cases = evaluate_checkpoint(
        &dir.path().join("teacher.ckpt"),
        &test,
        &cfg.inference_patch(),
        &cfg.inference_stride(),
    )
    .unwrap();
    assert_eq!(cases, out.report.cases);
}

#[test]
fn mismatched_split_seed_is_rejected() {
    let (d, test) = data();
    let mut cfg = config(Method::MeanTeacher, 2);
    cfg.seeds.split = 9;
    assert!(train(&cfg, &d, &test).is_err());
    let cfg = config(Method::MeanTeacher, 2);
    assert!(train(&cfg, &d.labeled_only(), &test).is_err());
}
