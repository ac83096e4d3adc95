mod common;

use std::path::Path;

use backeisnn_cli::checkpoint::Checkpoint;
use backeisnn_cli::commands::{self, SweepAxis, BEST_CHECKPOINT, LAST_CHECKPOINT};
use backeisnn_cli::data;
use backeisnn_cli::RunConfig;
use common::{metrics_without_time, synthetic_mnist, tiny_config};
use tempfile::TempDir;

fn setup(train: usize, test: usize) -> (TempDir, RunConfig) {
    let tmp = TempDir::new().unwrap();
    let root = synthetic_mnist(tmp.path(), train, test);
    let cfg = tiny_config(&root, &tmp.path().join("run"));
    (tmp, cfg)
}

fn run(cfg: &RunConfig, resume: Option<&Path>) -> commands::RunSummary {
    let splits = data::load(cfg, cfg.data_root.as_deref().unwrap()).unwrap();
    commands::train(cfg, &splits, resume).unwrap()
}

#[test]
fn identical_seeds_give_identical_metrics() {
    let (tmp, mut cfg) = setup(60, 20);
    run(&cfg, None);
    let first = metrics_without_time(&cfg.out_dir);
    cfg.out_dir = tmp.path().join("again");
    run(&cfg, None);
    assert_eq!(first, metrics_without_time(&cfg.out_dir));
    assert_eq!(first.len(), 2);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let (tmp, mut cfg) = setup(60, 20);
    cfg.epochs = 2;
    cfg.out_dir = tmp.path().join("straight");
    run(&cfg, None);
    let straight: Checkpoint<f32> = Checkpoint::load(&cfg.out_dir.join(LAST_CHECKPOINT)).unwrap();

    let mut half = cfg.clone();
    half.epochs = 1;
    half.out_dir = tmp.path().join("resumed");
    run(&half, None);
    let mut rest = cfg.clone();
    rest.out_dir = half.out_dir.clone();
    run(&rest, Some(&half.out_dir.join(LAST_CHECKPOINT)));
    let resumed: Checkpoint<f32> = Checkpoint::load(&rest.out_dir.join(LAST_CHECKPOINT)).unwrap();

    assert_eq!(resumed.epoch, 2);
    assert_eq!(straight.params, resumed.params);
    assert_eq!(straight.adam, resumed.adam);
    assert_eq!(
        metrics_without_time(&cfg.out_dir),
        metrics_without_time(&rest.out_dir)
    );
}

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let (tmp, cfg) = setup(40, 20);
    run(&cfg, None);
    let path = cfg.out_dir.join(BEST_CHECKPOINT);
    let bytes = std::fs::read(&path).unwrap();
    let ck: Checkpoint<f32> = Checkpoint::load(&path).unwrap();
    let copy = tmp.path().join("copy.ckpt");
    ck.save(&copy).unwrap();
    assert_eq!(bytes, std::fs::read(&copy).unwrap());
    assert!(
        Checkpoint::<f64>::load(&path).is_err(),
        "dtype mismatch must be rejected"
    );
    assert!(Checkpoint::<f32>::decode(&bytes[..bytes.len() - 3]).is_err());
}

#[test]
fn resume_with_a_different_structure_fails() {
    let (_tmp, cfg) = setup(40, 20);
    run(&cfg, None);
    let mut other = cfg.clone();
    other.structure = "6C5-P2-16".into();
    let splits = data::load(&other, other.data_root.as_deref().unwrap()).unwrap();
    let err =
        commands::train(&other, &splits, Some(&cfg.out_dir.join(LAST_CHECKPOINT))).unwrap_err();
    assert_eq!(err.exit_code(), 2, "{err}");
}

#[test]
fn zero_epochs_only_evaluates() {
    let (_tmp, mut cfg) = setup(40, 20);
    cfg.epochs = 0;
    let summary = run(&cfg, None);
    let rows = metrics_without_time(&cfg.out_dir);
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r[0] == "0"));
    assert_eq!(summary.final_test.confusion.total(), 20);
}

#[test]
fn reported_accuracy_is_confusion_trace_over_total() {
    let (_tmp, cfg) = setup(60, 30);
    let summary = run(&cfg, None);
    let grid = std::fs::read_to_string(cfg.out_dir.join("confusion_test.txt")).unwrap();
    let rows: Vec<Vec<u64>> = grid
        .lines()
        .map(|l| l.split_whitespace().map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 10);
    let total: u64 = rows.iter().flatten().sum();
    let trace: u64 = (0..10).map(|i| rows[i][i]).sum();
    assert_eq!(total, 30);
    let expected = trace as f64 / total as f64;
    assert_eq!(summary.final_test.accuracy(), expected);

    let mut r = csv::Reader::from_path(cfg.out_dir.join("metrics.csv")).unwrap();
    let last_test = r
        .records()
        .map(|x| x.unwrap())
        .filter(|x| &x[1] == "test")
        .last()
        .unwrap();
    assert_eq!(last_test[3].parse::<f64>().unwrap(), expected);
}

#[test]
fn ablation_baseline_equals_plain_run_without_gates() {
    let (tmp, mut cfg) = setup(40, 20);
    let splits = data::load(&cfg, cfg.data_root.as_deref().unwrap()).unwrap();
    cfg.out_dir = tmp.path().join("ablate");
    let rows = commands::ablate(&cfg, &splits).unwrap();
    assert_eq!(rows.len(), 4);
    assert!(cfg.out_dir.join("ablation.md").exists());

    let plain = RunConfig {
        sfbm: false,
        beim: false,
        out_dir: tmp.path().join("plain"),
        ..cfg.clone()
    };
    commands::train(&plain, &splits, None).unwrap();
    assert_eq!(
        metrics_without_time(&cfg.out_dir.join("baseline")),
        metrics_without_time(&plain.out_dir)
    );
}

#[test]
fn sweep_runs_every_point() {
    let (tmp, mut cfg) = setup(20, 10);
    cfg.out_dir = tmp.path().join("sweep");
    cfg.sweep.time_steps = vec![2, 3, 4, 5];
    let splits = data::load(&cfg, cfg.data_root.as_deref().unwrap()).unwrap();
    let results = commands::sweep(&cfg, &splits, SweepAxis::TimeSteps).unwrap();
    assert_eq!(
        results.iter().map(|r| r.0).collect::<Vec<_>>(),
        vec![2, 3, 4, 5]
    );
    let table = std::fs::read_to_string(cfg.out_dir.join("sweep.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
    for v in [2, 3, 4, 5] {
        assert!(cfg
            .out_dir
            .join(format!("time_steps_{v}"))
            .join("metrics.csv")
            .exists());
    }
}

#[test]
fn eval_reproduces_the_final_test_pass() {
    let (_tmp, cfg) = setup(40, 20);
    let summary = run(&cfg, None);
    let splits = data::load(&cfg, cfg.data_root.as_deref().unwrap()).unwrap();
    let pass = commands::eval(&cfg.out_dir.join(LAST_CHECKPOINT), &cfg, &splits).unwrap();
    assert_eq!(pass.confusion, summary.final_test.confusion);
    assert_eq!(pass.loss, summary.final_test.loss);
}

#[test]
fn gradcheck_command_passes_for_every_switch_setting() {
    let tmp = TempDir::new().unwrap();
    for (sfbm, beim) in [(false, false), (true, false), (false, true), (true, true)] {
        let cfg = RunConfig {
            sfbm,
            beim,
            out_dir: tmp.path().join(format!("gc_{sfbm}_{beim}")),
            ..Default::default()
        };
        let report = commands::gradcheck_cmd(&cfg).unwrap();
        assert!(report.passed());
        assert!(cfg.out_dir.join("gradcheck.txt").exists());
    }
}

#[test]
fn gradcheck_rejects_oversized_networks() {
    let mut cfg = RunConfig::default();
    cfg.gradcheck.structure = "64C3-64C3-P2-500".into();
    let err = commands::gradcheck_network(&cfg, &cfg.gradcheck).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
