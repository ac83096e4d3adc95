//! Subcommand implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use backeisnn::gradcheck::{gradcheck, GradcheckReport};
use backeisnn::network::ActivityStats;
use backeisnn::{DType, Element, Network, NetworkSpec, SpikeBatch, Tensor};
use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{peek_dtype, Checkpoint};
use crate::config::{GradcheckSetup, GRADCHECK_MAX_PARAMS};
use crate::data::DataSplits;
use crate::metrics::{
    activity_table, spike_rates, write_confusion, write_text, MetricsRow, MetricsWriter,
};
use crate::train::{evaluate, PassResult, Trainer};
use crate::{CliError, RunConfig};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const NAN_SNAPSHOT: &str = "nan_snapshot.ckpt";

/// Outcome of one training run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub epochs: u32,
    pub best_test_accuracy: f64,
    pub final_train: PassResult,
    pub final_test: PassResult,
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn row(epoch: u32, split: &'static str, pass: &PassResult, lr: f64) -> MetricsRow {
    MetricsRow {
        epoch,
        split,
        loss: pass.loss,
        accuracy: pass.accuracy(),
        wall_time: pass.seconds,
        lr,
        spike_rates: spike_rates(&pass.activity),
    }
}

/// Trains `cfg` into `cfg.out_dir`, optionally continuing from a checkpoint.
pub fn train(
    cfg: &RunConfig,
    data: &DataSplits,
    resume: Option<&Path>,
) -> Result<RunSummary, CliError> {
    match cfg.dtype {
        DType::F32 => train_typed::<f32>(cfg, data, resume),
        DType::F64 => train_typed::<f64>(cfg, data, resume),
    }
}

fn train_typed<T: Element>(
    cfg: &RunConfig,
    data: &DataSplits,
    resume: Option<&Path>,
) -> Result<RunSummary, CliError> {
    let dir = cfg.out_dir.clone();
    create_dir(&dir)?;
    let mut trainer = match resume {
        Some(path) => {
            if peek_dtype(path)? != cfg.dtype {
                return Err(CliError::Config(format!(
                    "checkpoint {} was written with a different dtype than {}",
                    path.display(),
                    cfg.dtype
                )));
            }
            Trainer::<T>::from_checkpoint(Checkpoint::load(path)?, cfg.clone())?
        }
        None => Trainer::<T>::new(cfg.clone())?,
    };
    write_text(&dir.join(CONFIG_FILE), &cfg.to_toml())?;
    write_text(
        &dir.join("run.txt"),
        &format!(
            "version = {}\nseed = {}\nresumed_from = {}\n",
            env!("CARGO_PKG_VERSION"),
            cfg.seed,
            resume.map_or_else(|| "none".into(), |p| p.display().to_string())
        ),
    )?;
    let metrics = MetricsWriter::new(dir.join(METRICS_FILE));

    let mut last_train = None;
    let mut last_test = None;
    if trainer.epoch >= cfg.epochs && resume.is_none() {
        let train_pass = trainer.evaluate(&data.train)?;
        let test_pass = trainer.evaluate(&data.test)?;
        metrics.append(&row(0, "train", &train_pass, trainer.lr()))?;
        metrics.append(&row(0, "test", &test_pass, trainer.lr()))?;
        trainer.best_accuracy = test_pass.accuracy();
        last_train = Some(train_pass);
        last_test = Some(test_pass);
    }
    while trainer.epoch < cfg.epochs {
        let lr = trainer.lr();
        let train_pass = match trainer.train_epoch(&data.train) {
            Ok(p) => p,
            Err(CliError::Numeric(msg)) => {
                let snapshot = dir.join(NAN_SNAPSHOT);
                trainer.checkpoint().save(&snapshot)?;
                write_text(&dir.join("nan_report.txt"), &format!("{msg}\n"))?;
                return Err(CliError::Numeric(format!(
                    "{msg}; state saved to {}",
                    snapshot.display()
                )));
            }
            Err(e) => return Err(e),
        };
        let epoch = trainer.epoch;
        metrics.append(&row(epoch, "train", &train_pass, lr))?;
        info!(
            "epoch {epoch}: train loss {:.5} acc {:.4} ({:.1}s)",
            train_pass.loss,
            train_pass.accuracy(),
            train_pass.seconds
        );
        if cfg.eval_every_epoch || epoch == cfg.epochs {
            let test_pass = trainer.evaluate(&data.test)?;
            metrics.append(&row(epoch, "test", &test_pass, lr))?;
            info!(
                "epoch {epoch}: test loss {:.5} acc {:.4}",
                test_pass.loss,
                test_pass.accuracy()
            );
            if test_pass.accuracy() > trainer.best_accuracy {
                trainer.best_accuracy = test_pass.accuracy();
                trainer.checkpoint().save(&dir.join(BEST_CHECKPOINT))?;
            }
            last_test = Some(test_pass);
        }
        trainer.checkpoint().save(&dir.join(LAST_CHECKPOINT))?;
        last_train = Some(train_pass);
    }
    let final_train = match last_train {
        Some(p) => p,
        None => trainer.evaluate(&data.train)?,
    };
    let final_test = match last_test {
        Some(p) => p,
        None => trainer.evaluate(&data.test)?,
    };
    if !dir.join(LAST_CHECKPOINT).exists() {
        trainer.checkpoint().save(&dir.join(LAST_CHECKPOINT))?;
    }
    write_confusion(&dir.join("confusion_train.txt"), &final_train.confusion)?;
    write_confusion(&dir.join("confusion_test.txt"), &final_test.confusion)?;
    write_text(
        &dir.join("activity_train.csv"),
        &activity_table(&final_train.activity),
    )?;
    write_text(
        &dir.join("activity_test.csv"),
        &activity_table(&final_test.activity),
    )?;
    Ok(RunSummary {
        dir,
        epochs: trainer.epoch,
        best_test_accuracy: trainer.best_accuracy.max(final_test.accuracy()),
        final_train,
        final_test,
    })
}

/// Evaluates a checkpoint on the test split, writing results to `out`.
pub fn eval(checkpoint: &Path, cfg: &RunConfig, data: &DataSplits) -> Result<PassResult, CliError> {
    match peek_dtype(checkpoint)? {
        DType::F32 => eval_typed::<f32>(checkpoint, cfg, data),
        DType::F64 => eval_typed::<f64>(checkpoint, cfg, data),
    }
}

fn eval_typed<T: Element>(
    checkpoint: &Path,
    cfg: &RunConfig,
    data: &DataSplits,
) -> Result<PassResult, CliError> {
    let ck = Checkpoint::<T>::load(checkpoint)?;
    let mut net = Network::<T>::new(ck.config.network_spec()?, 0)?;
    net.set_params(ck.params)?;
    let pass = evaluate(&net, cfg, &data.test)?;
    create_dir(&cfg.out_dir)?;
    let metrics = MetricsWriter::new(cfg.out_dir.join("eval.csv"));
    metrics.append(&row(
        ck.epoch,
        "test",
        &pass,
        ck.config.lr.lr(ck.epoch.saturating_sub(1)),
    ))?;
    write_confusion(&cfg.out_dir.join("confusion_test.txt"), &pass.confusion)?;
    write_text(
        &cfg.out_dir.join("activity_test.csv"),
        &activity_table(&pass.activity),
    )?;
    Ok(pass)
}

/// Switch settings of the four ablation runs, in table order.
pub const ABLATION_ROWS: [(&str, bool, bool); 4] = [
    ("baseline", false, false),
    ("sfbm", true, false),
    ("beim", false, true),
    ("both", true, true),
];

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub name: &'static str,
    pub sfbm: bool,
    pub beim: bool,
    pub summary: RunSummary,
}

/// Runs the four switch combinations with identical seed and data order.
pub fn ablate(cfg: &RunConfig, data: &DataSplits) -> Result<Vec<AblationRow>, CliError> {
    let mut rows = Vec::new();
    for (name, sfbm, beim) in ABLATION_ROWS {
        let run = RunConfig {
            sfbm,
            beim,
            out_dir: cfg.out_dir.join(name),
            ..cfg.clone()
        };
        info!("ablation run `{name}`");
        let summary = train(&run, data, None)?;
        rows.push(AblationRow {
            name,
            sfbm,
            beim,
            summary,
        });
    }
    let mut table = String::from(
        "| SFBM | BEIM | best test accuracy (%) | final test accuracy (%) |\n|---|---|---|---|\n",
    );
    let mark = |on: bool| if on { "yes" } else { "-" };
    for r in &rows {
        let _ = writeln!(
            table,
            "| {} | {} | {:.2} | {:.2} |",
            mark(r.sfbm),
            mark(r.beim),
            100.0 * r.summary.best_test_accuracy,
            100.0 * r.summary.final_test.accuracy()
        );
    }
    write_text(&cfg.out_dir.join("ablation.md"), &table)?;
    println!("{table}");
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepAxis {
    Kernel,
    TimeSteps,
}

/// One training run per swept value; returns `(value, best test accuracy)`.
pub fn sweep(
    cfg: &RunConfig,
    data: &DataSplits,
    axis: SweepAxis,
) -> Result<Vec<(usize, f64)>, CliError> {
    let (label, values) = match axis {
        SweepAxis::Kernel => ("kernel", cfg.sweep.kernels.clone()),
        SweepAxis::TimeSteps => ("time_steps", cfg.sweep.time_steps.clone()),
    };
    let mut results = Vec::new();
    for &v in &values {
        let mut run = cfg.clone();
        match axis {
            SweepAxis::Kernel => run.gate_kernel = v,
            SweepAxis::TimeSteps => run.time_steps = v,
        }
        run.out_dir = cfg.out_dir.join(format!("{label}_{v}"));
        info!("sweep point {label} = {v}");
        let summary = train(&run, data, None)?;
        results.push((v, summary.best_test_accuracy));
    }
    let mut table = format!("{label},best_test_accuracy\n");
    for (v, a) in &results {
        let _ = writeln!(table, "{v},{a}");
    }
    create_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("sweep.csv"), &table)?;
    print!("{table}");
    Ok(results)
}

/// Builds the tiny relaxed-mode network described by `setup`.
pub fn gradcheck_network(
    cfg: &RunConfig,
    setup: &GradcheckSetup,
) -> Result<Network<f64>, CliError> {
    let mut spec = NetworkSpec::new(&setup.structure, setup.input_shape, 10, setup.time_steps)
        .map_err(|e| CliError::Config(e.to_string()))?;
    spec.switches = cfg.switches();
    spec.gate_kernel = cfg.gate_kernel.min(3);
    spec.lif.reset = cfg.reset;
    spec.lif.spike = spec.lif.spike.relaxed();
    let net = Network::new(spec, cfg.seed)?;
    let count: usize = net.params().iter().map(|p| p.value.len()).sum();
    if count > GRADCHECK_MAX_PARAMS {
        return Err(CliError::Config(format!(
            "gradcheck network has {count} parameters; the limit is {GRADCHECK_MAX_PARAMS}"
        )));
    }
    Ok(net)
}

pub fn gradcheck_input(setup: &GradcheckSetup, seed: u64) -> (SpikeBatch<f64>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [c, h, w] = setup.input_shape;
    let n = setup.time_steps * setup.batch * c * h * w;
    let data = (0..n).map(|_| rng.random_range(0.0..1.2)).collect();
    let mut shape = vec![setup.time_steps, setup.batch];
    shape.extend_from_slice(&setup.input_shape);
    let input = SpikeBatch::new(Tensor::from_vec(shape, data).expect("sized")).expect("rank 5");
    let labels = (0..setup.batch).map(|_| rng.random_range(0..10)).collect();
    (input, labels)
}

pub fn gradcheck_cmd(cfg: &RunConfig) -> Result<GradcheckReport, CliError> {
    let setup = &cfg.gradcheck;
    let net = gradcheck_network(cfg, setup)?;
    let (input, labels) = gradcheck_input(setup, cfg.seed);
    let check = backeisnn::gradcheck::GradcheckConfig {
        seed: cfg.seed,
        ..setup.check
    };
    let report =
        gradcheck(&net, &input, &labels, &check).map_err(|e| CliError::Numeric(e.to_string()))?;
    let mut text = format!(
        "probes: {}\nrejected (kink crossings): {}\nmax relative error: {:.3e}\nmedian relative error: {:.3e}\nmax absolute error: {:.3e}\nthreshold: {:.1e}\n",
        report.probes.len(),
        report.rejected,
        report.max_rel_error,
        report.median_rel_error,
        report.max_abs_error,
        check.rel_tol
    );
    let _ = writeln!(
        text,
        "result: {}",
        if report.passed() { "PASS" } else { "FAIL" }
    );
    print!("{text}");
    create_dir(&cfg.out_dir)?;
    write_text(&cfg.out_dir.join("gradcheck.txt"), &text)?;
    if !report.passed() {
        let worst: Vec<String> = report
            .worst(5)
            .iter()
            .map(|p| {
                format!(
                    "{}[{}]: analytic {:.6e}, numeric {:.6e}",
                    p.param, p.index, p.analytic, p.numeric
                )
            })
            .collect();
        warn!("worst probes:\n{}", worst.join("\n"));
        return Err(CliError::Numeric(format!(
            "gradient check failed; worst offenders: {}",
            worst.join("; ")
        )));
    }
    Ok(report)
}

/// Per-layer gate activity of a finished run, for ablation checks.
pub fn activity_of(summary: &RunSummary) -> &ActivityStats {
    &summary.final_test.activity
}
