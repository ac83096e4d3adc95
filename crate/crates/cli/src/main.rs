use std::path::PathBuf;
use std::process::ExitCode;

use backeisnn::DType;
use backeisnn_cli::commands::{self, SweepAxis};
use backeisnn_cli::config::PRESETS;
use backeisnn_cli::data::{self, DATA_ROOT_ENV};
use backeisnn_cli::{CliError, RunConfig};
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "backeisnn",
    version,
    about = "Train and evaluate BackEISNN spiking networks"
)]
struct Cli {
    /// TOML run configuration; keys not given take the preset's values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Starting preset: mnist, fashion, nmnist or cifar10.
    #[arg(long, global = true, default_value = "mnist")]
    preset: String,
    /// Directory holding the dataset folders.
    #[arg(long, global = true, env = DATA_ROOT_ENV)]
    data_root: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    dtype: Option<DType>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Continue training from this checkpoint.
    #[arg(long, global = true)]
    resume: Option<PathBuf>,
    #[arg(long, global = true)]
    epochs: Option<u32>,
    #[arg(long, global = true)]
    batch_size: Option<usize>,
    #[arg(long, global = true)]
    time_steps: Option<usize>,
    /// Use only the first N training samples.
    #[arg(long, global = true)]
    train_limit: Option<usize>,
    /// Use only the first N test samples.
    #[arg(long, global = true)]
    test_limit: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a network, writing metrics and checkpoints to the run directory.
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the four SFBM/BEIM switch combinations.
    Ablate,
    /// Compare BPTT gradients with finite differences on a tiny network.
    Gradcheck,
    /// Train once per value of the chosen axis.
    Sweep {
        #[arg(long, value_enum)]
        axis: SweepAxis,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn build_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            RunConfig::from_toml(&text)?
        }
        None => {
            if !PRESETS.contains(&cli.preset.as_str()) {
                return Err(CliError::Config(format!(
                    "unknown preset `{}` (expected one of {})",
                    cli.preset,
                    PRESETS.join(", ")
                )));
            }
            RunConfig::preset(&cli.preset)?
        }
    };
    if let Some(v) = cli.seed {
        cfg.seed = v;
    }
    if let Some(v) = cli.dtype {
        cfg.dtype = v;
    }
    if let Some(v) = &cli.out {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = cli.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = cli.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = cli.time_steps {
        cfg.time_steps = v;
    }
    if cli.train_limit.is_some() {
        cfg.train_limit = cli.train_limit;
    }
    if cli.test_limit.is_some() {
        cfg.test_limit = cli.test_limit;
    }
    cfg.data_root = Some(data::resolve_root(cli.data_root.as_deref(), &cfg));
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = build_config(&cli)?;
    let root = cfg.data_root.clone().expect("resolved above");
    match cli.command {
        Command::ShowConfig => print!("{}", cfg.to_toml()),
        Command::Gradcheck => {
            commands::gradcheck_cmd(&cfg)?;
        }
        Command::Train => {
            let data = data::load(&cfg, &root)?;
            let s = commands::train(&cfg, &data, cli.resume.as_deref())?;
            println!(
                "trained {} epochs: best test accuracy {:.4}, final {:.4} ({})",
                s.epochs,
                s.best_test_accuracy,
                s.final_test.accuracy(),
                s.dir.display()
            );
        }
        Command::Eval { checkpoint } => {
            let data = data::load(&cfg, &root)?;
            let pass = commands::eval(&checkpoint, &cfg, &data)?;
            println!("test loss {:.6} accuracy {:.4}", pass.loss, pass.accuracy());
        }
        Command::Ablate => {
            let data = data::load(&cfg, &root)?;
            commands::ablate(&cfg, &data)?;
        }
        Command::Sweep { axis } => {
            let data = data::load(&cfg, &root)?;
            commands::sweep(&cfg, &data, axis)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
