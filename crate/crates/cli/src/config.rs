//! Run configuration: a TOML file with named presets and flag overrides.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use backeisnn::gradcheck::GradcheckConfig;
use backeisnn::network::{ConvPadding, DropoutPolicy, Encoding};
use backeisnn::optimizer::{AdamConfig, LrSchedule};
use backeisnn::tensor::PoolKind;
use backeisnn::{DType, NetworkSpec, ResetMode, Switches};
use backeisnn_data::Normalization;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetId {
    Mnist,
    Fashion,
    Nmnist,
    Cifar10,
}

impl DatasetId {
    pub fn input_shape(self) -> [usize; 3] {
        match self {
            DatasetId::Mnist | DatasetId::Fashion => [1, 28, 28],
            DatasetId::Nmnist => [2, 34, 34],
            DatasetId::Cifar10 => [3, 32, 32],
        }
    }

    /// Subdirectory of the data root holding this dataset.
    pub fn dir_name(self) -> &'static str {
        match self {
            DatasetId::Mnist => "mnist",
            DatasetId::Fashion => "fashion-mnist",
            DatasetId::Nmnist => "nmnist",
            DatasetId::Cifar10 => "cifar10",
        }
    }
}

impl fmt::Display for DatasetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetId::Mnist => "mnist",
            DatasetId::Fashion => "fashion",
            DatasetId::Nmnist => "nmnist",
            DatasetId::Cifar10 => "cifar10",
        })
    }
}

impl FromStr for DatasetId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mnist" => Ok(DatasetId::Mnist),
            "fashion" | "fashion-mnist" | "fashion_mnist" => Ok(DatasetId::Fashion),
            "nmnist" | "n-mnist" => Ok(DatasetId::Nmnist),
            "cifar10" | "cifar-10" | "cifar" => Ok(DatasetId::Cifar10),
            other => Err(format!("unknown dataset `{other}`")),
        }
    }
}

/// Values swept by the `sweep` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub kernels: Vec<usize>,
    pub time_steps: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            kernels: vec![1, 3, 5, 7],
            time_steps: vec![10, 20, 30, 40],
        }
    }
}

/// Tiny network checked by the `gradcheck` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckSetup {
    pub structure: String,
    pub input_shape: [usize; 3],
    pub time_steps: usize,
    pub batch: usize,
    pub check: GradcheckConfig,
}

/// Largest parameter count `gradcheck` accepts; every probe costs two full
/// forward passes.
pub const GRADCHECK_MAX_PARAMS: usize = 20_000;

impl Default for GradcheckSetup {
    fn default() -> Self {
        Self {
            structure: "4C3-P2".into(),
            input_shape: [1, 8, 8],
            time_steps: 4,
            batch: 2,
            check: GradcheckConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetId,
    /// Hidden layers, e.g. `15C5-P2-40C5-P2-300`; the class layer is
    /// appended automatically.
    pub structure: String,
    pub time_steps: usize,
    pub gate_kernel: usize,
    pub sfbm: bool,
    pub beim: bool,
    pub reset: ResetMode,
    pub encoding: Encoding,
    pub batch_size: usize,
    pub epochs: u32,
    pub lr: LrSchedule,
    pub adam: AdamConfig,
    pub seed: u64,
    pub dtype: DType,
    pub out_dir: PathBuf,
    pub data_root: Option<PathBuf>,
    pub conv_padding: ConvPadding,
    pub pooling: PoolKind,
    pub tau: f64,
    pub v_th: f64,
    pub surrogate_window: f64,
    /// Multiplier on the `1/sqrt(fan_in)` bound of the initial weights.
    pub init_gain: f64,
    /// Initial self-feedback gate bias.
    pub sfb_bias_init: f64,
    /// Dropout probability after each hidden block; 0 disables it.
    pub dropout: f64,
    pub dropout_policy: DropoutPolicy,
    /// Random crop and flip of training images.
    pub augment: bool,
    pub normalization: Normalization,
    /// Use only the first `n` training samples.
    pub train_limit: Option<usize>,
    /// Use only the first `n` test samples.
    pub test_limit: Option<usize>,
    /// Bins the event window is split into; the first `time_steps` are fed.
    pub event_bins: usize,
    /// Evaluate the test split after every epoch.
    pub eval_every_epoch: bool,
    pub sweep: SweepConfig,
    pub gradcheck: GradcheckSetup,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetId::Mnist,
            structure: "15C5-P2-40C5-P2-300".into(),
            time_steps: 20,
            gate_kernel: 5,
            sfbm: true,
            beim: true,
            reset: ResetMode::Magnitude,
            encoding: Encoding::Bernoulli,
            batch_size: 100,
            epochs: 200,
            lr: LrSchedule::default(),
            adam: AdamConfig::default(),
            seed: 0,
            dtype: DType::F32,
            out_dir: PathBuf::from("runs/mnist"),
            data_root: None,
            conv_padding: ConvPadding::Valid,
            pooling: PoolKind::Avg,
            tau: 2.0,
            v_th: 0.5,
            surrogate_window: 0.5,
            init_gain: 2.0,
            sfb_bias_init: 2.0,
            dropout: 0.0,
            dropout_policy: DropoutPolicy::PerWindow,
            augment: false,
            normalization: Normalization::Unit,
            train_limit: None,
            test_limit: None,
            event_bins: 100,
            eval_every_epoch: true,
            sweep: SweepConfig::default(),
            gradcheck: GradcheckSetup::default(),
        }
    }
}

pub const PRESETS: [&str; 4] = ["mnist", "fashion", "nmnist", "cifar10"];

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self, CliError> {
        let dataset: DatasetId = name.parse().map_err(CliError::Config)?;
        let base = RunConfig {
            dataset,
            out_dir: PathBuf::from(format!("runs/{dataset}")),
            ..Default::default()
        };
        Ok(match dataset {
            DatasetId::Mnist => base,
            DatasetId::Fashion => RunConfig {
                structure: "32C5-P2-64C5-P2-1024".into(),
                encoding: Encoding::Direct,
                ..base
            },
            DatasetId::Nmnist => RunConfig {
                structure: "12C5-P2-64C5-P2".into(),
                time_steps: 30,
                encoding: Encoding::Event,
                conv_padding: ConvPadding::Fixed(1),
                ..base
            },
            DatasetId::Cifar10 => RunConfig {
                structure: "128C3-P2-256C3-P2-512C3-P2-1024".into(),
                time_steps: 8,
                gate_kernel: 3,
                encoding: Encoding::Direct,
                conv_padding: ConvPadding::Same,
                dropout: 0.2,
                augment: true,
                normalization: Normalization::CIFAR10,
                ..base
            },
        })
    }

    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn switches(&self) -> Switches {
        Switches {
            sfbm: self.sfbm,
            beim: self.beim,
        }
    }

    /// The network described by this config.
    pub fn network_spec(&self) -> Result<NetworkSpec, CliError> {
        let mut spec = NetworkSpec::new(
            &self.structure,
            self.dataset.input_shape(),
            10,
            self.time_steps,
        )
        .map_err(|e| CliError::Config(e.to_string()))?;
        spec.switches = self.switches();
        spec.gate_kernel = self.gate_kernel;
        spec.conv_padding = self.conv_padding;
        spec.pooling = self.pooling;
        spec.encoding = self.encoding;
        spec.dropout_policy = self.dropout_policy;
        spec.lif.tau = self.tau;
        spec.lif.reset = self.reset;
        spec.lif.spike.v_th = self.v_th;
        spec.lif.spike.window = self.surrogate_window;
        spec.init.weight_gain = self.init_gain;
        spec.init.sfb_bias = self.sfb_bias_init;
        if self.dropout > 0.0 {
            spec = spec
                .with_dropout(self.dropout)
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        spec.validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Config(msg));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.time_steps == 0 {
            return bad("time_steps must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        let event = self.dataset == DatasetId::Nmnist;
        if event != (self.encoding == Encoding::Event) {
            return bad(format!(
                "encoding `{}` does not fit dataset `{}`",
                self.encoding, self.dataset
            ));
        }
        if event && self.time_steps > self.event_bins {
            return bad(format!(
                "time_steps {} exceeds event_bins {}",
                self.time_steps, self.event_bins
            ));
        }
        if self.encoding == Encoding::Bernoulli && self.normalization != Normalization::Unit {
            return bad("Bernoulli encoding needs pixels in [0, 1] (normalization = unit)".into());
        }
        if self.augment && self.dataset != DatasetId::Cifar10 {
            return bad("augmentation is only defined for CIFAR-10".into());
        }
        if self.sweep.kernels.iter().any(|&k| k == 0 || k % 2 == 0) {
            return bad(format!(
                "sweep kernels {:?} must be odd",
                self.sweep.kernels
            ));
        }
        if self.sweep.time_steps.contains(&0) {
            return bad("sweep time steps must be positive".into());
        }
        self.lr
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.network_spec().map(drop)
    }
}
