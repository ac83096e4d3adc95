//! Network description, structure-string parsing, rollout over time and
//! rate readout.

mod model;
mod readout;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::AutogradError;
use crate::neuron::{LifParams, NeuronError, StopGradient, Switches};
use crate::tensor::PoolKind;

pub use model::{
    LayerRecord, LayerTrace, NamedParam, Network, ParamStore, Rollout, RolloutRecord, SpikeBatch,
    StepTrace, INIT_STREAM,
};
pub use readout::{
    mse_rate_loss, mse_rate_value, predict, sample_dropout_mask, ActivityStats, ConfusionMatrix,
    LayerActivity, RateTarget,
};

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("structure token `{token}`: {reason}")]
    Parse { token: String, reason: String },
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid network: {0}")]
    Spec(String),
    #[error("layer {index}: {source}")]
    Layer {
        index: usize,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error(transparent)]
    Neuron(#[from] NeuronError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error("dropout probability must be in [0, 1), got {0}")]
    DropoutProbability(f64),
}

pub type Result<T> = std::result::Result<T, NetworkError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    /// Spiking convolution: output channels, kernel size.
    Conv {
        channels: usize,
        kernel: usize,
    },
    /// 2x2 pooling, stride 2.
    Pool2,
    /// Spiking fully connected layer.
    Fc {
        units: usize,
    },
    Dropout {
        p: f64,
    },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSpec::Conv { channels, kernel } => write!(f, "{channels}C{kernel}"),
            LayerSpec::Pool2 => f.write_str("P2"),
            LayerSpec::Fc { units } => write!(f, "{units}"),
            LayerSpec::Dropout { p } => write!(f, "D{p}"),
        }
    }
}

fn parse_err(token: &str, reason: impl Into<String>) -> NetworkError {
    NetworkError::Parse {
        token: token.to_string(),
        reason: reason.into(),
    }
}

fn parse_count(token: &str, digits: &str) -> Result<usize> {
    match digits.parse::<usize>() {
        Ok(0) => Err(parse_err(token, "sizes must be positive")),
        Ok(n) => Ok(n),
        Err(_) => Err(parse_err(token, "expected <int>C<int>, P2 or <int>")),
    }
}

/// Parses a dash-separated structure such as `15C5-P2-40C5-P2-300`.
///
/// `<c>C<k>` is a spiking convolution, `P2` a 2x2 pooling and a bare integer
/// a spiking fully connected layer. A final fully connected layer with
/// `classes` units is appended unless the structure already ends with one.
pub fn parse_structure(text: &str, classes: usize) -> Result<Vec<LayerSpec>> {
    let text = text.trim();
    if text.is_empty() {
        return Err(parse_err(text, "empty structure"));
    }
    let mut layers = Vec::new();
    let mut seen_fc = false;
    for token in text.split('-') {
        let token = token.trim();
        let layer = if token.eq_ignore_ascii_case("p2") {
            LayerSpec::Pool2
        } else if let Some((c, k)) = token.split_once(['C', 'c']) {
            LayerSpec::Conv {
                channels: parse_count(token, c)?,
                kernel: parse_count(token, k)?,
            }
        } else if token.starts_with(['P', 'p']) {
            return Err(parse_err(token, "only 2x2 pooling (P2) is supported"));
        } else {
            LayerSpec::Fc {
                units: parse_count(token, token)?,
            }
        };
        match layer {
            LayerSpec::Fc { .. } => seen_fc = true,
            _ if seen_fc => {
                return Err(parse_err(
                    token,
                    "convolution and pooling must precede the fully connected layers",
                ))
            }
            _ => {}
        }
        layers.push(layer);
    }
    if classes == 0 {
        return Err(NetworkError::Spec("class count must be positive".into()));
    }
    if layers.last() != Some(&LayerSpec::Fc { units: classes }) {
        layers.push(LayerSpec::Fc { units: classes });
    }
    Ok(layers)
}

/// Padding of the main convolutions. Gate convolutions always keep the
/// spatial size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvPadding {
    #[default]
    Valid,
    Same,
    Fixed(usize),
}

impl ConvPadding {
    pub fn resolve(self, kernel: usize) -> Result<usize> {
        match self {
            ConvPadding::Valid => Ok(0),
            ConvPadding::Fixed(p) => Ok(p),
            ConvPadding::Same if kernel % 2 == 1 => Ok((kernel - 1) / 2),
            ConvPadding::Same => Err(NetworkError::Spec(format!(
                "same padding needs an odd kernel, got {kernel}"
            ))),
        }
    }
}

impl fmt::Display for ConvPadding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConvPadding::Valid => f.write_str("valid"),
            ConvPadding::Same => f.write_str("same"),
            ConvPadding::Fixed(p) => write!(f, "{p}"),
        }
    }
}

impl FromStr for ConvPadding {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "valid" => Ok(ConvPadding::Valid),
            "same" => Ok(ConvPadding::Same),
            n => n
                .parse()
                .map(ConvPadding::Fixed)
                .map_err(|_| format!("padding must be `valid`, `same` or an integer, got `{s}`")),
        }
    }
}

impl Serialize for ConvPadding {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ConvPadding {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?
            .parse()
            .map_err(serde::de::Error::custom)
    }
}

/// How input samples become per-timestep input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    /// Independent Bernoulli spike per pixel and timestep.
    #[default]
    Bernoulli,
    /// Real-valued pixels as input current at every timestep.
    Direct,
    /// Binned event-camera streams.
    Event,
}

impl fmt::Display for Encoding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Encoding::Bernoulli => "bernoulli",
            Encoding::Direct => "direct",
            Encoding::Event => "event",
        })
    }
}

/// When dropout masks are resampled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DropoutPolicy {
    /// One mask per sample for the whole rollout window.
    #[default]
    PerWindow,
    /// A fresh mask at every timestep.
    PerStep,
}

/// Parsed architecture plus everything that shapes its dynamics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    /// `[channels, height, width]` of one timestep of input.
    pub input_shape: [usize; 3],
    pub classes: usize,
    pub time_steps: usize,
    pub switches: Switches,
    /// Kernel size of both gate convolutions.
    pub gate_kernel: usize,
    pub conv_padding: ConvPadding,
    pub pooling: PoolKind,
    pub lif: LifParams,
    pub stop_gradient: StopGradient,
    pub encoding: Encoding,
    pub dropout_policy: DropoutPolicy,
    #[serde(default)]
    pub init: InitConfig,
}

/// Scales of the random parameter initialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    /// Multiplier on the `1/sqrt(fan_in)` bound of main weights and biases.
    pub weight_gain: f64,
    /// Initial bias of the self-feedback gate; the gate starts at
    /// `sigmoid(sfb_bias)` for a silent layer.
    pub sfb_bias: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            weight_gain: 1.0,
            sfb_bias: 0.0,
        }
    }
}

impl NetworkSpec {
    /// Spec with default dynamics for `structure` on the given input.
    pub fn new(
        structure: &str,
        input_shape: [usize; 3],
        classes: usize,
        time_steps: usize,
    ) -> Result<Self> {
        Ok(Self {
            layers: parse_structure(structure, classes)?,
            input_shape,
            classes,
            time_steps,
            switches: Switches::BOTH,
            gate_kernel: 5,
            conv_padding: ConvPadding::Valid,
            pooling: PoolKind::Avg,
            lif: LifParams::default(),
            stop_gradient: StopGradient::default(),
            encoding: Encoding::Bernoulli,
            dropout_policy: DropoutPolicy::PerWindow,
            init: InitConfig::default(),
        })
    }

    /// Inserts `Dropout(p)` at the end of every hidden spiking block (after
    /// its pooling, if one follows).
    pub fn with_dropout(mut self, p: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(NetworkError::DropoutProbability(p));
        }
        if p == 0.0 {
            return Ok(self);
        }
        let layers: Vec<LayerSpec> = self
            .layers
            .into_iter()
            .filter(|l| !matches!(l, LayerSpec::Dropout { .. }))
            .collect();
        let mut out = Vec::with_capacity(layers.len() * 2);
        for (i, layer) in layers.iter().enumerate() {
            out.push(*layer);
            let last = i + 1 == layers.len();
            let block_end = !matches!(layers.get(i + 1), Some(LayerSpec::Pool2));
            if !last && block_end {
                out.push(LayerSpec::Dropout { p });
            }
        }
        self.layers = out;
        Ok(self)
    }

    /// Canonical structure string (`15C5-P2-40C5-P2-300-10`), dropout
    /// excluded.
    pub fn structure(&self) -> String {
        self.layers
            .iter()
            .filter(|l| !matches!(l, LayerSpec::Dropout { .. }))
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join("-")
    }

    pub fn validate(&self) -> Result<()> {
        self.lif.validate()?;
        if self.time_steps == 0 {
            return Err(NetworkError::Spec(
                "simulation length must be positive".into(),
            ));
        }
        if self.input_shape.contains(&0) {
            return Err(NetworkError::Spec(format!(
                "input shape {:?} has an empty axis",
                self.input_shape
            )));
        }
        if (self.switches.sfbm || self.switches.beim) && self.gate_kernel.is_multiple_of(2) {
            return Err(NetworkError::Spec(format!(
                "gate kernel must be odd to keep the layer shape, got {}",
                self.gate_kernel
            )));
        }
        match self
            .layers
            .iter()
            .rev()
            .find(|l| !matches!(l, LayerSpec::Dropout { .. }))
        {
            Some(LayerSpec::Fc { units }) if *units == self.classes => {}
            _ => {
                return Err(NetworkError::Spec(format!(
                    "last layer must be fully connected with {} units",
                    self.classes
                )))
            }
        }
        if !(self.init.weight_gain.is_finite() && self.init.weight_gain > 0.0)
            || !self.init.sfb_bias.is_finite()
        {
            return Err(NetworkError::Spec(format!(
                "invalid initialization {:?}",
                self.init
            )));
        }
        for l in &self.layers {
            if let LayerSpec::Dropout { p } = l {
                if !(0.0..1.0).contains(p) {
                    return Err(NetworkError::DropoutProbability(*p));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(channels: usize, kernel: usize) -> LayerSpec {
        LayerSpec::Conv { channels, kernel }
    }

    fn fc(units: usize) -> LayerSpec {
        LayerSpec::Fc { units }
    }

    #[test]
    fn parses_reference_structures() {
        assert_eq!(
            parse_structure("15C5-P2-40C5-P2-300", 10).unwrap(),
            vec![
                conv(15, 5),
                LayerSpec::Pool2,
                conv(40, 5),
                LayerSpec::Pool2,
                fc(300),
                fc(10)
            ]
        );
        assert_eq!(
            parse_structure("12C5-P2-64C5-p2", 10).unwrap(),
            vec![
                conv(12, 5),
                LayerSpec::Pool2,
                conv(64, 5),
                LayerSpec::Pool2,
                fc(10)
            ]
        );
        assert_eq!(parse_structure("300", 10).unwrap(), vec![fc(300), fc(10)]);
        assert_eq!(
            parse_structure("300-10", 10).unwrap(),
            vec![fc(300), fc(10)]
        );
    }

    #[test]
    fn malformed_tokens_are_cited() {
        for (text, bad) in [
            ("15C5-X2-300", "X2"),
            ("15C-P2", "15C"),
            ("P3", "P3"),
            ("300-15C5", "15C5"),
            ("0", "0"),
        ] {
            match parse_structure(text, 10) {
                Err(NetworkError::Parse { token, .. }) => assert_eq!(token, bad, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
        assert!(parse_structure("  ", 10).is_err());
    }

    #[test]
    fn dropout_goes_after_each_hidden_block() {
        let spec = NetworkSpec::new("128C3-P2-256C3-P2-1024", [3, 32, 32], 10, 4)
            .unwrap()
            .with_dropout(0.2)
            .unwrap();
        let d = LayerSpec::Dropout { p: 0.2 };
        assert_eq!(
            spec.layers,
            vec![
                conv(128, 3),
                LayerSpec::Pool2,
                d,
                conv(256, 3),
                LayerSpec::Pool2,
                d,
                fc(1024),
                d,
                fc(10)
            ]
        );
        assert_eq!(spec.structure(), "128C3-P2-256C3-P2-1024-10");
        assert!(NetworkSpec::new("300", [1, 2, 2], 10, 1)
            .unwrap()
            .with_dropout(1.0)
            .is_err());
    }

    #[test]
    fn padding_round_trips_through_text() {
        for p in [ConvPadding::Valid, ConvPadding::Same, ConvPadding::Fixed(3)] {
            assert_eq!(p.to_string().parse::<ConvPadding>().unwrap(), p);
        }
        assert!(ConvPadding::Same.resolve(4).is_err());
        assert_eq!(ConvPadding::Same.resolve(5).unwrap(), 2);
    }
}
