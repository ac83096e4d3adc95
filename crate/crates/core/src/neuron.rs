//! Leaky integrate-and-fire cell with the two learned gates.
//!
//! One step of a layer, given input current `I_t` and the previous state
//! `(V_{t-1}, δ_{t-1})`:
//!
//! ```text
//! SFB_t = sigmoid(conv_sfb(δ_{t-1}))                   (self-feedback, optional)
//! V_t   = λ · V_{t-1} · (1 - r(δ_{t-1})) + SFB_t ⊙ I_t
//! EI_t  = sign(conv_ei(V_t))                           (E/I gate, optional)
//! δ_t   = EI_t ⊙ H(V_t - V_th)
//! ```
//!
//! with `λ = 1 - 1/τ`, reset potential 0, and `r(δ) = δ` or `|δ|` depending
//! on [`ResetMode`]. Both gate convolutions keep the layer's spatial shape.

use serde::{Deserialize, Serialize};

use crate::autograd::{AutogradError, SpikeFnConfig, Tape, Var};
use crate::tensor::{Conv2dGeometry, Element, Tensor};

/// Membrane potential after a reset.
pub const V_RESET: f64 = 0.0;

#[derive(Debug, thiserror::Error)]
pub enum NeuronError {
    #[error("layer {layer}, timestep {t}: membrane potential is not finite")]
    NonFiniteMembrane { layer: usize, t: usize },
    #[error("layer {layer}: {gate} gate is switched on but has no parameters")]
    MissingGate { layer: usize, gate: &'static str },
    #[error("layer {layer}, timestep {t}: {source}")]
    Step {
        layer: usize,
        t: usize,
        #[source]
        source: AutogradError,
    },
    #[error("invalid neuron parameters: {0}")]
    Params(String),
}

/// How a previous spike scales the retained membrane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ResetMode {
    /// Multiply by `1 - δ`; an inhibitory spike (δ = -1) doubles the kept
    /// potential.
    Literal,
    /// Multiply by `1 - |δ|`; any spike resets.
    #[default]
    Magnitude,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Switches {
    pub sfbm: bool,
    pub beim: bool,
}

impl Switches {
    pub const BASELINE: Switches = Switches {
        sfbm: false,
        beim: false,
    };
    pub const SFBM: Switches = Switches {
        sfbm: true,
        beim: false,
    };
    pub const BEIM: Switches = Switches {
        sfbm: false,
        beim: true,
    };
    pub const BOTH: Switches = Switches {
        sfbm: true,
        beim: true,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    /// Membrane time constant in steps; must exceed 1.
    pub tau: f64,
    pub spike: SpikeFnConfig,
    pub reset: ResetMode,
}

impl Default for LifParams {
    fn default() -> Self {
        Self {
            tau: 2.0,
            spike: SpikeFnConfig::default(),
            reset: ResetMode::Magnitude,
        }
    }
}

impl LifParams {
    /// `λ = 1 - 1/τ`.
    pub fn leak(&self) -> f64 {
        1.0 - 1.0 / self.tau
    }

    pub fn validate(&self) -> Result<(), NeuronError> {
        if !(self.tau > 1.0) {
            return Err(NeuronError::Params(format!(
                "tau must exceed 1, got {}",
                self.tau
            )));
        }
        self.spike.validate().map_err(NeuronError::Params)
    }
}

/// Where a gradient may be cut for experiments. Both default to `false`:
/// gradients flow through every use of the previous spikes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct StopGradient {
    /// Detach `δ_{t-1}` in the reset factor.
    pub reset: bool,
    /// Detach `δ_{t-1}` as input of the self-feedback gate.
    pub feedback: bool,
}

/// Weights and bias of one gate convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct GateConv<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

/// Learnable parameters of the self-feedback and E/I gates of a layer.
/// A gate is `None` when its mechanism is off.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams<T> {
    pub geometry: Conv2dGeometry,
    pub sfb: Option<GateConv<T>>,
    pub ei: Option<GateConv<T>>,
}

/// Tape handles for a gate convolution.
#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub weight: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerGates {
    pub geometry: Conv2dGeometry,
    pub sfb: Option<GateVars>,
    pub ei: Option<GateVars>,
}

impl<T: Element> GateParams<T> {
    /// Puts the gate tensors on `tape` as constants (for evaluation) or
    /// params with the given ids.
    pub fn to_tape(
        &self,
        tape: &mut Tape<T>,
        ids: Option<(usize, usize)>,
    ) -> Result<LayerGates, AutogradError> {
        let mut put = |g: &GateConv<T>, id: Option<usize>| -> Result<GateVars, AutogradError> {
            Ok(match id {
                Some(id) => GateVars {
                    weight: tape.param(g.weight.clone(), id)?,
                    bias: tape.param(g.bias.clone(), id + 1)?,
                },
                None => GateVars {
                    weight: tape.constant(g.weight.clone())?,
                    bias: tape.constant(g.bias.clone())?,
                },
            })
        };
        let sfb = match &self.sfb {
            Some(g) => Some(put(g, ids.map(|i| i.0))?),
            None => None,
        };
        let ei = match &self.ei {
            Some(g) => Some(put(g, ids.map(|i| i.1))?),
            None => None,
        };
        Ok(LayerGates {
            geometry: self.geometry,
            sfb,
            ei,
        })
    }
}

/// Membrane potential and last emitted spikes of one layer.
#[derive(Debug, Clone, Copy)]
pub struct LifState {
    pub v: Var,
    pub delta: Var,
}

impl LifState {
    /// `V_0 = 0`, `δ_0 = 0`.
    pub fn initial<T: Element>(tape: &mut Tape<T>, shape: &[usize]) -> Result<Self, AutogradError> {
        Ok(Self {
            v: tape.constant(Tensor::full(shape.to_vec(), T::from_f64(V_RESET)))?,
            delta: tape.constant(Tensor::zeros(shape.to_vec()))?,
        })
    }
}

/// `sigmoid(conv(δ_{t-1}))`, shaped like the layer output.
pub fn sfb_gate<T: Element>(
    tape: &mut Tape<T>,
    delta_prev: Var,
    gate: GateVars,
    geometry: Conv2dGeometry,
) -> Result<Var, AutogradError> {
    let pre = tape.conv2d(delta_prev, gate.weight, gate.bias, geometry)?;
    tape.sigmoid(pre)
}

/// `sign(conv(V_t))`: +1 marks an excitatory neuron, -1 an inhibitory one.
pub fn ei_gate<T: Element>(
    tape: &mut Tape<T>,
    v: Var,
    gate: GateVars,
    geometry: Conv2dGeometry,
    spike: SpikeFnConfig,
) -> Result<Var, AutogradError> {
    let pre = tape.conv2d(v, gate.weight, gate.bias, geometry)?;
    tape.sign(pre, spike)
}

/// Identifies a step in error messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepSite {
    pub layer: usize,
    pub t: usize,
}

/// Everything about a layer's dynamics that is fixed across timesteps.
#[derive(Debug, Clone, Copy)]
pub struct StepConfig {
    pub lif: LifParams,
    pub switches: Switches,
    pub stop_gradient: StopGradient,
}

/// Result of [`lif_step`]: the new state (its `delta` is the emitted spike
/// tensor `δ_t`) and the gate activations, when the gates are on.
#[derive(Debug, Clone, Copy)]
pub struct LifStep {
    pub state: LifState,
    pub sfb: Option<Var>,
    pub ei: Option<Var>,
}

/// Advances one layer by one timestep.
pub fn lif_step<T: Element>(
    tape: &mut Tape<T>,
    state: LifState,
    current: Var,
    cfg: &StepConfig,
    gates: Option<&LayerGates>,
    site: StepSite,
) -> Result<LifStep, NeuronError> {
    let wrap = |source| NeuronError::Step {
        layer: site.layer,
        t: site.t,
        source,
    };
    let gate = |g: Option<&LayerGates>, pick: fn(&LayerGates) -> Option<GateVars>, name| {
        g.and_then(|g| pick(g).map(|v| (v, g.geometry)))
            .ok_or(NeuronError::MissingGate {
                layer: site.layer,
                gate: name,
            })
    };

    let mut sfb = None;
    let gated = if cfg.switches.sfbm {
        let (vars, geom) = gate(gates, |g| g.sfb, "self-feedback")?;
        let fb_in = if cfg.stop_gradient.feedback {
            tape.detach(state.delta).map_err(wrap)?
        } else {
            state.delta
        };
        let g = sfb_gate(tape, fb_in, vars, geom).map_err(wrap)?;
        sfb = Some(g);
        tape.mul(g, current).map_err(wrap)?
    } else {
        current
    };

    let reset_in = if cfg.stop_gradient.reset {
        tape.detach(state.delta).map_err(wrap)?
    } else {
        state.delta
    };
    let v = match tape.membrane_update(
        state.v,
        reset_in,
        gated,
        T::from_f64(cfg.lif.leak()),
        cfg.lif.reset,
    ) {
        Ok(v) => v,
        Err(AutogradError::NonFinite {
            op: "membrane_update",
            ..
        }) => {
            return Err(NeuronError::NonFiniteMembrane {
                layer: site.layer,
                t: site.t,
            })
        }
        Err(e) => return Err(wrap(e)),
    };

    let raw = tape.spike(v, cfg.lif.spike).map_err(wrap)?;
    let mut ei = None;
    let delta = if cfg.switches.beim {
        let (vars, geom) = gate(gates, |g| g.ei, "excitatory/inhibitory")?;
        let e = ei_gate(tape, v, vars, geom, cfg.lif.spike).map_err(wrap)?;
        ei = Some(e);
        tape.mul(e, raw).map_err(wrap)?
    } else {
        raw
    };
    Ok(LifStep {
        state: LifState { v, delta },
        sfb,
        ei,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_layer(tape: &mut Tape<f64>, v: f64, d: f64) -> LifState {
        LifState {
            v: tape
                .constant(Tensor::from_vec([1, 1, 1, 1], vec![v]).unwrap())
                .unwrap(),
            delta: tape
                .constant(Tensor::from_vec([1, 1, 1, 1], vec![d]).unwrap())
                .unwrap(),
        }
    }

    fn plain(reset: ResetMode) -> StepConfig {
        StepConfig {
            lif: LifParams {
                reset,
                ..LifParams::default()
            },
            switches: Switches::BASELINE,
            stop_gradient: StopGradient::default(),
        }
    }

    const SITE: StepSite = StepSite { layer: 0, t: 1 };

    fn step(v: f64, d: f64, i: f64, reset: ResetMode) -> (f64, f64) {
        let mut tape = Tape::new();
        let s = scalar_layer(&mut tape, v, d);
        let cur = tape
            .constant(Tensor::from_vec([1, 1, 1, 1], vec![i]).unwrap())
            .unwrap();
        let out = lif_step(&mut tape, s, cur, &plain(reset), None, SITE)
            .unwrap()
            .state;
        (tape.value(out.v).item(), tape.value(out.delta).item())
    }

    #[test]
    fn substitution_example() {
        let (v, s) = step(0.4, 0.0, 0.3, ResetMode::Magnitude);
        assert_eq!(v, 0.5);
        assert_eq!(s, 1.0);
    }

    #[test]
    fn positive_spike_resets_fully() {
        for v0 in [-3.0, 0.2, 7.5] {
            let (v, _) = step(v0, 1.0, 0.0, ResetMode::Magnitude);
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn negative_spike_under_both_reset_modes() {
        assert_eq!(step(0.4, -1.0, 0.0, ResetMode::Literal).0, 0.4);
        assert_eq!(step(0.4, -1.0, 0.0, ResetMode::Magnitude).0, 0.0);
    }

    #[test]
    fn missing_gate_is_an_error() {
        let mut tape = Tape::new();
        let s = scalar_layer(&mut tape, 0.0, 0.0);
        let cur = tape.constant(Tensor::zeros([1, 1, 1, 1])).unwrap();
        let cfg = StepConfig {
            switches: Switches::SFBM,
            ..plain(ResetMode::Magnitude)
        };
        let err = lif_step(&mut tape, s, cur, &cfg, None, SITE).unwrap_err();
        assert!(matches!(err, NeuronError::MissingGate { .. }));
    }

    #[test]
    fn huge_membrane_reports_layer_and_step() {
        let mut tape = Tape::new();
        let s = scalar_layer(&mut tape, f64::MAX, 0.0);
        let cur = tape
            .constant(Tensor::from_vec([1, 1, 1, 1], vec![f64::MAX]).unwrap())
            .unwrap();
        let cfg = StepConfig {
            lif: LifParams {
                tau: 1e300,
                ..LifParams::default()
            },
            ..plain(ResetMode::Magnitude)
        };
        let err = lif_step(&mut tape, s, cur, &cfg, None, StepSite { layer: 2, t: 7 }).unwrap_err();
        assert!(
            matches!(err, NeuronError::NonFiniteMembrane { layer: 2, t: 7 }),
            "{err}"
        );
    }

    fn gate_conv(c: usize, k: usize, w: f64, b: f64) -> GateConv<f64> {
        GateConv {
            weight: Tensor::full([c, c, k, k], w),
            bias: Tensor::full([c], b),
        }
    }

    #[test]
    fn sfb_gate_examples() {
        let geom = Conv2dGeometry::same(2, 2, 3).unwrap();
        let mut tape = Tape::new();
        let gp = GateParams {
            geometry: geom,
            sfb: Some(gate_conv(2, 3, 0.3, 0.0)),
            ei: None,
        };
        let gv = gp.to_tape(&mut tape, None).unwrap();
        let zeros = tape.constant(Tensor::zeros([1, 2, 4, 4])).unwrap();
        let g = sfb_gate(&mut tape, zeros, gv.sfb.unwrap(), geom).unwrap();
        assert!(tape.value(g).data().iter().all(|&x| x == 0.5));

        let gp = GateParams {
            geometry: geom,
            sfb: Some(gate_conv(2, 3, 0.0, 1.5)),
            ei: None,
        };
        let gv = gp.to_tape(&mut tape, None).unwrap();
        let ones = tape.constant(Tensor::full([1, 2, 4, 4], 1.0)).unwrap();
        let g = sfb_gate(&mut tape, ones, gv.sfb.unwrap(), geom).unwrap();
        let expected = 1.0 / (1.0 + (-1.5f64).exp());
        assert!(tape.value(g).data().iter().all(|&x| x == expected));
    }

    #[test]
    fn ei_gate_examples() {
        let geom = Conv2dGeometry::same(1, 1, 1).unwrap();
        let cfg = SpikeFnConfig::default();
        let mut tape = Tape::new();
        let gp = GateParams {
            geometry: geom,
            sfb: None,
            ei: Some(gate_conv(1, 1, 1.0, 0.0)),
        };
        let gv = gp.to_tape(&mut tape, None).unwrap().ei.unwrap();
        let v = tape
            .constant(Tensor::from_vec([1, 1, 1, 2], vec![0.3, -0.3]).unwrap())
            .unwrap();
        let e = ei_gate(&mut tape, v, gv, geom, cfg).unwrap();
        assert_eq!(tape.value(e).data(), &[1.0, -1.0]);

        let gp = GateParams {
            geometry: geom,
            sfb: None,
            ei: Some(gate_conv(1, 1, 0.0, -1.0)),
        };
        let gv = gp.to_tape(&mut tape, None).unwrap().ei.unwrap();
        let e = ei_gate(&mut tape, v, gv, geom, cfg).unwrap();
        assert_eq!(tape.value(e).data(), &[-1.0, -1.0]);
    }

    #[test]
    fn tau_must_exceed_one() {
        assert!(LifParams {
            tau: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert_eq!(LifParams::default().leak(), 0.5);
    }
}
