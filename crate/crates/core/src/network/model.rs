use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::readout::sample_dropout_mask;
use super::{DropoutPolicy, LayerSpec, NetworkError, NetworkSpec, Result};
use crate::autograd::{Tape, Var};
use crate::neuron::{lif_step, GateVars, LayerGates, LifState, StepConfig, StepSite, Switches};
use crate::tensor::{Conv2dGeometry, Element, PoolKind, Tensor};

/// RNG stream used for weight initialization.
pub const INIT_STREAM: u64 = 1;

/// Input for one rollout: `[T, B, ...sample shape]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeBatch<T> {
    data: Tensor<T>,
}

impl<T: Element> SpikeBatch<T> {
    pub fn new(data: Tensor<T>) -> Result<Self> {
        if data.rank() < 3 {
            return Err(NetworkError::Input(format!(
                "expected [T, B, ...] input, got shape {:?}",
                data.shape()
            )));
        }
        Ok(Self { data })
    }

    /// Stacks per-timestep `[B, ...]` tensors.
    pub fn from_steps(steps: &[Tensor<T>]) -> Result<Self> {
        let data = Tensor::stack(steps).map_err(|e| NetworkError::Input(e.to_string()))?;
        Self::new(data)
    }

    pub fn time_steps(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn batch(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.data.shape()[2..]
    }

    /// Input at timestep `t` (0-based), shaped `[B, ...]`.
    pub fn step(&self, t: usize) -> Tensor<T> {
        self.data.outer(t)
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.data
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedParam<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Learnable tensors of a network in a fixed order. A parameter's position
/// is also its id on the tape.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<NamedParam<T>>,
}

impl<T: Element> ParamStore<T> {
    /// Appends a parameter and returns its id.
    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        let name = name.into();
        self.params.push(NamedParam { name, value });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedParam<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut NamedParam<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
    }

    pub fn by_id(&self, id: usize) -> &NamedParam<T> {
        &self.params[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut NamedParam<T> {
        &mut self.params[id]
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Same names and shapes, element type converted through `f64`.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| NamedParam {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvGates {
    geometry: Conv2dGeometry,
    sfb: Option<usize>,
    ei: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
enum Block {
    Conv {
        layer: usize,
        geometry: Conv2dGeometry,
        weight: usize,
        gates: Option<ConvGates>,
        shape: [usize; 3],
    },
    Pool {
        layer: usize,
    },
    Fc {
        layer: usize,
        weight: usize,
        units: usize,
    },
    Dropout {
        layer: usize,
        p: f64,
        shape: Shape,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Shape {
    Spatial([usize; 3]),
    Flat(usize),
}

impl Shape {
    fn batched(self, batch: usize) -> Vec<usize> {
        match self {
            Shape::Spatial([c, h, w]) => vec![batch, c, h, w],
            Shape::Flat(n) => vec![batch, n],
        }
    }

    fn numel(self) -> usize {
        match self {
            Shape::Spatial(s) => s.iter().product(),
            Shape::Flat(n) => n,
        }
    }
}

/// Membrane potential, emitted spikes and gate activations of one spiking
/// layer at one timestep.
#[derive(Debug, Clone, Copy)]
pub struct StepTrace {
    pub v: Var,
    pub spikes: Var,
    pub sfb: Option<Var>,
    pub ei: Option<Var>,
}

/// Per-timestep traces of one spiking layer (`layer` is its position in
/// the structure string).
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub layer: usize,
    pub steps: Vec<StepTrace>,
}

/// Tape handles produced by [`Network::rollout`].
#[derive(Debug, Clone)]
pub struct Rollout {
    /// Output spikes `O_t`, each `[B, classes]`.
    pub outputs: Vec<Var>,
    /// `(1/T) Σ O_t`, `[B, classes]`.
    pub mean_rate: Var,
    pub traces: Vec<LayerTrace>,
}

/// Materialized trajectory of one spiking layer; every tensor is `[T, B, ...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerRecord<T> {
    pub layer: usize,
    pub v: Tensor<T>,
    pub spikes: Tensor<T>,
    pub sfb: Option<Tensor<T>>,
    pub ei: Option<Tensor<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutRecord<T> {
    pub layers: Vec<LayerRecord<T>>,
    /// `[T, B, classes]`.
    pub output: Tensor<T>,
    /// `[B, classes]`.
    pub mean_rate: Tensor<T>,
}

impl Rollout {
    /// Copies every traced value off the tape.
    pub fn record<T: Element>(&self, tape: &Tape<T>) -> Result<RolloutRecord<T>> {
        let stack = |vars: &mut dyn Iterator<Item = Var>| -> Result<Tensor<T>> {
            let parts: Vec<Tensor<T>> = vars.map(|v| tape.value(v).clone()).collect();
            Tensor::stack(&parts).map_err(|e| NetworkError::Autograd(e.into()))
        };
        let mut layers = Vec::with_capacity(self.traces.len());
        for trace in &self.traces {
            let s = &trace.steps;
            let sfb = match s.first().and_then(|x| x.sfb) {
                Some(_) => Some(stack(&mut s.iter().filter_map(|x| x.sfb))?),
                None => None,
            };
            let ei = match s.first().and_then(|x| x.ei) {
                Some(_) => Some(stack(&mut s.iter().filter_map(|x| x.ei))?),
                None => None,
            };
            layers.push(LayerRecord {
                layer: trace.layer,
                v: stack(&mut s.iter().map(|x| x.v))?,
                spikes: stack(&mut s.iter().map(|x| x.spikes))?,
                sfb,
                ei,
            });
        }
        Ok(RolloutRecord {
            layers,
            output: stack(&mut self.outputs.iter().copied())?,
            mean_rate: tape.value(self.mean_rate).clone(),
        })
    }
}

/// A spiking network: its spec, parameters and the resolved layer plan.
#[derive(Debug, Clone)]
pub struct Network<T> {
    spec: NetworkSpec,
    params: ParamStore<T>,
    blocks: Vec<Block>,
}

fn uniform_tensor<T: Element>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    gain: f64,
) -> Tensor<T> {
    let bound = gain / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::from_f64(rng.random_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape.to_vec(), data).expect("length matches shape")
}

fn layer_err(index: usize, e: impl std::error::Error + Send + Sync + 'static) -> NetworkError {
    NetworkError::Layer {
        index,
        source: Box::new(e),
    }
}

impl<T: Element> Network<T> {
    /// Builds the layer plan and initializes parameters from `seed`.
    ///
    /// Layers are numbered by their position in the structure string
    /// (dropout does not count), and parameters are named after that
    /// number: `layer0.weight`, `layer0.sfb.bias`, and so on.
    ///
    /// Main weights and biases are uniform in `±gain/sqrt(fan_in)` with the
    /// gain from [`InitConfig`]. Gate weights are uniform in
    /// `±1/sqrt(fan_in)`; the E/I gate bias starts at zero and the
    /// self-feedback gate bias at the configured constant.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(INIT_STREAM);
        let gain = spec.init.weight_gain;
        let mut params = ParamStore::default();
        let mut blocks = Vec::with_capacity(spec.layers.len());
        let mut shape = Shape::Spatial(spec.input_shape);

        let mut next = 0;
        for ls in &spec.layers {
            let layer = next;
            if !matches!(ls, LayerSpec::Dropout { .. }) {
                next += 1;
            }
            match *ls {
                LayerSpec::Conv { channels, kernel } => {
                    let [c, h, w] = match shape {
                        Shape::Spatial(s) => s,
                        Shape::Flat(_) => {
                            return Err(NetworkError::Spec(format!(
                                "layer {layer}: convolution after a fully connected layer"
                            )))
                        }
                    };
                    let padding = spec.conv_padding.resolve(kernel)?;
                    let geometry = Conv2dGeometry::new(c, channels, kernel, 1, padding);
                    let oh = geometry.output_extent(h).map_err(|e| layer_err(layer, e))?;
                    let ow = geometry.output_extent(w).map_err(|e| layer_err(layer, e))?;
                    let fan_in = c * kernel * kernel;
                    let weight = params.push(
                        format!("layer{layer}.weight"),
                        uniform_tensor(&mut rng, &geometry.weight_shape(), fan_in, gain),
                    );
                    params.push(
                        format!("layer{layer}.bias"),
                        uniform_tensor(&mut rng, &[channels], fan_in, gain),
                    );

                    let gates = if spec.switches.sfbm || spec.switches.beim {
                        let gk = spec.gate_kernel;
                        let geom = Conv2dGeometry::same(channels, channels, gk)
                            .map_err(|e| layer_err(layer, e))?;
                        let mut gate = |name: &str| {
                            let id = params.push(
                                format!("layer{layer}.{name}.weight"),
                                uniform_tensor(
                                    &mut rng,
                                    &geom.weight_shape(),
                                    channels * gk * gk,
                                    1.0,
                                ),
                            );
                            let bias = if name == "sfb" {
                                spec.init.sfb_bias
                            } else {
                                0.0
                            };
                            params.push(
                                format!("layer{layer}.{name}.bias"),
                                Tensor::full([channels], T::from_f64(bias)),
                            );
                            id
                        };
                        let sfb = spec.switches.sfbm.then(|| gate("sfb"));
                        let ei = spec.switches.beim.then(|| gate("ei"));
                        Some(ConvGates {
                            geometry: geom,
                            sfb,
                            ei,
                        })
                    } else {
                        None
                    };
                    shape = Shape::Spatial([channels, oh, ow]);
                    blocks.push(Block::Conv {
                        layer,
                        geometry,
                        weight,
                        gates,
                        shape: [channels, oh, ow],
                    });
                }
                LayerSpec::Pool2 => {
                    let [c, h, w] = match shape {
                        Shape::Spatial(s) => s,
                        Shape::Flat(_) => {
                            return Err(NetworkError::Spec(format!(
                                "layer {layer}: pooling after a fully connected layer"
                            )))
                        }
                    };
                    if h % 2 != 0 || w % 2 != 0 {
                        return Err(NetworkError::Spec(format!(
                            "layer {layer}: 2x2 pooling needs even extents, got {h}x{w}"
                        )));
                    }
                    shape = Shape::Spatial([c, h / 2, w / 2]);
                    blocks.push(Block::Pool { layer });
                }
                LayerSpec::Fc { units } => {
                    let fan_in = shape.numel();
                    let weight = params.push(
                        format!("layer{layer}.weight"),
                        uniform_tensor(&mut rng, &[units, fan_in], fan_in, gain),
                    );
                    params.push(
                        format!("layer{layer}.bias"),
                        uniform_tensor(&mut rng, &[units], fan_in, gain),
                    );
                    shape = Shape::Flat(units);
                    blocks.push(Block::Fc {
                        layer,
                        weight,
                        units,
                    });
                }
                LayerSpec::Dropout { p } => blocks.push(Block::Dropout {
                    layer: layer.saturating_sub(1),
                    p,
                    shape,
                }),
            }
        }
        Ok(Self {
            spec,
            params,
            blocks,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Replaces every parameter. Names and shapes must match.
    pub fn set_params(&mut self, params: ParamStore<T>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(NetworkError::Spec(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (mine, theirs) in self.params.iter().zip(params.iter()) {
            if mine.name != theirs.name || mine.value.shape() != theirs.value.shape() {
                return Err(NetworkError::Spec(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    theirs.name,
                    theirs.value.shape(),
                    mine.name,
                    mine.value.shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    /// Sets every bias, gate biases included, to zero.
    pub fn zero_biases(&mut self) {
        for p in self.params.iter_mut() {
            if p.name.ends_with(".bias") {
                p.value = Tensor::zeros(p.value.shape().to_vec());
            }
        }
    }

    /// Structure positions of the spiking layers.
    pub fn spiking_layers(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .filter_map(|b| match b {
                Block::Conv { layer, .. } | Block::Fc { layer, .. } => Some(*layer),
                _ => None,
            })
            .collect()
    }

    /// Simulates `spec.time_steps` steps on `input`.
    ///
    /// With `track_grad` the parameters enter the tape as params (ids are
    /// their store positions), otherwise as constants. Dropout is applied
    /// only when `dropout_rng` is given.
    pub fn rollout(
        &self,
        tape: &mut Tape<T>,
        input: &SpikeBatch<T>,
        track_grad: bool,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Rollout> {
        let spec = &self.spec;
        if input.time_steps() != spec.time_steps {
            return Err(NetworkError::Input(format!(
                "input has {} timesteps, network simulates {}",
                input.time_steps(),
                spec.time_steps
            )));
        }
        if input.sample_shape() != spec.input_shape {
            return Err(NetworkError::Input(format!(
                "sample shape {:?} does not match the network input {:?}",
                input.sample_shape(),
                spec.input_shape
            )));
        }
        let batch = input.batch();

        let mut vars = Vec::with_capacity(self.params.len());
        for (id, p) in self.params.iter().enumerate() {
            let v = if track_grad {
                tape.param(p.value.clone(), id)
            } else {
                tape.constant(p.value.clone())
            };
            vars.push(v?);
        }

        let conv_cfg = StepConfig {
            lif: spec.lif,
            switches: spec.switches,
            stop_gradient: spec.stop_gradient,
        };
        let fc_cfg = StepConfig {
            switches: Switches::BASELINE,
            ..conv_cfg
        };

        let mut states = Vec::with_capacity(self.blocks.len());
        let mut layer_gates = Vec::with_capacity(self.blocks.len());
        let mut traces = Vec::new();
        for block in &self.blocks {
            let (state, gates) = match *block {
                Block::Conv {
                    layer,
                    shape,
                    gates,
                    ..
                } => {
                    let s = LifState::initial(tape, &Shape::Spatial(shape).batched(batch))?;
                    let g = gates.map(|g| LayerGates {
                        geometry: g.geometry,
                        sfb: g.sfb.map(|id| GateVars {
                            weight: vars[id],
                            bias: vars[id + 1],
                        }),
                        ei: g.ei.map(|id| GateVars {
                            weight: vars[id],
                            bias: vars[id + 1],
                        }),
                    });
                    traces.push(LayerTrace {
                        layer,
                        steps: Vec::with_capacity(spec.time_steps),
                    });
                    (Some(s), g)
                }
                Block::Fc { layer, units, .. } => {
                    let s = LifState::initial(tape, &[batch, units])?;
                    traces.push(LayerTrace {
                        layer,
                        steps: Vec::with_capacity(spec.time_steps),
                    });
                    (Some(s), None)
                }
                _ => (None, None),
            };
            states.push(state);
            layer_gates.push(gates);
        }

        let mut masks: Vec<Option<Var>> = vec![None; self.blocks.len()];
        let mut outputs = Vec::with_capacity(spec.time_steps);
        for t in 0..spec.time_steps {
            let resample = t == 0 || spec.dropout_policy == DropoutPolicy::PerStep;
            if let (true, Some(rng)) = (resample, dropout_rng.as_deref_mut()) {
                for (slot, block) in masks.iter_mut().zip(&self.blocks) {
                    if let Block::Dropout { p, shape, .. } = *block {
                        if p > 0.0 {
                            let mask = sample_dropout_mask(rng, p, &shape.batched(batch))?;
                            *slot = Some(tape.constant(mask)?);
                        }
                    }
                }
            }

            let mut x = tape.constant(input.step(t))?;
            let mut trace_idx = 0;
            for (bi, block) in self.blocks.iter().enumerate() {
                let (layer, current, cfg) = match *block {
                    Block::Conv {
                        layer,
                        geometry,
                        weight,
                        ..
                    } => {
                        let cur = tape
                            .conv2d(x, vars[weight], vars[weight + 1], geometry)
                            .map_err(|e| layer_err(layer, e))?;
                        (layer, cur, &conv_cfg)
                    }
                    Block::Fc { layer, weight, .. } => {
                        let cur = tape
                            .linear(x, vars[weight], vars[weight + 1])
                            .map_err(|e| layer_err(layer, e))?;
                        (layer, cur, &fc_cfg)
                    }
                    Block::Pool { layer } => {
                        x = match spec.pooling {
                            PoolKind::Avg => tape.avg_pool2(x),
                            PoolKind::Max => tape.max_pool2(x),
                        }
                        .map_err(|e| layer_err(layer, e))?;
                        continue;
                    }
                    Block::Dropout { layer, .. } => {
                        if let Some(mask) = masks[bi] {
                            x = tape.mul(x, mask).map_err(|e| layer_err(layer, e))?;
                        }
                        continue;
                    }
                };
                let state = states[bi].expect("spiking block has a state");
                let step = lif_step(
                    tape,
                    state,
                    current,
                    cfg,
                    layer_gates[bi].as_ref(),
                    StepSite { layer, t },
                )?;
                states[bi] = Some(step.state);
                traces[trace_idx].steps.push(StepTrace {
                    v: step.state.v,
                    spikes: step.state.delta,
                    sfb: step.sfb,
                    ei: step.ei,
                });
                trace_idx += 1;
                x = step.state.delta;
            }
            outputs.push(x);
        }

        let mut total = outputs[0];
        for &o in &outputs[1..] {
            total = tape.add(total, o)?;
        }
        let inv_t = T::one() / T::from_usize(spec.time_steps);
        let mean_rate = tape.scale(total, inv_t)?;
        Ok(Rollout {
            outputs,
            mean_rate,
            traces,
        })
    }

    /// Rollout without gradient tracking or dropout, returning the record.
    pub fn simulate(&self, input: &SpikeBatch<T>) -> Result<RolloutRecord<T>> {
        let mut tape = Tape::new();
        let rollout = self.rollout(&mut tape, input, false, None)?;
        rollout.record(&tape)
    }
}
