//! Straightforward scalar-loop simulator of the network dynamics.
//!
//! Every sample, neuron and timestep is evaluated with plain nested loops
//! and no shared kernels, in the same arithmetic order the engine uses.
//! Tests compare the engine's rollout against it bit for bit. Dropout
//! layers are skipped (evaluation mode).

#![allow(clippy::needless_range_loop)]

use crate::autograd::SpikeMode;
use crate::network::{LayerSpec, NetworkSpec, ParamStore};
use crate::neuron::{LifParams, ResetMode};
use crate::tensor::{PoolKind, Tensor};

/// One spiking layer's trajectory: `v[t][b]` and `spikes[t][b]` are the
/// flattened per-sample values at timestep `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceLayer {
    pub layer: usize,
    pub v: Vec<Vec<Vec<f64>>>,
    pub spikes: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRecord {
    pub layers: Vec<ReferenceLayer>,
    /// `output[t][b][class]`.
    pub output: Vec<Vec<Vec<f64>>>,
    /// `mean_rate[b][class]`.
    pub mean_rate: Vec<Vec<f64>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn heaviside(v: f64, lif: &LifParams) -> f64 {
    match lif.spike.mode {
        SpikeMode::Hard => {
            if v >= lif.spike.v_th {
                1.0
            } else {
                0.0
            }
        }
        SpikeMode::Relaxed => {
            let w = lif.spike.window;
            (v - lif.spike.v_th + w).max(0.0).min(w + w)
        }
    }
}

fn sign(x: f64, lif: &LifParams) -> f64 {
    match lif.spike.mode {
        SpikeMode::Hard => {
            if x >= 0.0 {
                1.0
            } else {
                -1.0
            }
        }
        SpikeMode::Relaxed => x.max(-lif.spike.window).min(lif.spike.window),
    }
}

fn reset_factor(delta: f64, mode: ResetMode) -> f64 {
    match mode {
        ResetMode::Literal => 1.0 - delta,
        ResetMode::Magnitude => 1.0 - delta.abs(),
    }
}

/// Cross-correlation of one `[c, h, w]` sample.
fn conv(
    x: &[f64],
    [c, h, w]: [usize; 3],
    weight: &Tensor<f64>,
    bias: &Tensor<f64>,
    pad: usize,
) -> (Vec<f64>, [usize; 3]) {
    let [cout, cin, k, _] = [
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    ];
    assert_eq!(cin, c, "input channels");
    let oh = h + 2 * pad - k + 1;
    let ow = w + 2 * pad - k + 1;
    let wd = weight.data();
    let mut out = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = (oy + ky) as isize - pad as isize;
                            let ix = (ox + kx) as isize - pad as isize;
                            let xv = if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                0.0
                            } else {
                                x[(ci * h + iy as usize) * w + ix as usize]
                            };
                            acc += wd[((o * c + ci) * k + ky) * k + kx] * xv;
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc + bias.data()[o];
            }
        }
    }
    (out, [cout, oh, ow])
}

fn pool(x: &[f64], [c, h, w]: [usize; 3], kind: PoolKind) -> (Vec<f64>, [usize; 3]) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let at = |dy: usize, dx: usize| x[(ci * h + 2 * oy + dy) * w + 2 * ox + dx];
                let win = [at(0, 0), at(0, 1), at(1, 0), at(1, 1)];
                out.push(match kind {
                    PoolKind::Avg => (win[0] + win[1] + win[2] + win[3]) * 0.25,
                    PoolKind::Max => {
                        let mut best = win[0];
                        for &v in &win[1..] {
                            if v > best {
                                best = v;
                            }
                        }
                        best
                    }
                });
            }
        }
    }
    (out, [c, oh, ow])
}

fn linear(x: &[f64], weight: &Tensor<f64>, bias: &Tensor<f64>) -> Vec<f64> {
    let (m, n) = (weight.shape()[0], weight.shape()[1]);
    assert_eq!(n, x.len(), "input features");
    (0..m)
        .map(|j| {
            let mut acc = 0.0;
            for i in 0..n {
                acc += x[i] * weight.data()[j * n + i];
            }
            acc + bias.data()[j]
        })
        .collect()
}

struct CellState {
    v: Vec<f64>,
    delta: Vec<f64>,
}

/// Simulates `spec` with `params` on `input` (`[T, B, ...]`).
///
/// # Panics
///
/// On shape errors or a missing parameter; this is a test oracle, not a
/// validated entry point.
pub fn simulate(
    spec: &NetworkSpec,
    params: &ParamStore<f64>,
    input: &Tensor<f64>,
) -> ReferenceRecord {
    let steps = input.shape()[0];
    let batch = input.shape()[1];
    let sample_len: usize = input.shape()[2..].iter().product();
    let lif = spec.lif;
    let leak = lif.leak();
    let p = |name: String| {
        params
            .get(&name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    };
    let numbered: Vec<(usize, LayerSpec)> = spec
        .layers
        .iter()
        .filter(|l| !matches!(l, LayerSpec::Dropout { .. }))
        .copied()
        .enumerate()
        .collect();
    let spiking: Vec<usize> = numbered
        .iter()
        .filter(|(_, l)| matches!(l, LayerSpec::Conv { .. } | LayerSpec::Fc { .. }))
        .map(|&(i, _)| i)
        .collect();

    let mut layers: Vec<ReferenceLayer> = spiking
        .iter()
        .map(|&layer| ReferenceLayer {
            layer,
            v: vec![Vec::with_capacity(batch); steps],
            spikes: vec![Vec::with_capacity(batch); steps],
        })
        .collect();
    let mut output = vec![Vec::with_capacity(batch); steps];

    for b in 0..batch {
        let mut states: Vec<Option<CellState>> = spiking.iter().map(|_| None).collect();
        for t in 0..steps {
            let start = (t * batch + b) * sample_len;
            let mut x = input.data()[start..start + sample_len].to_vec();
            let mut shape = spec.input_shape;
            let mut si = 0;
            for &(li, ls) in &numbered {
                let current = match ls {
                    LayerSpec::Conv { kernel, .. } => {
                        let pad = spec.conv_padding.resolve(kernel).expect("valid padding");
                        let (cur, s) = conv(
                            &x,
                            shape,
                            p(format!("layer{li}.weight")),
                            p(format!("layer{li}.bias")),
                            pad,
                        );
                        shape = s;
                        cur
                    }
                    LayerSpec::Fc { .. } => linear(
                        &x,
                        p(format!("layer{li}.weight")),
                        p(format!("layer{li}.bias")),
                    ),
                    LayerSpec::Pool2 => {
                        let (y, s) = pool(&x, shape, spec.pooling);
                        x = y;
                        shape = s;
                        continue;
                    }
                    LayerSpec::Dropout { .. } => unreachable!("dropout layers are filtered out"),
                };
                let is_conv = matches!(ls, LayerSpec::Conv { .. });
                let n = current.len();
                let st = states[si].get_or_insert_with(|| CellState {
                    v: vec![0.0; n],
                    delta: vec![0.0; n],
                });
                let gate_pad = (spec.gate_kernel - 1) / 2;

                let gated = if is_conv && spec.switches.sfbm {
                    let (pre, _) = conv(
                        &st.delta,
                        shape,
                        p(format!("layer{li}.sfb.weight")),
                        p(format!("layer{li}.sfb.bias")),
                        gate_pad,
                    );
                    pre.iter()
                        .zip(&current)
                        .map(|(&z, &i)| sigmoid(z) * i)
                        .collect()
                } else {
                    current
                };
                let v: Vec<f64> = (0..n)
                    .map(|j| leak * st.v[j] * reset_factor(st.delta[j], lif.reset) + gated[j])
                    .collect();
                let raw: Vec<f64> = v.iter().map(|&vj| heaviside(vj, &lif)).collect();
                let delta: Vec<f64> = if is_conv && spec.switches.beim {
                    let (pre, _) = conv(
                        &v,
                        shape,
                        p(format!("layer{li}.ei.weight")),
                        p(format!("layer{li}.ei.bias")),
                        gate_pad,
                    );
                    pre.iter()
                        .zip(&raw)
                        .map(|(&z, &s)| sign(z, &lif) * s)
                        .collect()
                } else {
                    raw
                };
                layers[si].v[t].push(v.clone());
                layers[si].spikes[t].push(delta.clone());
                st.v = v;
                st.delta = delta.clone();
                x = delta;
                si += 1;
            }
            output[t].push(x);
        }
    }

    let inv_t = 1.0 / steps as f64;
    let mean_rate = (0..batch)
        .map(|b| {
            let classes = output[0][b].len();
            (0..classes)
                .map(|c| {
                    let mut s = output[0][b][c];
                    for o in &output[1..] {
                        s += o[b][c];
                    }
                    s * inv_t
                })
                .collect()
        })
        .collect();
    ReferenceRecord {
        layers,
        output,
        mean_rate,
    }
}
