//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. Node ids are
//! assigned in creation order, so an input always has a smaller id than its
//! consumer and walking the tape backwards is a reverse topological order.
//! Learnable parameters enter as param leaves; [`Tape::backward`] returns
//! their gradients.

mod spike;

use std::hash::{Hash, Hasher};

pub use spike::{SpikeFnConfig, SpikeMode};

use crate::neuron::ResetMode;
use crate::tensor::kernels::{self, Conv2dGeometry};
use crate::tensor::{Element, Tensor, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum AutogradError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("loss must be a single value, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("node {node} refers to node {input}, which is not an earlier node on this tape")]
    InvalidReference { node: usize, input: usize },
    #[error("{op} (node {node}) produced a non-finite value at flat index {index}")]
    NonFinite {
        op: &'static str,
        node: usize,
        index: usize,
    },
}

pub type Result<T> = std::result::Result<T, AutogradError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv2d(Conv2dGeometry),
    Linear,
    AvgPool2,
    MaxPool2(Vec<usize>),
    Add,
    Sub,
    Mul,
    Affine(T),
    Sigmoid,
    Abs,
    Square,
    SumAll,
    Spike(SpikeFnConfig),
    Sign(SpikeFnConfig),
    Membrane { leak: T, reset: ResetMode },
    Detach,
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d(_) => "conv2d",
            Op::Linear => "linear",
            Op::AvgPool2 => "avg_pool2",
            Op::MaxPool2(_) => "max_pool2",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Affine(_) => "affine",
            Op::Sigmoid => "sigmoid",
            Op::Abs => "abs",
            Op::Square => "square",
            Op::SumAll => "sum",
            Op::Spike(_) => "spike_threshold",
            Op::Sign(_) => "sign_surrogate",
            Op::Membrane { .. } => "membrane_update",
            Op::Detach => "detach",
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    inputs: [usize; 3],
    arity: usize,
    value: Tensor<T>,
    requires_grad: bool,
    param: Option<usize>,
}

impl<T> Node<T> {
    fn inputs(&self) -> &[usize] {
        &self.inputs[..self.arity]
    }
}

/// Gradients of a scalar loss with respect to the param leaves of a tape.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    params: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    /// Gradient for parameter `id`, or `None` when the loss does not depend
    /// on it.
    pub fn param(&self, id: usize) -> Option<&Tensor<T>> {
        self.params.get(id).and_then(Option::as_ref)
    }

    pub fn into_params(self) -> Vec<Option<Tensor<T>>> {
        self.params
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn check_ref(&self, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(AutogradError::InvalidReference {
                node: self.nodes.len(),
                input: v.0,
            });
        }
        Ok(())
    }

    fn push(&mut self, op: Op<T>, inputs: &[Var], value: Tensor<T>) -> Result<Var> {
        self.push_node(op, inputs, value, None)
    }

    fn push_node(
        &mut self,
        op: Op<T>,
        inputs: &[Var],
        value: Tensor<T>,
        param: Option<usize>,
    ) -> Result<Var> {
        let node = self.nodes.len();
        if let Some(index) = value.first_non_finite() {
            return Err(AutogradError::NonFinite {
                op: op.name(),
                node,
                index,
            });
        }
        let mut ids = [0usize; 3];
        let mut requires_grad = param.is_some();
        for (slot, v) in ids.iter_mut().zip(inputs) {
            *slot = v.0;
            requires_grad |= self.nodes[v.0].requires_grad;
        }
        if matches!(op, Op::Detach) {
            requires_grad = false;
        }
        self.nodes.push(Node {
            op,
            inputs: ids,
            arity: inputs.len(),
            value,
            requires_grad,
            param,
        });
        Ok(Var(node))
    }

    /// Learnable leaf. Its gradient is reported under `id`.
    pub fn param(&mut self, value: Tensor<T>, id: usize) -> Result<Var> {
        self.push_node(Op::Leaf, &[], value, Some(id))
    }

    /// Leaf that is not differentiated.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push_node(Op::Leaf, &[], value, None)
    }

    fn unary(&mut self, op: Op<T>, a: Var, f: impl Fn(T) -> T) -> Result<Var> {
        self.check_ref(a)?;
        let value = self.value(a).map(f);
        self.push(op, &[a], value)
    }

    fn binary(&mut self, op: Op<T>, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.check_ref(a)?;
        self.check_ref(b)?;
        let value = self.value(a).zip_map(self.value(b), op.name(), f)?;
        self.push(op, &[a, b], value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: Conv2dGeometry) -> Result<Var> {
        for v in [x, w, b] {
            self.check_ref(v)?;
        }
        let value = kernels::conv2d(self.value(x), self.value(w), self.value(b), &geom)?;
        self.push(Op::Conv2d(geom), &[x, w, b], value)
    }

    /// `x W^T + b`, flattening trailing axes of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        for v in [x, w, b] {
            self.check_ref(v)?;
        }
        let value = kernels::linear(self.value(x), self.value(w), self.value(b))?;
        self.push(Op::Linear, &[x, w, b], value)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        self.check_ref(x)?;
        let value = kernels::avg_pool2(self.value(x))?;
        self.push(Op::AvgPool2, &[x], value)
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        self.check_ref(x)?;
        let (value, argmax) = kernels::max_pool2(self.value(x))?;
        self.push(Op::MaxPool2(argmax), &[x], value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Sub, a, b, |x, y| x - y)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        self.affine(a, factor, T::zero())
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Result<Var> {
        self.unary(Op::Affine(scale), a, |x| x * scale + shift)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Sigmoid, a, crate::tensor::sigmoid)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Abs, a, |x| x.abs())
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Square, a, |x| x * x)
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        self.check_ref(a)?;
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::SumAll, &[a], value)
    }

    /// Identity forward, zero gradient backward.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        self.unary(Op::Detach, a, |x| x)
    }

    /// Hard threshold with rectangular surrogate gradient.
    pub fn spike(&mut self, v: Var, cfg: SpikeFnConfig) -> Result<Var> {
        self.check_ref(v)?;
        self.value(v).ensure_finite("spike_threshold")?;
        self.unary(Op::Spike(cfg), v, |x| spike::spike_forward(x, &cfg))
    }

    /// Sign with rectangular surrogate gradient around zero; sign(0) = +1.
    pub fn sign(&mut self, v: Var, cfg: SpikeFnConfig) -> Result<Var> {
        self.check_ref(v)?;
        self.value(v).ensure_finite("sign_surrogate")?;
        self.unary(Op::Sign(cfg), v, |x| spike::sign_forward(x, &cfg))
    }

    /// Leaky membrane update with reset:
    /// `leak * v_prev * (1 - r) + input`, where `r` is `delta_prev`
    /// ([`ResetMode::Literal`]) or `|delta_prev|` ([`ResetMode::Magnitude`]).
    /// Evaluated left to right as `((leak * v_prev) * (1 - r)) + input`.
    pub fn membrane_update(
        &mut self,
        v_prev: Var,
        delta_prev: Var,
        input: Var,
        leak: T,
        reset: ResetMode,
    ) -> Result<Var> {
        for v in [v_prev, delta_prev, input] {
            self.check_ref(v)?;
        }
        let (vp, dp, inp) = (
            self.value(v_prev),
            self.value(delta_prev),
            self.value(input),
        );
        for (other, name) in [(dp, "delta_prev"), (inp, "input")] {
            if other.shape() != vp.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: if name == "input" {
                        "membrane_update (input current)"
                    } else {
                        "membrane_update (previous spikes)"
                    },
                    lhs: vp.shape().to_vec(),
                    rhs: other.shape().to_vec(),
                }
                .into());
            }
        }
        let data = vp
            .data()
            .iter()
            .zip(dp.data())
            .zip(inp.data())
            .map(|((&v, &d), &i)| leak * v * (T::one() - reset.apply(d)) + i)
            .collect();
        let value = Tensor::from_vec(vp.shape().to_vec(), data)?;
        self.push(
            Op::Membrane { leak, reset },
            &[v_prev, delta_prev, input],
            value,
        )
    }

    /// Hash of which linear piece every piecewise-linear node evaluated on.
    /// Two forward passes with equal signatures lie in the same smooth
    /// region of the computation, so a central difference across them is
    /// valid.
    pub fn region_signature(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            let input = |k: usize| &self.nodes[node.inputs[k]].value;
            match &node.op {
                Op::Spike(cfg) if cfg.mode == SpikeMode::Relaxed => {
                    let (c, w) = (T::from_f64(cfg.v_th), T::from_f64(cfg.window));
                    input(0)
                        .data()
                        .iter()
                        .for_each(|&x| spike::region(x, c, w).hash(&mut h));
                }
                Op::Sign(cfg) if cfg.mode == SpikeMode::Relaxed => {
                    let w = T::from_f64(cfg.window);
                    input(0)
                        .data()
                        .iter()
                        .for_each(|&x| spike::region(x, T::zero(), w).hash(&mut h));
                }
                Op::Abs => input(0)
                    .data()
                    .iter()
                    .for_each(|&x| sign_code(x).hash(&mut h)),
                Op::Membrane {
                    reset: ResetMode::Magnitude,
                    ..
                } => input(1)
                    .data()
                    .iter()
                    .for_each(|&x| sign_code(x).hash(&mut h)),
                Op::MaxPool2(argmax) => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        self.check_ref(loss)?;
        let loss_value = self.value(loss);
        if loss_value.len() != 1 {
            return Err(AutogradError::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let param_count = self
            .nodes
            .iter()
            .filter_map(|n| n.param)
            .max()
            .map_or(0, |m| m + 1);
        let mut params: Vec<Option<Tensor<T>>> = vec![None; param_count];
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::full(loss_value.shape().to_vec(), T::one()));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            for &input in node.inputs() {
                if input >= id {
                    return Err(AutogradError::InvalidReference { node: id, input });
                }
            }
            if let Some(pid) = node.param {
                accumulate(&mut params[pid], g)?;
                continue;
            }
            for (slot, dx) in self.local_grads(node, &g)? {
                accumulate(&mut grads[slot], dx)?;
            }
        }
        Ok(Gradients { params })
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes[id].requires_grad
    }

    /// Vector-Jacobian products of one node, for the inputs that need them.
    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let ins = node.inputs();
        let val = |k: usize| &self.nodes[ins[k]].value;
        let mut out = Vec::with_capacity(ins.len());
        match &node.op {
            Op::Leaf | Op::Detach => {}
            Op::Conv2d(geom) => {
                let (dx, dw, db) =
                    kernels::conv2d_backward(val(0), val(1), g, geom, self.needs(ins[0]))?;
                if let Some(dx) = dx {
                    out.push((ins[0], dx));
                }
                out.push((ins[1], dw));
                out.push((ins[2], db));
            }
            Op::Linear => {
                let (dx, dw, db) = kernels::linear_backward(val(0), val(1), g, self.needs(ins[0]))?;
                if let Some(dx) = dx {
                    out.push((ins[0], dx));
                }
                out.push((ins[1], dw));
                out.push((ins[2], db));
            }
            Op::AvgPool2 => out.push((ins[0], kernels::avg_pool2_backward(g, val(0).shape())?)),
            Op::MaxPool2(argmax) => out.push((
                ins[0],
                kernels::max_pool2_backward(g, argmax, val(0).shape())?,
            )),
            Op::Add => {
                out.push((ins[0], g.clone()));
                out.push((ins[1], g.clone()));
            }
            Op::Sub => {
                out.push((ins[0], g.clone()));
                out.push((ins[1], g.map(|x| -x)));
            }
            Op::Mul => {
                if self.needs(ins[0]) {
                    out.push((ins[0], g.mul(val(1))?));
                }
                if self.needs(ins[1]) {
                    out.push((ins[1], g.mul(val(0))?));
                }
            }
            Op::Affine(scale) => out.push((ins[0], g.scale(*scale))),
            Op::Sigmoid => out.push((
                ins[0],
                g.zip_map(&node.value, "sigmoid backward", |g, s| {
                    g * s * (T::one() - s)
                })?,
            )),
            Op::Abs => out.push((
                ins[0],
                g.zip_map(val(0), "abs backward", |g, x| g * sign_or_zero(x))?,
            )),
            Op::Square => out.push((
                ins[0],
                g.zip_map(val(0), "square backward", |g, x| g * (x + x))?,
            )),
            Op::SumAll => out.push((ins[0], Tensor::full(val(0).shape().to_vec(), g.item()))),
            Op::Spike(cfg) => {
                let k = T::from_f64(cfg.grad_scale);
                out.push((
                    ins[0],
                    g.zip_map(val(0), "spike backward", |g, v| {
                        if spike::spike_pass(v, cfg) {
                            g * k
                        } else {
                            T::zero()
                        }
                    })?,
                ));
            }
            Op::Sign(cfg) => {
                let k = T::from_f64(cfg.grad_scale);
                out.push((
                    ins[0],
                    g.zip_map(val(0), "sign backward", |g, v| {
                        if spike::sign_pass(v, cfg) {
                            g * k
                        } else {
                            T::zero()
                        }
                    })?,
                ));
            }
            Op::Membrane { leak, reset } => {
                let (vp, dp) = (val(0), val(1));
                if self.needs(ins[0]) {
                    out.push((
                        ins[0],
                        g.zip_map(dp, "membrane backward", |g, d| {
                            g * *leak * (T::one() - reset.apply(d))
                        })?,
                    ));
                }
                if self.needs(ins[1]) {
                    let data = g
                        .data()
                        .iter()
                        .zip(vp.data())
                        .zip(dp.data())
                        .map(|((&g, &v), &d)| -(g * *leak * v) * reset.derivative(d))
                        .collect();
                    out.push((ins[1], Tensor::from_vec(dp.shape().to_vec(), data)?));
                }
                out.push((ins[2], g.clone()));
            }
        }
        out.retain(|(slot, _)| self.needs(*slot));
        Ok(out)
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g)?,
        None => *slot = Some(g),
    }
    Ok(())
}

fn sign_or_zero<T: Element>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn sign_code<T: Element>(x: T) -> i8 {
    if x > T::zero() {
        1
    } else if x < T::zero() {
        -1
    } else {
        0
    }
}

impl ResetMode {
    pub(crate) fn apply<T: Element>(self, delta: T) -> T {
        match self {
            ResetMode::Literal => delta,
            ResetMode::Magnitude => delta.abs(),
        }
    }

    pub(crate) fn derivative<T: Element>(self, delta: T) -> T {
        match self {
            ResetMode::Literal => T::one(),
            ResetMode::Magnitude => sign_or_zero(delta),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_function_gradient_is_input() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[3], &[0.5, -1.0, 2.0]), 0).unwrap();
        let x = tape.constant(t(&[3], &[3.0, 4.0, -5.0])).unwrap();
        let p = tape.mul(w, x).unwrap();
        let loss = tape.sum_all(p).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.param(0).unwrap().data(), &[3.0, 4.0, -5.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(0.0f64), 0).unwrap();
        let s = tape.sigmoid(w).unwrap();
        let grads = tape.backward(s).unwrap();
        assert_eq!(grads.param(0).unwrap().item(), 0.25);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let w = tape.param(t(&[2], &[1.0, 2.0]), 0).unwrap();
        assert!(matches!(
            tape.backward(w),
            Err(AutogradError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn foreign_var_is_rejected() {
        let mut tape = Tape::<f64>::new();
        tape.constant(Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            tape.sigmoid(Var(7)),
            Err(AutogradError::InvalidReference { .. })
        ));
    }

    #[test]
    fn nan_input_to_spike_errors() {
        let mut tape = Tape::<f64>::new();
        let mut v = Tensor::zeros([2]);
        v.data_mut()[1] = f64::NAN;
        // constants are finite-checked on entry
        assert!(matches!(
            tape.constant(v),
            Err(AutogradError::NonFinite { .. })
        ));
    }

    #[test]
    fn surrogate_masks_match_between_hard_and_relaxed() {
        let vs = t(&[6], &[-0.2, 0.0, 0.3, 0.5, 1.0, 1.2]);
        let mut masks = Vec::new();
        for cfg in [SpikeFnConfig::default(), SpikeFnConfig::default().relaxed()] {
            let mut tape = Tape::new();
            let v = tape.param(vs.clone(), 0).unwrap();
            let s = tape.spike(v, cfg).unwrap();
            let l = tape.sum_all(s).unwrap();
            masks.push(tape.backward(l).unwrap().param(0).unwrap().clone());
        }
        assert_eq!(masks[0], masks[1]);
        assert_eq!(masks[0].data(), &[0.0, 1.0, 1.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(2.0f64), 0).unwrap();
        let d = tape.detach(w).unwrap();
        let p = tape.mul(w, d).unwrap();
        let grads = tape.backward(p).unwrap();
        // d(w * stop(w))/dw = stop(w)
        assert_eq!(grads.param(0).unwrap().item(), 2.0);
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(3.0f64), 0).unwrap();
        let sq = tape.mul(w, w).unwrap();
        let grads = tape.backward(sq).unwrap();
        assert_eq!(grads.param(0).unwrap().item(), 6.0);
    }
}
