//! Spiking convolutional networks built from leaky integrate-and-fire
//! layers with an adaptive self-feedback gate and a learned
//! excitatory/inhibitory gate, trained by backpropagation through time with
//! rectangular surrogate gradients.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod gradcheck;
pub mod network;
pub mod neuron;
pub mod optimizer;
pub mod reference;
pub mod tensor;

pub use autograd::{SpikeFnConfig, SpikeMode, Tape, Var};
pub use network::{Network, NetworkSpec, SpikeBatch};
pub use neuron::{LifParams, ResetMode, Switches};
pub use tensor::{DType, Element, Tensor};
