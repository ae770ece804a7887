//! Gradient-free training by layer-wise feedback propagation.
//!
//! A network's outputs are scored by an initial reward per output neuron.
//! [`lfp::lfp_backward`] decomposes that reward through the layers and turns
//! each connection's share into a local update, so no derivative of the
//! network is needed. [`gradbase`] provides exact backpropagation for
//! comparison, [`snn`] applies the same decomposition to spiking networks and
//! [`pruning`] measures the sparsity of the trained weights.
//!
//! Data-parallel kernels run on rayon by default; building without the
//! `parallel` feature gives the sequential fallback with identical results.

pub mod error;
pub mod tensor;
pub mod network;
pub mod rewards;
pub mod lfp;
pub mod gradbase;
pub mod snn;
pub mod data;
pub mod train;
pub mod pruning;
pub mod checkpoint;
pub mod verify;
mod par;

pub use error::{Error, Result};
pub use tensor::Tensor;
pub use network::{ActivationKind, ForwardOptions, LayerSpec, Network};

/// `1` for `x >= 0`, `-1` otherwise.
#[inline]
pub fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Whether the data-parallel kernels are compiled in.
pub fn is_parallel() -> bool {
    par::is_parallel()
}
