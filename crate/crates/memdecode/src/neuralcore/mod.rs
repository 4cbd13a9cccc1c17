//! Minimal neural-network compute kernel: 1D convolution, pooling, dense
//! layers, activations, L2 normalization, reverse-mode gradients, rmsprop,
//! and finite-difference gradient checking.
//!
//! Layer arithmetic runs in f64 regardless of the parameter storage type;
//! [`net::Network`] is the typed parameter store and compiles to the flat
//! [`net::FastNet`] kernel for actual compute.

pub mod gradcheck;
pub mod layers;
pub mod modelio;
pub mod net;
pub mod optim;

pub use gradcheck::{grad_check_subset, max_rel_error, sample_indices};
pub use net::{FastNet, LayerParams, LayerSpec, Network, Tensor};
pub use optim::RmsProp;
