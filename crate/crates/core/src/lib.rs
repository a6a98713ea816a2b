//! Chess policy/value networks with a trainable information-masking
//! module, linear concept probes over internal activations, and per-square
//! importance maps for arbitrary positions.

pub mod chess;
pub mod par;
pub mod rng;
pub mod autodiff;
pub mod encoding;
pub mod network;
pub mod probes;
pub mod training;
pub mod explain;
pub mod service;
