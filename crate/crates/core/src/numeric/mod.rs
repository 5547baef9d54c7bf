//! Dense numerical kernel: matrices, MLPs, activations, Adam and a
//! finite-difference gradient checker.

pub mod activation;
pub mod adam;
pub mod gradcheck;
pub mod matrix;
pub mod mlp;
pub mod params;

pub use activation::{sigmoid, softmax, Activation, OutputActivation};
pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{gradcheck, BlockReport, GradReport, Probe};
pub use matrix::Matrix;
pub use mlp::{mlp_backward, mlp_forward, Layer, MlpCache, MlpParams};
pub use params::Params;
