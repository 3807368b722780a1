//! Dense numerics substrate: tensors, MLPs, reverse-mode gradients, Adam, and
//! seeded random streams.

mod adam;
mod autodiff;
mod embedding;
mod mlp;
mod rng;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use autodiff::{grad, Gradients, Graph, MlpVars, Var};
pub use embedding::{sinusoidal_time_embedding, time_embedding_rows};
pub use mlp::{mlp_forward, sigmoid, Activation, Layer, MlpParams};
pub use rng::{gaussian_draw, RngStream};
pub use tensor::Tensor;
