pub mod diffusion;
pub mod error;
pub mod expde;
pub mod form2;
pub mod latent;
pub mod nn;
pub mod pipeline;
pub mod vae;

pub use error::{Error, Result};
pub use nn::{RngStream, Tensor};
