//! Building blocks for fine-tuning a small conditional diffusion model on
//! differentiable rewards by backpropagating through its sampler.

pub mod denoiser;
pub mod error;
pub mod finetune;
pub mod latent_opt;
pub mod params;
pub mod real;
pub mod rewards;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod tensor;

pub use error::{Error, Result};
pub use params::ParamStore;
pub use real::{Precision, Real};
pub use schedule::NoiseSchedule;
pub use tensor::{Gradients, Graph, Tensor, Var};
