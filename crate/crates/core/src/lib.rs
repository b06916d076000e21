//! Discrete autoencoders trained by policy search.
//!
//! The encoder is an autoregressive categorical policy over latent codes. It is
//! moved toward a closed-form KL-regularized target by weighted maximum
//! likelihood, with the trust region sized by an effective-sample-size
//! controller. Gumbel-Softmax, REINFORCE and VQ-VAE baselines share the same
//! models, and [`oracle`] enumerates small latent spaces exactly.

pub mod autodiff;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod engine;
pub mod models;
pub mod oracle;
pub mod rng;
pub mod suite;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Gradients, Graph, ParamId, ParamStore, Var};
pub use error::{Error, Result, TensorError};
pub use tensor::Tensor;
