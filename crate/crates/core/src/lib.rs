//! Core numerics for the variational disentanglement benchmark: a small
//! reverse-mode autodiff engine, the encoder/decoder/discriminator networks,
//! the six training objectives, a procedural factor-labelled image dataset and
//! the five disentanglement metrics.

pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod metrics;
pub mod nets;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod tensor;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use kernels::ConvGeom;
pub use optim::Adam;
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
