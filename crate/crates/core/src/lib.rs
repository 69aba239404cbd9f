//! Numerical core for latent-variable generative text classifiers.
//!
//! `no_std` with `alloc`: reverse-mode autodiff over `f64`, LSTM language
//! models, training loops, inference rules and sampling. File formats, the
//! clock and the command line live in the `latclass` crate.
#![no_std]

extern crate alloc;

pub mod corpus;
pub mod generation;
pub mod gradcheck;
pub mod inference;
pub mod math;
pub mod model;
pub mod optim;
pub mod rng;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use inference::PredictionRule;
pub use model::{Family, Model, ModelConfig, ModelError, Structure};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::{ParamId, ParamStore, ShapeError, Tensor};
pub use train::{Method, TrainSpec};
