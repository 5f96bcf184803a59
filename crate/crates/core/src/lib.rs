// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod autograd;
pub mod codec;
pub mod config;
pub mod entropy;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod imageio;
pub mod multitask;
pub mod optim;
pub mod params;
pub mod report;
pub mod spectral;
pub mod synth;
pub mod task;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use params::{Checkpoint, ParameterSet};
pub use tensor::{FeatureMap, Tensor};
