//! Multimodal transformer agent for language-conditioned gridworlds, trained
//! with a masked-token loss alongside PPO.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient certification); the aliases below fix the common choices.

pub mod baselines;
pub mod certify;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod gridworld;
pub mod mask;
pub mod model;
pub mod nn;
pub mod rl;
pub mod scalar;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph32 = tensor::Graph<f32>;
pub type Graph64 = tensor::Graph<f64>;
pub type Encoder32 = encoder::Encoder<f32>;
pub type Encoder64 = encoder::Encoder<f64>;
pub type CnnGru32 = baselines::CnnGru<f32>;
pub type CnnGru64 = baselines::CnnGru<f64>;
pub type Agent32 = model::Agent<f32>;
pub type Agent64 = model::Agent<f64>;
pub type Trainer32 = trainer::Trainer<f32>;
pub type Trainer64 = trainer::Trainer<f64>;
pub type Checkpoint32 = tensor::checkpoint::Checkpoint<f32>;
pub type Checkpoint64 = tensor::checkpoint::Checkpoint<f64>;
