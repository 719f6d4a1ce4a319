//! Multimodal EEG/video seizure detection: EEG filtering, masked-autoencoder
//! pre-training of an EEG encoder, optimal-transport aligned cross-attention
//! fusion with video tokens, and event-level evaluation on 1 s grids.
//!
//! Numeric kernels are generic over [`Scalar`]; the aliases below fix the
//! 64-bit instantiation the models are trained with.

pub mod config;
pub mod data;
pub mod dsp;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod io;
pub mod mae;
pub mod ot;
pub mod pipeline;
mod scalar;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = tensor::Tensor<f64>;
pub type Tape = tensor::Tape<f64>;
pub type ParamStore = tensor::ParamStore<f64>;
pub type AdamW = tensor::AdamW<f64>;
