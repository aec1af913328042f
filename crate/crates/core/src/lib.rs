//! Gated cross-attention fusion of vision experts into a small decoder-only
//! language model, trained in stages and scored with a VQA metric suite.
//!
//! The numeric core is generic over [`numerics::Scalar`] (`f32` or `f64`);
//! the aliases below fix the scalar for common use. Training and the run
//! pipeline work in `f64`.

pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod experts;
pub mod finetune;
pub mod fusion;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod transformer;
pub mod vocab;

pub use error::{Error, Result};

pub type Matrix64 = numerics::Matrix<f64>;
pub type Matrix32 = numerics::Matrix<f32>;
pub type ParamStore64 = numerics::ParamStore<f64>;
pub type ParamStore32 = numerics::ParamStore<f32>;
pub type LanguageModel64 = transformer::LanguageModel<f64>;
pub type LanguageModel32 = transformer::LanguageModel<f32>;
pub type FusionModel64 = model::FusionModel<f64>;
pub type FusionModel32 = model::FusionModel<f32>;
pub type CameraFeatureSet64 = experts::CameraFeatureSet<f64>;
pub type CameraFeatureSet32 = experts::CameraFeatureSet<f32>;
