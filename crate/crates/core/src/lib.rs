pub mod config;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod interpret;
pub mod losses;
pub mod models;
pub mod nn;
pub mod pretext;
pub mod rng;
pub mod scalar;
pub mod training;
pub mod transforms;

pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ClassifierF32 = models::Classifier<f32>;
pub type ClassifierF64 = models::Classifier<f64>;
pub type EncoderDecoderF32 = models::EncoderDecoder<f32>;
pub type EncoderDecoderF64 = models::EncoderDecoder<f64>;
pub type MomentumPairF32 = models::MomentumPair<f32>;
pub type SampleF32 = training::Sample<f32>;
