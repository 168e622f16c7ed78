//! Segmentation-free reader for multi-line vertical documents.
//!
//! A DenseNet encoder turns a page image into a grid of feature vectors; an
//! LSTM decoder with coverage attention walks that grid one character at a
//! time, emitting a transcription together with the attention map used at
//! every step.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod params;
pub mod tensor;
pub mod trainer;
pub mod viz;
pub mod vocab;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use error::{Error, Result};
pub use graph::{Graph, PoolKind, Var};
pub use model::{Model, ModelConfig};
pub use tensor::{Scalar, Tensor};
pub use vocab::Vocabulary;
