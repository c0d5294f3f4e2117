//! Fully convolutional dense-prediction engine.

pub mod error;
pub mod field;
pub mod gradcheck;
pub mod graph;
pub mod data;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod resampling;
pub mod rng;
pub mod skipnet;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Dims, LabelMap, Tensor, IGNORE};
