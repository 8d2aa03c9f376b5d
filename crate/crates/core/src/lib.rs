//! Language-queried audio source separation at desk scale.

pub mod autograd;
pub mod bench;
pub mod dsp;
pub mod error;
pub mod metrics;
pub mod mixing;
pub mod model;
pub mod query;
pub mod seed;
pub mod tensor;
pub mod training;

pub use dsp::{AudioClip, ComplexSpectrogram, MaskPair, StftConfig};
pub use error::{Error, Result};
