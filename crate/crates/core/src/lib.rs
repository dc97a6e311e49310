//! Click-based interactive segmentation with a two-stream vision transformer.

pub mod autodiff;
pub mod checkpoint;
pub mod clicks;
pub mod config;
pub mod cross;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod head;
pub mod imageops;
pub mod mask;
pub mod model;
pub mod oracle;
pub mod params;
pub mod stubs;
pub mod synth;
pub mod tensor;
pub mod training;
pub mod transformer;

pub use autodiff::{Tape, Var};
pub use clicks::{Click, InteractionState};
pub use config::{ModelConfig, WiringVariant};
pub use error::{Error, Result};
pub use mask::BitMask;
pub use model::{IcmFormer, Model, Segmenter};
pub use tensor::Tensor;
