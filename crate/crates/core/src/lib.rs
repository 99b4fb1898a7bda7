//! Token-channel compound attention for EEG and peripheral signal fusion.

pub mod encoder;
pub mod encoding;
pub mod error;
pub mod exec;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub(crate) mod params;
pub mod preprocess;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Execution;
pub use fusion::FusionMode;
pub use model::{ModelConfig, ModelParams, Tacoformer};
pub use tensor::{Tape, Tensor, Var};
