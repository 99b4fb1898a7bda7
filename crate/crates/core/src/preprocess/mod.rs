//! Turning raw recordings into model-ready instances.

pub mod pstb;
pub mod filter;
pub mod grid;
pub mod instances;
pub mod pipeline;
pub mod raw;
pub mod synth;
