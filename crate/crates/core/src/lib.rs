pub mod cli;
pub mod dataload;
pub mod error;
pub mod gradcheck;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod pruning;
pub mod scaling;
pub mod sweep;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
