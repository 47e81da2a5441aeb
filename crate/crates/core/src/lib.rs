//! Multi-dialect Tibetan text-to-speech at desk scale.

pub mod alignment;
pub mod cfm;
pub mod dialect;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod signal;
pub mod tensor;
pub mod text;
pub mod toy;

pub use error::{Error, Result};
