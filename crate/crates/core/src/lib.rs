//! Image-repurposing detection toolkit.

pub mod analysis;
pub mod config;
pub mod embed;
pub mod error;
pub mod io;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod retrieval;
pub mod synth;
pub mod types;

pub use error::{Error, Result};
pub use types::*;
