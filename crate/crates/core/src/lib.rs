pub mod cli;
pub mod error;
pub mod fit;
pub mod ingest;
pub mod math;
pub mod nest;
pub mod seed;
pub mod synth;

pub use error::{BirdError, ErrorCategory, Result};
