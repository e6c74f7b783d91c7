pub mod adapters;
pub mod backbone;
pub mod batch;
pub mod decision;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod seed;
pub mod tasks;
pub mod tensor;
pub mod training;
pub mod tuning;

pub use error::{Error, Result};

/// Stabilizer added to cosine-similarity denominators.
pub const COSINE_EPS: f64 = 1e-8;
