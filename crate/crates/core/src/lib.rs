pub mod attention;
pub mod backbone;
pub mod error;
pub mod experts;
pub mod fairness;
pub mod inference;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod resample;
pub mod training;

pub use error::{Error, Result};
