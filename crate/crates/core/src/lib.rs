pub mod alignment;
pub mod cdm;
pub mod cli;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod evaluation;
pub mod graphs;
pub mod numerics;
pub mod semantics;
pub mod training;

pub use error::{Error, Result};
