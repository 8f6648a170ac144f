pub mod camera;
pub mod cli;
pub mod dataset;
pub mod eval;
pub mod error;
pub mod field;
pub mod gradcheck;
pub mod losses;
pub mod pipeline;
pub mod real;
pub mod sampler;
pub mod scene;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
