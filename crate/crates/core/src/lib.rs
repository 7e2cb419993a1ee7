pub mod checks;
pub mod data;
pub mod error;
pub mod eval;
pub mod heatmap;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
