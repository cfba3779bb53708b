pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod sinkhorn;
pub mod trainer;

pub use error::{Error, Result};
