pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod model;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
