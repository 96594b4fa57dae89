pub mod error;
pub mod linalg;
pub mod model;
pub mod schemes;
pub mod solvers;
pub mod revflow;
pub mod samplers;
pub mod diagnostics;
pub mod harness;

pub use error::{Error, Result};
