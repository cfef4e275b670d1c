//! Multi-task sequence tagging with a shared transformer encoder and one
//! linear softmax head per dataset.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod import;
pub mod model;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
