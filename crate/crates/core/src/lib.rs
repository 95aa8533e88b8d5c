pub mod data;
pub mod distill;
pub mod error;
pub mod eval;
pub mod experiments;
pub mod irm;
pub mod learning;

pub use error::{Error, Result};
