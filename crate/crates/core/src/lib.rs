pub mod active;
pub mod agent;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod diffkernel;
pub mod env;
pub mod error;
pub mod eval;
pub mod reward;
pub mod vae;

pub use error::{Error, Result};
