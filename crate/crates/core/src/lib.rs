pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corruption;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod models;
pub mod trainer;

pub use error::{Error, Result};
