//! Session-based recommendation with transformer encoders over item metadata
//! and multi-task prediction heads.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod exec;
pub mod features;
pub mod heads;
pub mod linalg;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod synthetic;
pub mod tokenizer;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
pub use exec::Exec;

#[cfg(test)]
mod fixtures;
