pub mod config;
pub mod dataset;
pub mod detector;
pub mod dump;
pub mod error;
pub mod geometry;
pub mod losses;
pub mod metrics;
pub mod numerics;
pub mod pipeline;
pub mod scenes;
pub mod trainer;
pub mod variance;

pub use error::{Error, Result};
