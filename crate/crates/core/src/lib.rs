//! Pedestrian representation pre-training with vision, attribute and
//! language supervision.

pub mod autograd;
pub mod cli;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod losses;
pub mod memory;
pub mod mining;
pub mod params;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
