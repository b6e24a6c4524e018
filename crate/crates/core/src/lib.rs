//! Stacked adversarial visual odometry built on [`sganvo_tensor`].

pub mod checks;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod inference;
pub mod layers;
pub mod losses;
pub mod model;
pub mod trainer;

pub use error::{Error, Result};
