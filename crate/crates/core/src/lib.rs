//! Shadow attacks on road-sign classifiers and a defense that appends a
//! binary adaptive-threshold or Canny edge map as a fourth input channel.

pub mod attacks;
pub mod augment;
pub mod color;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod model;
pub mod profiles;
pub mod shadow;

pub use error::{Error, Result};
