//! Sparse one-stage spatiotemporal action detection on synthetic clips.

pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod featspace;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod hungarian;
pub mod longterm;
pub mod losses;
pub mod mixer;
pub mod model;
pub mod nn;
pub mod params;
pub mod sampler;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
