//! Layer-heterogeneity mixture-of-experts agent at desk scale.

pub mod ablation;
pub mod analysis;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod env;
pub mod error;
pub mod model;
pub mod params;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
