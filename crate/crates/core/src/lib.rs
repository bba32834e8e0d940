//! Discrete-time averaging schemes driven by stationary mixing noise, the diffusion they
//! approximate, and Dynkin stopping games valued on the discrete scheme.

pub mod coefficients;
pub mod config;
pub mod diffusion_ref;
pub mod dynkin;
pub mod error;
pub mod experiments;
pub mod field;
pub mod noise;
pub mod rng;
pub mod scheme;

pub use error::{Error, Result};
