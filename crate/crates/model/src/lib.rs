//! Conditioning, diffusion transformer, flow-matching objective and
//! progressive training for controllable portrait video generation.

pub mod conditioning;
pub mod diffusion;
pub mod dit;
pub mod error;
pub mod layers;
pub mod model;
pub mod params;
pub mod pipeline;

pub use error::{ModelError, Result};
