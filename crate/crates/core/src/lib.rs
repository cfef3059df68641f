//! Geometry, procedural avatars, rasterization, the causal latent codec and
//! evaluation metrics for camera- and expression-controlled portrait animation.

pub mod avatar;
pub mod camera;
pub mod codec;
pub mod error;
pub mod eval;
pub mod image_io;
pub mod rasterizer;
pub mod seed;

pub use error::{Error, Result};
