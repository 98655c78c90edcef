//! Hierarchical mixture-of-experts voxel decoding with time- and
//! space-routed diffusion conditioning, on synthetic brains with planted
//! ground truth.

pub mod diffusion;
pub mod encoder;
pub mod error;
pub mod harness;
pub mod routers;
pub mod tensor;
pub mod world;

pub use error::{Error, Result};
