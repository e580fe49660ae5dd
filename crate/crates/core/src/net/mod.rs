//! The super-resolution network, its layers and hand-written backward pass.

pub mod checkpoint;
pub mod feature;
mod kernels;
pub mod layers;
pub mod model;
pub mod real;

pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use feature::{Feature, Tensor5};
pub use layers::{conv3d_symmetric, upsample_trilinear2x, Conv};
pub use model::{compute_anatomy_channels, ModelParameters, NetConfig, Tape, MIN_INPUT};
pub use real::Real;
