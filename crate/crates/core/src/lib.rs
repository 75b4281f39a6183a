//! HBA-U-Net: a U-Net whose skip connections carry local bottlenecks with
//! hierarchical bottleneck attention (content, relative-position and channel
//! attention), for joint fovea and optic-disc segmentation in fundus images.
//!
//! The crate is framework-free: [`tensor`] provides a small reverse-mode
//! differentiation engine and everything else is built on it.

pub mod tensor;

pub use tensor::{Scalar, Shape, Tape, Tensor, TensorError, Var};
pub mod attention;
pub mod params;
pub mod data;
pub mod model;
pub mod train;
pub mod metrics;
pub mod verify;
