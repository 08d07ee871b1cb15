//! Local self-attention with a learnable per-head span for image models.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode tape,
//! - [`mask`]: the soft square span mask and dynamic kernel extent,
//! - [`attention`]: the multi-head local attention layer and its naive oracle,
//! - [`model`]: ResNet-style classifiers with a pluggable spatial kernel,
//! - [`data`], [`train`], [`checkpoint`]: CIFAR-100 ingestion and training,
//! - [`analysis`]: parameter and FLOPS accounting.

pub mod analysis;
pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod mask;
pub mod model;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
