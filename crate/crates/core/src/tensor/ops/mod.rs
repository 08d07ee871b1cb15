//! Differentiable operations recorded on a [`Graph`](super::Graph).

mod elementwise;
mod linalg;
mod norm;
mod softmax;
mod spatial;

pub use elementwise::{BinaryOp, UnaryOp};
pub use norm::{ChannelStats, BN_EPS, BN_MOMENTUM};
pub use softmax::MASK_EPS;
pub use spatial::Window;
