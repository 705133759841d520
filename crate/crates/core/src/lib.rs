//! Core numerics for in-context equivariant self-supervised learning: group
//! transforms, the synthetic world, attention masks, the transformer and its
//! hand-written backward pass, losses, training and evaluation probes.
//!
//! The crate is `no_std` and only needs `alloc`.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod eval;
pub mod group;
pub mod linalg;
pub mod loss;
pub mod mask;
pub mod model;
pub mod optim;
pub mod real;
pub mod train;
pub mod world;

pub use group::{Action, GroupError, GroupId, LatentState, Quaternion};
pub use loss::{LossBreakdown, LossConfig, LossError};
pub use mask::{MaskConfig, MaskError, MaskMatrix};
pub use model::{Model, ModelConfig, ModelError, Params};
pub use real::{Dtype, Mat, Real};
pub use world::{ContextMode, ContextSequence, World, WorldConfig, WorldError};
