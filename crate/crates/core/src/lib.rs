//! Dual-branch center/surrounding contrastive pretraining for point clouds.
//!
//! A cloud is cut into patches (farthest point sampling + k nearest
//! neighbours). Patch centers and patch shapes are embedded separately; one
//! branch replaces the center embedding of the masked patches with a learned
//! token, the other replaces their shape embedding. Both branches go through a
//! shared transformer and projector, and the two views of every masked patch
//! are pulled together against the other masked patches of the same cloud.

pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod rng;
pub mod synthdata;
pub mod training;

pub use error::{Error, Result};
