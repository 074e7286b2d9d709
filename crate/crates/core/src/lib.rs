//! Avatars built from body-anchored local radiance fields.
//!
//! A canonical capsule template is sampled into nodes; each node carries a
//! tiny MLP evaluated in its own local frame. Per-frame residual node
//! translations and detail embeddings come from per-node conditional VAEs.
//! Everything downstream of the parameters runs on the `slrf-tensor` tape so
//! that training, rendering and gradient checking share one code path.

pub mod body;
pub mod cvae;
pub mod dataset;
mod error;
pub mod fields;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
mod nn;
pub mod render;
pub mod train;

pub use error::{CoreError, Result};
pub use slrf_tensor as tensor;
