//! Minimal dense-array math with tape-based reverse-mode differentiation.
//!
//! The crate is deliberately small: row-major arrays of `f32` (training) or
//! `f64` (gradient checking), a [`Tape`] that records primitive ops for the
//! backward pass, an [`Adam`] optimizer over named parameters and the binary
//! checkpoint format used by the rest of the workspace.

mod adam;
mod array;
pub mod checkpoint;
mod error;
mod gemm;
mod params;
mod real;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use array::Array;
pub use error::TensorError;
pub use params::{Gradients, ParamStore, ParamVars};
pub use real::Real;
pub use tape::{fourier_encode, row_sq_dist, trunc_gauss, Segments, Tape, Var, VarGrads};

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
