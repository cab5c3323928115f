//! Frequency-space multi-stage motion refinement for 3D human motion
//! prediction.
//!
//! The pipeline: a motion-attention module condenses an arbitrary-length
//! pose history into a fixed-size summary; a stack of graph-learning stages
//! refines a padded query by moving back and forth between pose space and
//! DCT coefficients; kinematics-weighted losses supervise the result.
//! Everything runs on a small reverse-mode autodiff tape in `f64`.

// NaN-rejecting range checks read best as `!(x > 0.0)`
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kinematics;
pub mod losses;
pub mod model;
pub mod params;
pub mod refinement;
pub mod tensor;
pub mod trainer;
pub mod transforms;

pub use autodiff::{BatchNormConfig, Gradients, Mode, RunningStats, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
