//! Sensorless freehand 3-D ultrasound: rigid pose geometry, differentiable
//! slice-to-volume reconstruction, scan simulation, adversarial and
//! self-supervised losses, online pose refinement and drift metrics.

// `!(x > 0.0)` rejects NaN along with non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod par;
pub mod recon;
pub mod refine;
pub mod scansim;

pub use error::{Error, Result};
pub use par::Exec;
