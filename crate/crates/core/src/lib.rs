//! Memory-efficient reconstruction of dynamic image sequences from
//! undersampled tomographic data.
//!
//! The state trajectory is estimated with a Kalman filter and
//! Rauch–Tung–Striebel smoother restricted to the leading modes of a
//! squared-exponential prior. Motion operators are refit from the smoothed
//! states (optical flow, rank-1 DMD, patchwise DMD) and the noise covariances
//! are re-estimated by expectation–maximisation, all without forming any
//! `n_s × n_s` matrix.

pub mod em;
pub mod error;
pub mod filter;
pub mod image;
pub mod linops;
pub mod memory;
pub mod metrics;
pub mod mmgks;
pub mod motion;
pub mod phantom;
pub mod pipeline;
pub mod prior;
pub mod radon;
mod reduced;
pub mod smoother;

pub use error::{Error, Result};
pub use image::ImageSequence;
pub use linops::{LinearOperator, SparseMatrix};
pub use memory::{MemoryMeter, Workspace};
pub use prior::ProjectionBasis;
