//! Self-supervised cycle association on a synthetic identity world.
//!
//! The crate is organized bottom-up:
//!
//! - [`matrix`] — dense row-major matrices with hand-derived backward passes
//!   for every operation the loss pipeline needs, plus a finite-difference
//!   gradient checker.
//! - [`assoc`] — the cycle-association objective: affinity, adaptive softmax
//!   temperature, soft assignment, cycle matrix, symmetric and margin-relaxed
//!   losses with exact gradients, and the discrete Hungarian oracle.
//! - [`sim`] — a seeded identity world emitting intra- and inter-camera frame
//!   pairs with controllable symmetry.
//! - [`train`] — a small learnable embedder and the two-stage schedule that
//!   consumes simulator pairs and association gradients.
//! - [`eval`] — retrieval metrics (rank-1 / mAP), a trivial-solution detector
//!   and the symmetry-sweep / loss-comparison experiments.
//! - [`gradcheck`] — a finite-difference audit of every backward pass,
//!   runnable as a suite with per-operation reports.

pub mod assoc;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod matrix;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
