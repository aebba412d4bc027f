//! Numerical building blocks for single-stage weakly supervised semantic
//! segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: a small dense `f64` tensor, channel softmax, pooling and a
//!   seedable RNG.
//! - [`scores`]: GAP/CAM class scores and the normalised global weighted
//!   pooling (nGWP) with focal mask-size penalty, including hand-written
//!   backward passes.
//! - [`losses`]: multi-label soft-margin loss, class-balanced segmentation
//!   loss and a finite-difference gradient checker.
//! - [`pamr`]: pixel-adaptive mask refinement and pseudo ground-truth
//!   extraction.
//! - [`gate`]: stochastic gate and global cue injection.
//! - [`tnsr`]: the `TNSR` binary tensor file format.

pub mod error;
pub mod gate;
pub mod losses;
pub mod numerics;
pub mod pamr;
pub mod scores;
pub mod tnsr;

pub use error::{Error, Result};
pub use numerics::{Rng, Tensor};
