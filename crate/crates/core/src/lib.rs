//! Dual-teacher feedback training for semi-supervised segmentation.
//!
//! Two teachers pseudo-label unlabeled images for a student. The student
//! measures, on labeled data, whether a virtual step on those pseudo-labels
//! helped, and feeds that signal back into each teacher's likelihood over
//! confidence-dependent receiver regions.
//!
//! The crate is `no_std` (with `alloc`). File formats, the CLI and the
//! experiment suites live in the `dualfete` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod autograd;
pub mod bilevel;
pub mod error;
pub mod feedback;
pub mod grid;
pub mod metrics;
pub mod params;
pub mod pseudo;
pub mod rng;
pub mod segnet;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use params::{GradientVector, ModelParams};
pub use tensor::Tensor;
