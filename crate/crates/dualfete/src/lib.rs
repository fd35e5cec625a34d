//! File formats, experiment suites, oracle self-checks and the command-line
//! front end for `dualfete-core`.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod manifest;
pub mod report;
pub mod run;
pub mod selftest;
pub mod suite;

pub use error::{HarnessError, Result};
