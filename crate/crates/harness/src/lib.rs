//! Command-line harness around `elitekv-core`: binary model, calibration and
//! factor formats, seeded synthetic data, the end-to-end pipeline and the
//! invariant suites.

pub mod alloc;
pub mod cli;
pub mod elite;
pub mod error;
pub mod format;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod verify;

pub use error::{HarnessError, Result};
