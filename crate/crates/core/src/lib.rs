//! Adaptive adversarial patches against aerial object detectors: patch
//! optimization under physical-dynamics transforms with scale-adaptive
//! placement on or outside targets, plus a cross-detector benchmark.

pub mod detector;
pub mod error;
pub mod eval;
pub mod io;
pub mod losses;
pub mod optimizer;
pub mod placement;
pub mod transforms;
pub mod types;

pub use error::{Error, ErrorKind, Result};
pub use types::*;
