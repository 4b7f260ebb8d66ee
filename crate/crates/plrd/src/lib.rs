//! Progressive low-rank decomposition of transformer weight matrices.
//!
//! The crate factors fully-connected layers into thin pairs via truncated
//! SVD, shrinks existing pairs progressively without growing the layer count,
//! plans rank schedules with exact parameter accounting, performs checkpoint
//! surgery on a micro-transformer, and runs recovery training between
//! compression steps.

pub mod error;
pub mod factorize;
pub mod linalg;
pub mod model;
pub mod planner;
pub mod trainer;

pub use error::{Error, Result};
