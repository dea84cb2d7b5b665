//! Estimation, inference and design for single-arm trials analysed against an
//! external control arm.

pub mod data;
pub mod design;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod linalg;
pub mod nuisance;
pub mod pipeline;
pub mod simulation;
pub mod stats;

pub use error::{Error, Result};
