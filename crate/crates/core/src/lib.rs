//! Open-set recognition with dual-branch prototype learning.

pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod metrics;
pub mod ndnum;
pub mod scoring;
pub mod training;

pub use error::{Error, Result};
pub use ndnum::{Tape, Tensor, Var};
