//! Multi-behavior, multi-interest graph recommendation with knowledge-aware
//! interest initialization and dynamic-routing interest allocation.

pub mod cie;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod error;
pub mod evaluator;
pub mod fbc;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod synthetic;
pub mod trainer;

pub use error::{CkmlError, Result};
