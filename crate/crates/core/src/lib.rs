//! Open-vocabulary part segmentation built from generalized parts with
//! object-level context, attention-control losses and a matching evaluation
//! harness, at desk scale.

pub mod attncontrol;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod taxonomy;

pub use error::{Error, Result};
