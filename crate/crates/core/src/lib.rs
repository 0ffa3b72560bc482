//! Two-teacher pseudo-labeling and bootstrapped student self-training for
//! soft-labeled dialogue classification.

pub mod app;
pub mod augment;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod seed;

pub use error::{Error, Result};
