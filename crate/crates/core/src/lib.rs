pub mod adapter;
pub mod backbone;
pub mod baselines;
pub mod config;
pub mod container;
pub mod corpus;
pub mod distillery;
pub mod error;
pub mod metrics;
pub mod ndtensor;
pub mod optim;
pub mod pipeline;
pub mod promptkit;
pub mod seeds;
pub mod taskforge;
pub mod verify;

pub use error::{Error, Result};
