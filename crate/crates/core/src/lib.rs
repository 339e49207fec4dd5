pub mod backbone;
pub mod cache;
pub mod cli;
pub mod config;
pub mod dataio;
pub mod error;
pub mod exec;
pub mod features;
pub mod fusion;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod probe;
pub mod rng;
pub mod schedule;
pub mod search;

pub use error::{Error, Result};
