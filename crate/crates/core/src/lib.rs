// Scalar is an alias that may be f32, so some casts look redundant in f64 builds.
#![allow(clippy::unnecessary_cast)]

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod gradcheck;
pub mod head;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod scheduler;

pub use error::{Error, Result};
