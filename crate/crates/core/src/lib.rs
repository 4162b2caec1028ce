//! Train, export, deploy and benchmark small convolutional image classifiers.

pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod exchange;
pub mod graph;
pub mod ops;
pub mod preprocess;
pub mod rng;
pub mod runtime;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod zoo;

pub use error::{Error, Result};
