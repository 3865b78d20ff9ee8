//! Federated speech-to-text on a desk-scale simulator.

pub mod data;
pub mod decode;
pub mod error;
pub mod experiment;
pub mod fed;
pub mod model;
pub mod retrieval;
pub mod rng;

pub use error::{Error, Result};
