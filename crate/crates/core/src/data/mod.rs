//! Synthetic heterogeneous "speech-to-text" clients and the WER metric.

mod io;
mod wer;
mod world;

use ndarray::Array2;

pub use io::{read_dataset, write_dataset, ClientRole};
pub use wer::{edit_distance, wer, WerStats};
pub use world::{generate_world, ClientProfile, Grammar, TokenRole, World, WorldConfig, PUBLIC_CLIENT};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, FIRST_TOKEN};

/// One utterance: `S × d_f` frames and its transcript (no reserved ids).
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub frames: Array2<f64>,
    pub tokens: Vec<u32>,
}

impl Example {
    pub fn new(frames: Array2<f64>, tokens: Vec<u32>) -> Result<Self> {
        let e = Example { frames, tokens };
        if e.frames.nrows() == 0 {
            return Err(Error::Empty("example frames"));
        }
        if e.tokens.is_empty() {
            return Err(Error::Empty("example tokens"));
        }
        if let Some(&t) = e.tokens.iter().find(|&&t| t < FIRST_TOKEN) {
            return Err(Error::Input(format!("reserved id {t} inside transcript")));
        }
        Ok(e)
    }

    /// Checks frame width and token range against a model.
    pub fn check(&self, config: &ModelConfig) -> Result<()> {
        if self.frames.ncols() != config.feature_dim {
            return Err(Error::FrameDim {
                expected: config.feature_dim,
                got: self.frames.ncols(),
            });
        }
        for &t in &self.tokens {
            config.check_token(t)?;
        }
        Ok(())
    }
}

/// One client's private data.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientDataset {
    pub client_id: u32,
    pub train: Vec<Example>,
    pub dev: Vec<Example>,
    pub test: Vec<Example>,
}

impl ClientDataset {
    /// Number of private training points, the aggregation weight.
    pub fn n_c(&self) -> usize {
        self.train.len()
    }
}
