use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Beginning-of-sequence id; the decoder's first input.
pub const BOS: u32 = 0;
/// End-of-sequence id; the final decoding target of every example.
pub const EOS: u32 = 1;
/// Padding id. Reserved, never emitted.
pub const PAD: u32 = 2;
/// Smallest id of an ordinary token.
pub const FIRST_TOKEN: u32 = 3;

/// A weight matrix that can carry a LoRA adapter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LoraTarget {
    /// Encoder projection, `d_h × d_f`.
    Enc,
    /// Attention query projection, `d_h × d_h`.
    Query,
    /// Decoder hidden layer, `d_h × 2·d_h`.
    Hidden,
    /// Output projection, `V × d_h`.
    Output,
}

impl LoraTarget {
    pub const ALL: [LoraTarget; 4] = [
        LoraTarget::Enc,
        LoraTarget::Query,
        LoraTarget::Hidden,
        LoraTarget::Output,
    ];

    pub fn bit(self) -> u32 {
        match self {
            LoraTarget::Enc => 1,
            LoraTarget::Query => 2,
            LoraTarget::Hidden => 4,
            LoraTarget::Output => 8,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LoraTarget::Enc => "enc",
            LoraTarget::Query => "q",
            LoraTarget::Hidden => "h",
            LoraTarget::Output => "o",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "enc" => Ok(LoraTarget::Enc),
            "q" | "query" => Ok(LoraTarget::Query),
            "h" | "hidden" => Ok(LoraTarget::Hidden),
            "o" | "out" | "output" => Ok(LoraTarget::Output),
            other => Err(Error::Config(format!("unknown LoRA target {other:?}"))),
        }
    }

    /// `(rows, cols)` of the targeted matrix.
    pub fn shape(self, config: &ModelConfig) -> (usize, usize) {
        let (df, dh, v) = (config.feature_dim, config.hidden_dim, config.vocab_size);
        match self {
            LoraTarget::Enc => (dh, df),
            LoraTarget::Query => (dh, dh),
            LoraTarget::Hidden => (dh, 2 * dh),
            LoraTarget::Output => (v, dh),
        }
    }
}

/// Architecture hyperparameters. All parameter shapes follow from these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    /// Includes the reserved BOS, EOS and PAD ids.
    pub vocab_size: usize,
    /// Sorted, without duplicates.
    pub lora_targets: Vec<LoraTarget>,
    pub lora_rank: usize,
    pub lora_alpha: f64,
}

impl ModelConfig {
    pub fn new(
        feature_dim: usize,
        hidden_dim: usize,
        vocab_size: usize,
        lora_targets: &[LoraTarget],
        lora_rank: usize,
        lora_alpha: f64,
    ) -> Result<Self> {
        let mut targets = lora_targets.to_vec();
        targets.sort();
        targets.dedup();
        let config = ModelConfig {
            feature_dim,
            hidden_dim,
            vocab_size,
            lora_targets: targets,
            lora_rank,
            lora_alpha,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("feature_dim and hidden_dim must be positive".into()));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room for ordinary tokens",
                self.vocab_size
            )));
        }
        if self.lora_rank == 0 {
            return Err(Error::Config("lora_rank must be positive".into()));
        }
        if !(self.lora_alpha.is_finite() && self.lora_alpha > 0.0) {
            return Err(Error::Config("lora_alpha must be a positive real".into()));
        }
        if self.lora_targets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("lora_targets must be sorted and unique".into()));
        }
        for &t in &self.lora_targets {
            let (rows, cols) = t.shape(self);
            if self.lora_rank > rows.min(cols) {
                return Err(Error::Config(format!(
                    "lora_rank {} exceeds min dimension of {} ({rows}×{cols})",
                    self.lora_rank,
                    t.name()
                )));
            }
        }
        Ok(())
    }

    pub fn targets(&self, t: LoraTarget) -> bool {
        self.lora_targets.contains(&t)
    }

    pub fn targets_mask(&self) -> u32 {
        self.lora_targets.iter().map(|t| t.bit()).sum()
    }

    /// LoRA scale `α / r`.
    pub fn lora_scale(&self) -> f64 {
        self.lora_alpha / self.lora_rank as f64
    }

    pub fn check_token(&self, id: u32) -> Result<()> {
        if (id as usize) < self.vocab_size {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange {
                id,
                vocab: self.vocab_size,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rank_bounded_by_smallest_target_dimension() {
        assert!(ModelConfig::new(3, 8, 10, &[LoraTarget::Enc], 3, 6.0).is_ok());
        assert!(ModelConfig::new(3, 8, 10, &[LoraTarget::Enc], 4, 8.0).is_err());
        // rank 4 fits Query (8×8) but not Enc (8×3)
        assert!(ModelConfig::new(3, 8, 10, &[LoraTarget::Query], 4, 8.0).is_ok());
    }

    #[test]
    fn rejects_tiny_vocab_and_bad_alpha() {
        assert!(ModelConfig::new(3, 4, 3, &[], 1, 1.0).is_err());
        assert!(ModelConfig::new(3, 4, 8, &[], 1, 0.0).is_err());
        assert!(ModelConfig::new(3, 4, 8, &[], 1, f64::NAN).is_err());
    }

    #[test]
    fn targets_are_normalized() {
        let c = ModelConfig::new(
            3,
            4,
            8,
            &[LoraTarget::Output, LoraTarget::Enc, LoraTarget::Output],
            1,
            2.0,
        )
        .unwrap();
        assert_eq!(c.lora_targets, vec![LoraTarget::Enc, LoraTarget::Output]);
        assert_eq!(c.targets_mask(), 9);
        assert_eq!(c.lora_scale(), 2.0);
    }
}
