use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the encoder → weight head → aggregation → decoder stack.
///
/// Self-conditioning layers are 1-based block indices: `encoder_condition =
/// [2, 3]` conditions on the outputs of the second and third encoder blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Input feature dimension `D_in`.
    pub input_dim: usize,
    /// Hidden width `D_model`.
    pub model_dim: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    pub ff_dim: usize,
    /// Frame-stacking factor between input frames and encoder steps.
    pub subsample: usize,
    /// Number of non-blank tokens `K`.
    pub vocab_size: usize,
    pub encoder_condition: Vec<usize>,
    pub decoder_condition: Vec<usize>,
    /// Applied in training mode only.
    pub dropout: f64,
    /// Add sinusoidal positions after subsampling. Turning this off makes the
    /// encoder permutation-equivariant over subsampled steps.
    pub encoder_positional: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            model_dim: 64,
            heads: 2,
            encoder_blocks: 4,
            decoder_blocks: 2,
            ff_dim: 128,
            subsample: 4,
            vocab_size: 20,
            encoder_condition: vec![2, 3],
            decoder_condition: vec![1],
            dropout: 0.0,
            encoder_positional: true,
            seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.input_dim == 0 || self.model_dim == 0 || self.ff_dim == 0 || self.vocab_size == 0 {
            return bad("dimensions and vocab_size must be positive".into());
        }
        if self.heads == 0 || self.model_dim % self.heads != 0 {
            return bad(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            ));
        }
        if self.subsample == 0 {
            return bad("subsample must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        for (side, layers, blocks) in [
            ("encoder", &self.encoder_condition, self.encoder_blocks),
            ("decoder", &self.decoder_condition, self.decoder_blocks),
        ] {
            if let Some(&l) = layers.iter().find(|&&l| l == 0 || l > blocks) {
                return bad(format!("{side} conditioning layer {l} outside 1..={blocks}"));
            }
            if layers.windows(2).any(|w| w[0] >= w[1]) {
                return bad(format!("{side} conditioning layers must be strictly increasing"));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    /// Output classes including the blank.
    pub fn classes(&self) -> usize {
        self.vocab_size + 1
    }

    pub fn conditioning_layers(&self) -> usize {
        self.encoder_condition.len() + self.decoder_condition.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        let c = ModelConfig {
            heads: 3,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            encoder_condition: vec![5],
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            subsample: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }
}
