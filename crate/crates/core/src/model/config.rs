use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of an encoder-decoder Transformer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    /// Six encoder and six decoder layers at desk width.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            enc_layers: 6,
            dec_layers: 6,
            d_model: 32,
            heads: 4,
            d_ff: 64,
            vocab_size,
            max_seq_len: 32,
        }
    }

    /// The base Transformer dimensions (6+6 layers, 512 wide, 8 heads).
    pub fn full_scale(vocab_size: usize) -> Self {
        Self {
            enc_layers: 6,
            dec_layers: 6,
            d_model: 512,
            heads: 8,
            d_ff: 2048,
            vocab_size,
            max_seq_len: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn encoder_layer_params(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        4 * d * d + 2 * d * f + 9 * d + f
    }

    pub fn decoder_layer_params(&self) -> usize {
        let (d, f) = (self.d_model, self.d_ff);
        8 * d * d + 2 * d * f + 15 * d + f
    }

    pub fn embedding_params(&self) -> usize {
        self.vocab_size * self.d_model
    }

    /// Closed-form total for a model with the given stack depths.
    pub fn total_params(&self, enc_depth: usize, dec_depth: usize) -> usize {
        enc_depth * self.encoder_layer_params()
            + dec_depth * self.decoder_layer_params()
            + self.embedding_params()
            + 4 * self.d_model
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn heads_must_divide_width() {
        let mut c = ModelConfig::desk(50);
        c.heads = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.heads = 4;
        c.validate().unwrap();
        c.vocab_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn decoder_layer_count_at_base_transformer_width() {
        // Self-attention, cross-attention, FFN and three norms at d=512, d_ff=2048.
        let c = ModelConfig::full_scale(1);
        assert_eq!(c.decoder_layer_params(), 4_204_032);
    }
}
