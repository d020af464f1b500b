use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textcodec::PhonemeVocab;

/// Encoder hyperparameters and table sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub ffn: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub num_initials: usize,
    pub num_finals: usize,
    /// Longest sentence, in characters. The position table has
    /// `max_len + 1` rows; row 0 is padding.
    pub max_len: usize,
}

impl ModelConfig {
    /// Two layers, two heads, width 64, FFN 256, dropout 0.1.
    pub fn desk(vocab_size: usize, phonemes: &PhonemeVocab) -> Self {
        ModelConfig {
            layers: 2,
            heads: 2,
            d_model: 64,
            ffn: 256,
            dropout: 0.1,
            vocab_size,
            num_initials: phonemes.num_initials(),
            num_finals: phonemes.num_finals(),
            max_len: 140,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("heads", self.heads),
            ("d_model", self.d_model),
            ("ffn", self.ffn),
            ("vocab_size", self.vocab_size),
            ("num_initials", self.num_initials),
            ("num_finals", self.num_finals),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} is outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}
