use serde::{Deserialize, Serialize};

use super::{ModelError, Result};
use crate::corpus::{DEFAULT_SPEECH_VOCAB, DEFAULT_TEXT_VOCAB};

/// Which architecture a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Local encoder, global transformer over patches and text, local decoder.
    Lst,
    /// One transformer over raw speech and text tokens.
    Base,
    /// As `Base`, over BPE-merged speech units.
    Bpe,
}

impl std::str::FromStr for Architecture {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lst" => Ok(Self::Lst),
            "base" => Ok(Self::Base),
            "bpe" => Ok(Self::Bpe),
            other => Err(ModelError::Config(format!("unknown model `{other}`"))),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Lst => "lst",
            Self::Base => "base",
            Self::Bpe => "bpe",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_local: usize,
    pub d_global: usize,
    pub n_layers_enc: usize,
    pub n_layers_global: usize,
    pub n_layers_dec: usize,
    pub n_heads: usize,
    /// Sliding window of local self-attention, in tokens. 0 disables it.
    pub window: usize,
    pub rope_theta: f64,
    pub speech_vocab: usize,
    pub text_vocab: usize,
    pub init_std: f64,
    pub norm_eps: f64,
    /// Patch size used at inference.
    pub static_p: usize,
    /// Predict text tokens with a decoder head instead of the global text head.
    pub decoder_predicts_text: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_local: 64,
            d_global: 128,
            n_layers_enc: 1,
            n_layers_global: 4,
            n_layers_dec: 2,
            n_heads: 4,
            window: 64,
            rope_theta: 5e5,
            speech_vocab: DEFAULT_SPEECH_VOCAB as usize,
            text_vocab: DEFAULT_TEXT_VOCAB as usize,
            init_std: 0.02,
            norm_eps: 1e-6,
            static_p: 4,
            decoder_predicts_text: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.n_heads == 0 {
            return bad("n_heads must be positive".into());
        }
        for (name, d) in [("d_local", self.d_local), ("d_global", self.d_global)] {
            if d == 0 || d % self.n_heads != 0 {
                return bad(format!("{name}={d} is not a positive multiple of n_heads={}", self.n_heads));
            }
            if !(d / self.n_heads).is_multiple_of(2) {
                return bad(format!("{name}={d} gives an odd head dimension"));
            }
        }
        if self.speech_vocab == 0 || self.text_vocab == 0 {
            return bad("vocabularies must be non-empty".into());
        }
        if self.static_p == 0 {
            return bad("static_p must be at least 1".into());
        }
        if !(self.init_std > 0.0) || !(self.rope_theta > 0.0) || !(self.norm_eps > 0.0) {
            return bad("init_std, rope_theta and norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim_local(&self) -> usize {
        self.d_local / self.n_heads
    }

    pub fn head_dim_global(&self) -> usize {
        self.d_global / self.n_heads
    }
}
