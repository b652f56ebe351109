use serde::{Deserialize, Serialize};

use super::ops::GeluVariant;
use crate::{Error, Result};

/// GPT-NeoX block hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub n_layers: usize,
    pub d_mlp: usize,
    /// Fraction of each head's dims that receive rotary embedding.
    pub rotary_pct: f64,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
    pub vocab: usize,
    #[serde(default = "default_true")]
    pub parallel_residual: bool,
    #[serde(default = "default_theta")]
    pub rope_theta: f64,
    #[serde(default)]
    pub gelu: GeluVariant,
}

fn default_ln_eps() -> f64 {
    1e-5
}

fn default_true() -> bool {
    true
}

fn default_theta() -> f64 {
    10_000.0
}

pub const PRESET_NAMES: [&str; 3] = ["pythia-2.8b", "pythia-6.9b", "tiny"];

impl ModelConfig {
    fn base(hidden: usize, n_heads: usize, n_layers: usize, d_mlp: usize, vocab: usize) -> Self {
        ModelConfig {
            hidden,
            n_heads,
            d_head: hidden / n_heads,
            n_layers,
            d_mlp,
            rotary_pct: 0.25,
            ln_eps: default_ln_eps(),
            vocab,
            parallel_residual: true,
            rope_theta: default_theta(),
            gelu: GeluVariant::Exact,
        }
    }

    /// Pythia-2.8B: d_head 80, 25% rotary, MLP width 10240, 32 layers.
    pub fn pythia_2_8b() -> Self {
        Self::base(2560, 32, 32, 10240, 50304)
    }

    /// Pythia-6.9B, from the public GPT-NeoX architecture definition.
    pub fn pythia_6_9b() -> Self {
        Self::base(4096, 32, 32, 16384, 50432)
    }

    /// Small block for fixtures and exhaustive tests.
    pub fn tiny() -> Self {
        ModelConfig {
            rotary_pct: 0.5,
            ..Self::base(8, 2, 2, 16, 16)
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "pythia-2.8b" => Ok(Self::pythia_2_8b()),
            "pythia-6.9b" => Ok(Self::pythia_6_9b()),
            "tiny" => Ok(Self::tiny()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (known: {})",
                PRESET_NAMES.join(", ")
            ))),
        }
    }

    /// `floor(rotary_pct * d_head)`. A 1e-9 slack absorbs binary
    /// representation error in the fraction (0.3 * 10 is 2.9999999999999996).
    pub fn rotary_dims(&self) -> usize {
        (self.rotary_pct * self.d_head as f64 + 1e-9).floor() as usize
    }

    pub fn attn_scale(&self) -> f64 {
        1.0 / (self.d_head as f64).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("hidden", self.hidden),
            ("n_heads", self.n_heads),
            ("d_head", self.d_head),
            ("n_layers", self.n_layers),
            ("d_mlp", self.d_mlp),
            ("vocab", self.vocab),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.hidden != self.n_heads * self.d_head {
            return Err(Error::Config(format!(
                "hidden {} != n_heads {} x d_head {}",
                self.hidden, self.n_heads, self.d_head
            )));
        }
        if !(self.rotary_pct > 0.0 && self.rotary_pct <= 1.0) {
            return Err(Error::Config(format!("rotary_pct {} outside (0, 1]", self.rotary_pct)));
        }
        let rd = self.rotary_dims();
        if rd < 2 || !rd.is_multiple_of(2) {
            return Err(Error::Config(format!("rotary dims {rd} must be even and at least 2")));
        }
        if !(self.ln_eps >= 0.0 && self.ln_eps.is_finite()) {
            return Err(Error::Config(format!("ln_eps {} invalid", self.ln_eps)));
        }
        if !(self.rope_theta > 0.0 && self.rope_theta.is_finite()) {
            return Err(Error::Config(format!("rope_theta {} invalid", self.rope_theta)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for name in PRESET_NAMES {
            ModelConfig::preset(name).unwrap().validate().unwrap();
        }
        assert!(ModelConfig::preset("gpt-j").is_err());
    }

    #[test]
    fn pythia_2_8b_rotary_slice() {
        let cfg = ModelConfig::pythia_2_8b();
        assert_eq!(cfg.d_head, 80);
        assert_eq!(cfg.rotary_dims(), 20);
    }

    #[test]
    fn rejects_inconsistent_dims() {
        let mut cfg = ModelConfig::tiny();
        cfg.hidden = 9;
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::tiny();
        cfg.rotary_pct = 0.25; // floor(0.25 * 4) = 1
        assert!(cfg.validate().is_err());

        let mut cfg = ModelConfig::tiny();
        cfg.d_mlp = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fractional_rotary_floor() {
        let mut cfg = ModelConfig::tiny();
        cfg.d_head = 10;
        cfg.rotary_pct = 0.3;
        assert_eq!(cfg.rotary_dims(), 3);
    }
}
