//! Model configuration, loadable from a `key=value` text file.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub n_vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ffn: usize,
    pub max_seq: usize,
    pub k_scale: f32,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Toy defaults, small enough for exhaustive CI.
    fn default() -> Self {
        ModelConfig {
            n_vocab: 1000,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ffn: 256,
            max_seq: 128,
            // The protocol-level default noise coefficient is 100, but f32
            // shares quantize reconstructed values at roughly 2e-8 * k^2 *
            // sqrt(dim) relative error, so the toy default picks a smaller k
            // that keeps hidden states within the engine's 1e-3 budget.
            k_scale: 25.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_vocab == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.n_layers == 0
            || self.d_ffn == 0
            || self.max_seq == 0
        {
            return Err(Error::validation("all model dimensions must be positive"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::validation(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.k_scale.is_nan() || self.k_scale <= 0.0 {
            return Err(Error::validation("k_scale must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Parse `key=value` lines; `#` starts a comment; unknown keys are
    /// rejected. Missing keys keep their defaults.
    pub fn from_text(text: &str) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::validation(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let parse_usize = || -> Result<usize> {
                value
                    .parse()
                    .map_err(|_| Error::validation(format!("line {}: bad value for {key}", lineno + 1)))
            };
            match key {
                "n_vocab" => cfg.n_vocab = parse_usize()?,
                "d_model" => cfg.d_model = parse_usize()?,
                "n_heads" => cfg.n_heads = parse_usize()?,
                "n_layers" => cfg.n_layers = parse_usize()?,
                "d_ffn" => cfg.d_ffn = parse_usize()?,
                "max_seq" => cfg.max_seq = parse_usize()?,
                "k_scale" => {
                    cfg.k_scale = value.parse().map_err(|_| {
                        Error::validation(format!("line {}: bad value for k_scale", lineno + 1))
                    })?
                }
                "seed" => {
                    cfg.seed = value.parse().map_err(|_| {
                        Error::validation(format!("line {}: bad value for seed", lineno + 1))
                    })?
                }
                other => {
                    return Err(Error::validation(format!(
                        "line {}: unknown key {other}",
                        lineno + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<ModelConfig> {
        ModelConfig::from_text(&std::fs::read_to_string(path)?)
    }
}
