//! Small deterministic decoder-only transformer.
//!
//! Pre-norm blocks with RMS normalization, multi-head or grouped-query
//! attention, a two-layer tanh-GELU MLP and untied input/output embeddings.
//! Weights are stored as `f32`; all activations and attention math run in
//! `f64`.

mod decoder;
mod reference;
mod weights;

pub use decoder::{
    generate, perplexity, teacher_forced_logits, DecoderState, GenerationRun, HeadAttention,
    Sampling, StepOutput,
};
pub use reference::forward_sequence;
pub use weights::{LayerWeights, Weights, WEIGHTS_MAGIC, WEIGHTS_VERSION};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CormError, Result};
use crate::position::PeKind;

fn default_norm_eps() -> f64 {
    1e-6
}

fn default_max_positions() -> usize {
    4096
}

/// Shape and initialization of a toy model. Read from and written to TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Equal to `n_heads` for multi-head attention, smaller for GQA.
    pub n_kv_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    /// MLP hidden width; `4 * d_model` when omitted.
    #[serde(default)]
    pub d_ff: Option<usize>,
    /// Size of the learned absolute-position table.
    #[serde(default = "default_max_positions")]
    pub max_positions: usize,
    #[serde(default)]
    pub pe: PeKind,
    pub seed: u64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

impl ModelConfig {
    /// Two layers, four heads, `d_model = 64`, byte vocabulary, RoPE.
    pub fn toy(seed: u64) -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 4,
            d_model: 64,
            vocab_size: 256,
            d_ff: None,
            max_positions: default_max_positions(),
            pe: PeKind::default(),
            seed,
            norm_eps: default_norm_eps(),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ff_dim(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d_model)
    }

    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    /// KV head read by query head `head`.
    pub fn kv_head_of(&self, head: usize) -> usize {
        head / self.group_size()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CormError::InvalidConfig(msg));
        if self.n_layers == 0 || self.n_heads == 0 || self.n_kv_heads == 0 {
            return bad("layer and head counts must be positive".into());
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return bad(format!(
                "n_heads {} is not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            ));
        }
        if self.vocab_size == 0 {
            return bad("vocab_size must be positive".into());
        }
        if self.ff_dim() == 0 {
            return bad("d_ff must be positive".into());
        }
        if matches!(self.pe, PeKind::AbsoluteLearned) && self.max_positions == 0 {
            return bad("learned positions need max_positions > 0".into());
        }
        if !(self.norm_eps.is_finite() && self.norm_eps > 0.0) {
            return bad("norm_eps must be positive".into());
        }
        self.pe.validate(self.head_dim(), self.n_heads)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: ModelConfig =
            toml::from_str(text).map_err(|e| CormError::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CormError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }
}

/// A model with its weights and the derived per-head ALiBi slopes.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    pub weights: Weights,
    alibi_slopes: Option<Vec<f64>>,
}

impl Model {
    /// Draws weights from the config seed; see [`Weights::init`] for the
    /// draw order.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let weights = Weights::init(&config);
        Ok(Self::assemble(config, weights))
    }

    pub fn from_weights(config: ModelConfig, weights: Weights) -> Result<Self> {
        config.validate()?;
        weights.check_shape(&config)?;
        Ok(Self::assemble(config, weights))
    }

    fn assemble(config: ModelConfig, weights: Weights) -> Self {
        let alibi_slopes = config.pe.alibi_slopes(config.n_heads);
        Model {
            config,
            weights,
            alibi_slopes,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn alibi_slopes(&self) -> Option<&[f64]> {
        self.alibi_slopes.as_deref()
    }

    pub fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        match tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            Some(&token) => Err(CormError::TokenOutOfRange {
                token,
                vocab_size: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Token embedding plus any additive absolute encoding, for 1-based
    /// step `t`.
    pub(crate) fn embed(&self, token: u32, t: usize) -> Vec<f64> {
        let d = self.config.d_model;
        let row = &self.weights.token_embedding[token as usize * d..(token as usize + 1) * d];
        let mut h: Vec<f64> = row.iter().map(|&x| f64::from(x)).collect();
        match &self.config.pe {
            PeKind::AbsoluteSinusoidal => {
                for (x, p) in h
                    .iter_mut()
                    .zip(crate::position::absolute_sinusoidal(t - 1, d))
                {
                    *x += p;
                }
            }
            PeKind::AbsoluteLearned => {
                let table = self
                    .weights
                    .position_table
                    .as_ref()
                    .expect("learned encoding has a table");
                let p = (t - 1) % self.config.max_positions;
                for (x, &e) in h.iter_mut().zip(&table[p * d..(p + 1) * d]) {
                    *x += f64::from(e);
                }
            }
            _ => {}
        }
        h
    }

    /// Additive attention bias between 1-based steps, zero unless ALiBi.
    pub(crate) fn attention_bias(&self, head: usize, query_step: usize, key_step: usize) -> f64 {
        match &self.alibi_slopes {
            Some(slopes) => -slopes[head] * (query_step - key_step) as f64,
            None => 0.0,
        }
    }

    pub(crate) fn rope_base(&self) -> Option<f64> {
        match self.config.pe {
            PeKind::Rope { base } => Some(base),
            _ => None,
        }
    }
}

pub(crate) fn matvec(weights: &[f32], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(weights.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    weights
        .chunks_exact(cols)
        .map(|row| row.iter().zip(x).map(|(&w, &v)| f64::from(w) * v).sum())
        .collect()
}

pub(crate) fn rms_norm(x: &[f64], gain: &[f32], eps: f64) -> Vec<f64> {
    let mean_sq = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (mean_sq + eps).sqrt();
    x.iter()
        .zip(gain)
        .map(|(v, &g)| v * inv * f64::from(g))
        .collect()
}

pub(crate) fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044_715 * x * x * x)).tanh())
}

pub(crate) fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}
