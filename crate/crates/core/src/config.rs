//! Encoder hyperparameters plus the pruning schedule.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// FFN2 thresholds per layer for the 12-layer DeiT-S schedule.
pub const DEIT_S_FFN2_THRESHOLDS: [f64; 12] =
    [1.5, 1.5, 1.5, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.8];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("{field}: {reason}")]
    Invalid { field: &'static str, reason: String },
    #[error("unknown preset '{0}' (known: deit-s, deit-ti, tiny)")]
    UnknownPreset(String),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field,
        reason: reason.into(),
    }
}

fn default_activation() -> String {
    "relu".into()
}

fn default_token_selector() -> String {
    "topk".into()
}

fn default_ffn2_pruner() -> String {
    "threshold".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    /// Token count including the class token.
    pub num_tokens: usize,
    /// 1-indexed layers that start by discarding tokens.
    pub prune_layers: Vec<usize>,
    pub keep_ratio: f64,
    pub ffn2_thresholds: Vec<f64>,
    /// Registry name of the FFN activation.
    #[serde(default = "default_activation")]
    pub activation: String,
    #[serde(default = "default_token_selector")]
    pub token_selector: String,
    #[serde(default = "default_ffn2_pruner")]
    pub ffn2_pruner: String,
}

impl EncoderConfig {
    /// DeiT-Small at 224x224: 12 layers, d=384, 6 heads, 197 tokens,
    /// pruning at layers 4/7/10 with keep ratio 0.5.
    pub fn deit_s() -> Self {
        Self {
            num_layers: 12,
            embed_dim: 384,
            num_heads: 6,
            head_dim: 64,
            ffn_dim: 1536,
            num_tokens: 197,
            prune_layers: vec![4, 7, 10],
            keep_ratio: 0.5,
            ffn2_thresholds: DEIT_S_FFN2_THRESHOLDS.to_vec(),
            activation: default_activation(),
            token_selector: default_token_selector(),
            ffn2_pruner: default_ffn2_pruner(),
        }
    }

    pub fn deit_ti() -> Self {
        Self {
            embed_dim: 192,
            num_heads: 3,
            ffn_dim: 768,
            ..Self::deit_s()
        }
    }

    /// Two-layer toy encoder for quick runs.
    pub fn tiny() -> Self {
        Self {
            num_layers: 2,
            embed_dim: 16,
            num_heads: 2,
            head_dim: 8,
            ffn_dim: 32,
            num_tokens: 8,
            prune_layers: vec![2],
            keep_ratio: 0.5,
            ffn2_thresholds: vec![0.5, 0.5],
            activation: default_activation(),
            token_selector: default_token_selector(),
            ffn2_pruner: default_ffn2_pruner(),
        }
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "deit-s" => Ok(Self::deit_s()),
            "deit-ti" => Ok(Self::deit_ti()),
            "tiny" => Ok(Self::tiny()),
            other => Err(ConfigError::UnknownPreset(other.to_string())),
        }
    }

    /// Same shapes with both pruning mechanisms switched off.
    pub fn dense(&self) -> Self {
        Self {
            prune_layers: Vec::new(),
            keep_ratio: 1.0,
            ffn2_thresholds: vec![0.0; self.num_layers],
            ffn2_pruner: "keep-all".into(),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (field, v) in [
            ("num_layers", self.num_layers),
            ("embed_dim", self.embed_dim),
            ("num_heads", self.num_heads),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("num_tokens", self.num_tokens),
        ] {
            if v == 0 {
                return Err(invalid(field, "must be positive"));
            }
        }
        if self.embed_dim != self.num_heads * self.head_dim {
            return Err(invalid(
                "embed_dim",
                format!(
                    "{} != num_heads {} x head_dim {}",
                    self.embed_dim, self.num_heads, self.head_dim
                ),
            ));
        }
        if !(self.keep_ratio > 0.0 && self.keep_ratio <= 1.0) {
            return Err(invalid(
                "keep_ratio",
                format!("{} is outside (0, 1]", self.keep_ratio),
            ));
        }
        for pair in self.prune_layers.windows(2) {
            if pair[0] >= pair[1] {
                return Err(invalid("prune_layers", "must be strictly increasing"));
            }
        }
        if let Some(&l) = self
            .prune_layers
            .iter()
            .find(|&&l| l < 1 || l > self.num_layers)
        {
            return Err(invalid(
                "prune_layers",
                format!("layer {l} outside [1, {}]", self.num_layers),
            ));
        }
        if self.prune_layers.first() == Some(&1) {
            return Err(invalid(
                "prune_layers",
                "layer 1 has no preceding attention map to rank tokens",
            ));
        }
        if self.ffn2_thresholds.len() != self.num_layers {
            return Err(invalid(
                "ffn2_thresholds",
                format!(
                    "expected {} entries, got {}",
                    self.num_layers,
                    self.ffn2_thresholds.len()
                ),
            ));
        }
        if let Some(t) = self
            .ffn2_thresholds
            .iter()
            .find(|t| !(t.is_finite() && **t >= 0.0))
        {
            return Err(invalid(
                "ffn2_thresholds",
                format!("{t} is not a finite non-negative value"),
            ));
        }
        Ok(())
    }

    pub fn is_prune_layer(&self, layer: usize) -> bool {
        self.prune_layers.contains(&layer)
    }

    /// Encoder weight parameters: per layer 4·d² + 2·d·ffn_dim.
    pub fn weight_count(&self) -> u64 {
        let d = self.embed_dim as u64;
        let f = self.ffn_dim as u64;
        self.num_layers as u64 * (4 * d * d + 2 * d * f)
    }

    /// Short hex digest of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// First 16 hex digits of SHA-256 over the value's JSON encoding.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config serializes");
    let digest = Sha256::digest(&bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}
