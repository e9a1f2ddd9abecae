//! Name-keyed registry of the interchangeable pieces of the pipeline:
//! FFN activations, token selectors and FFN2 pruners.
//!
//! Configs refer to strategies by name; [`Registry::resolve`] turns the
//! names in an [`EncoderConfig`] into trait objects and rejects
//! combinations that cannot work (a threshold pruner behind an activation
//! that can go negative).

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::config::EncoderConfig;
use crate::pruning::{
    ffn2_accumulate_and_mask, keep_count, topk_select, ClassAttentionScores, Ffn2KeepMask,
    PruneError, TokenKeepSet,
};

pub trait Activation: Send + Sync {
    fn name(&self) -> &'static str;
    fn apply(&self, x: f64) -> f64;
    /// True when every output is >= 0.
    fn non_negative(&self) -> bool;
}

pub trait TokenSelector: Send + Sync {
    fn name(&self) -> &'static str;
    fn select(
        &self,
        scores: &ClassAttentionScores,
        keep_ratio: f64,
        n_tokens: usize,
    ) -> Result<TokenKeepSet, PruneError>;
}

pub trait Ffn2Pruner: Send + Sync {
    fn name(&self) -> &'static str;
    fn requires_non_negative(&self) -> bool;
    fn keep_mask(
        &self,
        post_act: &[f64],
        rows: usize,
        cols: usize,
        threshold: f64,
    ) -> Result<Ffn2KeepMask, PruneError>;
}

pub struct Relu;

impl Activation for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn apply(&self, x: f64) -> f64 {
        x.max(0.0)
    }

    fn non_negative(&self) -> bool {
        true
    }
}

/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`
pub fn gelu_tanh(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn relu(x: f64) -> f64 {
    x.max(0.0)
}

pub struct GeluTanh;

impl Activation for GeluTanh {
    fn name(&self) -> &'static str {
        "gelu_tanh"
    }

    fn apply(&self, x: f64) -> f64 {
        gelu_tanh(x)
    }

    fn non_negative(&self) -> bool {
        false
    }
}

/// Class-attention Top-K.
pub struct TopKSelector;

impl TokenSelector for TopKSelector {
    fn name(&self) -> &'static str {
        "topk"
    }

    fn select(
        &self,
        scores: &ClassAttentionScores,
        keep_ratio: f64,
        n_tokens: usize,
    ) -> Result<TokenKeepSet, PruneError> {
        topk_select(scores, keep_ratio, n_tokens)
    }
}

/// Never discards a token.
pub struct KeepAllTokens;

impl TokenSelector for KeepAllTokens {
    fn name(&self) -> &'static str {
        "keep-all"
    }

    fn select(
        &self,
        _scores: &ClassAttentionScores,
        _keep_ratio: f64,
        n_tokens: usize,
    ) -> Result<TokenKeepSet, PruneError> {
        Ok(TokenKeepSet {
            kept_indices: (0..n_tokens).collect(),
            k: keep_count(n_tokens, 1.0),
        })
    }
}

/// Per-dimension accumulation against the layer threshold.
pub struct ThresholdPruner;

impl Ffn2Pruner for ThresholdPruner {
    fn name(&self) -> &'static str {
        "threshold"
    }

    fn requires_non_negative(&self) -> bool {
        true
    }

    fn keep_mask(
        &self,
        post_act: &[f64],
        rows: usize,
        cols: usize,
        threshold: f64,
    ) -> Result<Ffn2KeepMask, PruneError> {
        ffn2_accumulate_and_mask(post_act, rows, cols, threshold)
    }
}

/// Keeps every FFN2 row; accumulations are still reported.
pub struct KeepAllDims;

impl Ffn2Pruner for KeepAllDims {
    fn name(&self) -> &'static str {
        "keep-all"
    }

    fn requires_non_negative(&self) -> bool {
        false
    }

    fn keep_mask(
        &self,
        post_act: &[f64],
        rows: usize,
        cols: usize,
        threshold: f64,
    ) -> Result<Ffn2KeepMask, PruneError> {
        if post_act.len() != rows * cols {
            return Err(PruneError::MatrixShape {
                rows,
                cols,
                actual: post_act.len(),
            });
        }
        let mut accumulated = vec![0.0; cols];
        for row in post_act.chunks(cols) {
            for (a, v) in accumulated.iter_mut().zip(row) {
                *a += v;
            }
        }
        Ok(Ffn2KeepMask {
            mask: vec![true; cols],
            accumulated,
            threshold,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StrategyError {
    #[error("unknown {kind} '{name}' (registered: {known})")]
    Unknown {
        kind: &'static str,
        name: String,
        known: String,
    },
    #[error(
        "FFN2 pruner '{pruner}' needs non-negative activations but '{activation}' can go negative"
    )]
    Incompatible { pruner: String, activation: String },
}

/// The strategies one engine run uses.
#[derive(Clone)]
pub struct Strategies {
    pub activation: Arc<dyn Activation>,
    pub token_selector: Arc<dyn TokenSelector>,
    pub ffn2_pruner: Arc<dyn Ffn2Pruner>,
}

impl fmt::Debug for Strategies {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Strategies")
            .field("activation", &self.activation.name())
            .field("token_selector", &self.token_selector.name())
            .field("ffn2_pruner", &self.ffn2_pruner.name())
            .finish()
    }
}

#[derive(Clone, Default)]
pub struct Registry {
    activations: BTreeMap<String, Arc<dyn Activation>>,
    token_selectors: BTreeMap<String, Arc<dyn TokenSelector>>,
    ffn2_pruners: BTreeMap<String, Arc<dyn Ffn2Pruner>>,
}

fn lookup<T: ?Sized>(
    map: &BTreeMap<String, Arc<T>>,
    kind: &'static str,
    name: &str,
) -> Result<Arc<T>, StrategyError> {
    map.get(name)
        .cloned()
        .ok_or_else(|| StrategyError::Unknown {
            kind,
            name: name.to_string(),
            known: map.keys().cloned().collect::<Vec<_>>().join(", "),
        })
}

impl Registry {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register_activation(Arc::new(Relu));
        r.register_activation(Arc::new(GeluTanh));
        r.register_token_selector(Arc::new(TopKSelector));
        r.register_token_selector(Arc::new(KeepAllTokens));
        r.register_ffn2_pruner(Arc::new(ThresholdPruner));
        r.register_ffn2_pruner(Arc::new(KeepAllDims));
        r
    }

    pub fn register_activation(&mut self, a: Arc<dyn Activation>) {
        self.activations.insert(a.name().to_string(), a);
    }

    pub fn register_token_selector(&mut self, s: Arc<dyn TokenSelector>) {
        self.token_selectors.insert(s.name().to_string(), s);
    }

    pub fn register_ffn2_pruner(&mut self, p: Arc<dyn Ffn2Pruner>) {
        self.ffn2_pruners.insert(p.name().to_string(), p);
    }

    pub fn activation(&self, name: &str) -> Result<Arc<dyn Activation>, StrategyError> {
        lookup(&self.activations, "activation", name)
    }

    pub fn token_selector(&self, name: &str) -> Result<Arc<dyn TokenSelector>, StrategyError> {
        lookup(&self.token_selectors, "token selector", name)
    }

    pub fn ffn2_pruner(&self, name: &str) -> Result<Arc<dyn Ffn2Pruner>, StrategyError> {
        lookup(&self.ffn2_pruners, "FFN2 pruner", name)
    }

    pub fn activation_names(&self) -> Vec<&str> {
        self.activations.keys().map(String::as_str).collect()
    }

    pub fn resolve(&self, config: &EncoderConfig) -> Result<Strategies, StrategyError> {
        let activation = self.activation(&config.activation)?;
        let token_selector = self.token_selector(&config.token_selector)?;
        let ffn2_pruner = self.ffn2_pruner(&config.ffn2_pruner)?;
        if ffn2_pruner.requires_non_negative() && !activation.non_negative() {
            return Err(StrategyError::Incompatible {
                pruner: ffn2_pruner.name().into(),
                activation: activation.name().into(),
            });
        }
        Ok(Strategies {
            activation,
            token_selector,
            ffn2_pruner,
        })
    }
}
