//! Class-attention Top-K token pruning and threshold-based FFN2 dimension
//! pruning.
//!
//! Token pruning ranks the non-class tokens by the head-averaged attention
//! the class token pays them and keeps `K = ceil((N - 1) * rho)` of them;
//! the class token is always kept. FFN2 pruning sums each post-activation
//! dimension over all tokens and keeps the dimension only if the sum is
//! strictly above the layer threshold, which removes the matching FFN2
//! weight row from both compute and fetch.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::EncoderConfig;

const SOFTMAX_ROW_TOL: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PruneError {
    #[error("expected {expected} attention heads, got {actual}")]
    HeadCount { expected: usize, actual: usize },
    #[error("head {head}: {reason}")]
    NotSoftmaxRow { head: usize, reason: String },
    #[error("score vector has {actual} entries, expected {expected}")]
    ScoreLength { expected: usize, actual: usize },
    #[error("keep ratio {0} outside (0, 1]")]
    KeepRatio(f64),
    #[error("negative post-activation {value} at token {token}, dim {dim}; ReLU must precede FFN2 pruning")]
    NegativeActivation {
        token: usize,
        dim: usize,
        value: f64,
    },
    #[error("activation matrix has {actual} values, expected {rows}x{cols}")]
    MatrixShape {
        rows: usize,
        cols: usize,
        actual: usize,
    },
    #[error("threshold {0} must be finite and >= 0")]
    Threshold(f64),
}

/// Head-averaged class attention for every non-class token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAttentionScores {
    pub scores: Vec<f64>,
    pub source_layer: usize,
}

/// Kept token positions (relative to the layer input), class token first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenKeepSet {
    pub kept_indices: Vec<usize>,
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ffn2KeepMask {
    pub mask: Vec<bool>,
    pub accumulated: Vec<f64>,
    pub threshold: f64,
}

impl Ffn2KeepMask {
    pub fn kept_dims(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        self.mask
            .iter()
            .enumerate()
            .filter_map(|(j, &m)| m.then_some(j))
            .collect()
    }

    pub fn skip_ratio(&self) -> f64 {
        1.0 - self.kept_dims() as f64 / self.mask.len() as f64
    }
}

/// Averages the class-token attention rows of all heads and drops the
/// class token's self-attention entry.
pub fn class_attention(
    attn_probs_per_head: &[Vec<f64>],
    expected_heads: usize,
    source_layer: usize,
) -> Result<ClassAttentionScores, PruneError> {
    if attn_probs_per_head.len() != expected_heads || expected_heads == 0 {
        return Err(PruneError::HeadCount {
            expected: expected_heads,
            actual: attn_probs_per_head.len(),
        });
    }
    let n = attn_probs_per_head[0].len();
    for (h, row) in attn_probs_per_head.iter().enumerate() {
        if row.len() != n {
            return Err(PruneError::NotSoftmaxRow {
                head: h,
                reason: format!("length {} differs from head 0 ({n})", row.len()),
            });
        }
        if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(PruneError::NotSoftmaxRow {
                head: h,
                reason: "contains negative or non-finite probabilities".into(),
            });
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > SOFTMAX_ROW_TOL {
            return Err(PruneError::NotSoftmaxRow {
                head: h,
                reason: format!("sums to {sum}"),
            });
        }
    }
    let heads = expected_heads as f64;
    let scores = (1..n)
        .map(|j| attn_probs_per_head.iter().map(|row| row[j]).sum::<f64>() / heads)
        .collect();
    Ok(ClassAttentionScores {
        scores,
        source_layer,
    })
}

/// `K = ceil((n_tokens - 1) * keep_ratio)`, clamped to `[0, n_tokens - 1]`.
pub fn keep_count(n_tokens: usize, keep_ratio: f64) -> usize {
    let candidates = n_tokens.saturating_sub(1);
    // 1e-9 absorbs representation error in ratios such as 2/3.
    let k = ((candidates as f64) * keep_ratio - 1e-9).ceil().max(0.0) as usize;
    k.min(candidates)
}

/// Keeps the class token plus the `K` highest-scoring tokens. Equal scores
/// resolve toward the lower index; the result is sorted ascending.
pub fn topk_select(
    scores: &ClassAttentionScores,
    keep_ratio: f64,
    n_tokens: usize,
) -> Result<TokenKeepSet, PruneError> {
    if !(keep_ratio > 0.0 && keep_ratio <= 1.0) {
        return Err(PruneError::KeepRatio(keep_ratio));
    }
    let expected = n_tokens.saturating_sub(1);
    if scores.scores.len() != expected {
        return Err(PruneError::ScoreLength {
            expected,
            actual: scores.scores.len(),
        });
    }
    let k = keep_count(n_tokens, keep_ratio);
    let mut order: Vec<usize> = (0..expected).collect();
    // Stable sort on descending score keeps earlier indices first among ties.
    order.sort_by(|&a, &b| scores.scores[b].total_cmp(&scores.scores[a]));
    let mut kept_indices: Vec<usize> = std::iter::once(0)
        .chain(order[..k].iter().map(|&j| j + 1))
        .collect();
    kept_indices.sort_unstable();
    Ok(TokenKeepSet { kept_indices, k })
}

/// Column sums of a non-negative `[rows x cols]` matrix compared strictly
/// against `threshold`.
pub fn ffn2_accumulate_and_mask(
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
    if !(threshold.is_finite() && threshold >= 0.0) {
        return Err(PruneError::Threshold(threshold));
    }
    let mut accumulated = vec![0.0f64; cols];
    for t in 0..rows {
        for (j, acc) in accumulated.iter_mut().enumerate() {
            let v = post_act[t * cols + j];
            if v < 0.0 || v.is_nan() {
                return Err(PruneError::NegativeActivation {
                    token: t,
                    dim: j,
                    value: v,
                });
            }
            *acc += v;
        }
    }
    let mask = accumulated.iter().map(|&a| a > threshold).collect();
    Ok(Ffn2KeepMask {
        mask,
        accumulated,
        threshold,
    })
}

/// Tokens entering and leaving each layer under the configured ceiling
/// chain, assuming every pruning event fires.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTokens {
    pub tokens_in: usize,
    pub tokens_out: usize,
}

pub fn token_schedule(config: &EncoderConfig) -> Vec<LayerTokens> {
    let mut n = config.num_tokens;
    (1..=config.num_layers)
        .map(|layer| {
            let tokens_in = n;
            if config.is_prune_layer(layer) && config.keep_ratio < 1.0 {
                n = keep_count(n, config.keep_ratio) + 1;
            }
            LayerTokens {
                tokens_in,
                tokens_out: n,
            }
        })
        .collect()
}
