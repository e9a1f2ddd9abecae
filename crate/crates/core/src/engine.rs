//! Value-level execution of the pruned INT8 encoder stack.
//!
//! Per layer: optional token pruning (using the previous layer's class
//! attention), LayerNorm, QKV, per-head attention with a real-valued
//! softmax, projection, residual, LayerNorm, FFN1, activation, FFN2 dimension
//! pruning, FFN2 over the kept rows only, residual. GEMMs are exact INT8;
//! LayerNorm, softmax and residual adds run in `f64`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, EncoderConfig};
use crate::model::{LayerScales, LayerWeights, Model};
use crate::pruning::{class_attention, ClassAttentionScores, PruneError};
use crate::quant::{
    gemm_q8, gemm_q8_subset, max_abs_scale, quantize, AccTensor, QuantError, QuantTensor,
};
use crate::strategy::{Registry, Strategies, StrategyError};

/// Softmax outputs live in [0, 1] and are quantized at a fixed 1/127.
pub const PROB_SCALE: f64 = 1.0 / 127.0;
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LayerFault {
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error("no class attention from a previous layer to rank tokens")]
    NoClassAttention,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("layer {layer}: {source}")]
    Layer { layer: usize, source: LayerFault },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Strategy(#[from] StrategyError),
    #[error("input: {0}")]
    Input(String),
    #[error("model has {layers} layers and {scales} scale sets, config expects {expected}")]
    ModelShape {
        layers: usize,
        scales: usize,
        expected: usize,
    },
}

fn at<E: Into<LayerFault>>(layer: usize) -> impl FnOnce(E) -> EngineError {
    move |e| EngineError::Layer {
        layer,
        source: e.into(),
    }
}

/// Max-subtracted softmax of `logits * scale`.
pub fn softmax_row(logits: &[f64], scale: f64) -> Vec<f64> {
    let m = logits
        .iter()
        .map(|&x| x * scale)
        .fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&x| (x * scale - m).exp()).collect();
    let sum: f64 = e.iter().sum();
    e.into_iter().map(|v| v / sum).collect()
}

/// Row-wise LayerNorm over a `[rows x gamma.len()]` matrix.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let d = gamma.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        out.extend(
            row.iter()
                .zip(gamma.iter().zip(beta))
                .map(|(v, (g, b))| (v - mean) * inv * g + b),
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTrace {
    /// 1-indexed.
    pub layer_index: usize,
    pub tokens_in: usize,
    /// Tokens this layer computed on (after any pruning at its start).
    pub tokens_out: usize,
    /// Original input positions of the tokens this layer computed on.
    pub kept_tokens: Vec<usize>,
    pub ffn2_kept_dims: usize,
    pub ffn2_mask: Vec<bool>,
    /// Class attention computed by this layer (feeds the next pruning event).
    pub class_attention: Option<ClassAttentionScores>,
    /// Fraction of exact zeros in the quantized post-activation matrix.
    pub activation_sparsity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Ffn2Mode {
    /// Pruned FFN2 rows are never read.
    #[default]
    Skip,
    /// Pruned rows are zeroed and the full GEMM runs; used as an oracle.
    DenseZeroed,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub ffn2_mode: Ffn2Mode,
    pub keep_layer_outputs: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub tokens: QuantTensor,
    /// Original input position of every output row.
    pub token_origin: Vec<usize>,
    pub traces: Vec<LayerTrace>,
    /// Block outputs per layer, when requested.
    pub layer_outputs: Vec<QuantTensor>,
}

enum ScaleMode<'a> {
    Fixed(&'a [LayerScales]),
    /// Dynamic max-abs scales; records the running maximum per point.
    Observe(Vec<[f64; LayerScales::COUNT]>),
}

impl ScaleMode<'_> {
    fn scale(&mut self, layer: usize, point: usize, values: &[f64]) -> f64 {
        match self {
            ScaleMode::Fixed(s) => s[layer].to_array()[point],
            ScaleMode::Observe(maxima) => {
                let m = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                maxima[layer][point] = maxima[layer][point].max(m);
                max_abs_scale(values.iter().copied())
            }
        }
    }
}

const P_X1: usize = 0;
const P_Q: usize = 1;
const P_K: usize = 2;
const P_V: usize = 3;
const P_CTX: usize = 4;
const P_X2: usize = 5;
const P_ACT: usize = 6;
const P_OUT: usize = 7;

struct Forward<'a> {
    config: &'a EncoderConfig,
    layers: &'a [LayerWeights],
    strategies: &'a Strategies,
    options: RunOptions,
}

impl Forward<'_> {
    fn requant(
        &self,
        scales: &mut ScaleMode,
        layer: usize,
        point: usize,
        acc: &AccTensor,
    ) -> Result<QuantTensor, QuantError> {
        let real = acc.dequantize();
        let s = scales.scale(layer, point, &real);
        quantize(&real, acc.shape(), s, 0)
    }

    fn run(
        &self,
        input: &QuantTensor,
        scales: &mut ScaleMode,
    ) -> Result<EncoderOutput, EngineError> {
        let cfg = self.config;
        let (d, hd, heads, f) = (cfg.embed_dim, cfg.head_dim, cfg.num_heads, cfg.ffn_dim);
        match input.shape() {
            &[n, w] if n == cfg.num_tokens && w == d => {}
            s => {
                return Err(EngineError::Input(format!(
                    "expected [{} x {d}] tokens, got {s:?}",
                    cfg.num_tokens
                )))
            }
        }
        if input.zero_point() != 0 {
            return Err(EngineError::Input("input zero point must be 0".into()));
        }

        let mut tokens = input.clone();
        let mut origin: Vec<usize> = (0..cfg.num_tokens).collect();
        let mut prev_scores: Option<ClassAttentionScores> = None;
        let mut traces = Vec::with_capacity(cfg.num_layers);
        let mut layer_outputs = Vec::new();
        let softmax_scale = 1.0 / (hd as f64).sqrt();

        for (li, w) in self.layers.iter().enumerate() {
            let layer = li + 1;
            let tokens_in = tokens.dims2().map_err(at(layer))?.0;

            if cfg.is_prune_layer(layer) && cfg.keep_ratio < 1.0 {
                let scores = prev_scores.as_ref().ok_or(EngineError::Layer {
                    layer,
                    source: LayerFault::NoClassAttention,
                })?;
                let keep = self
                    .strategies
                    .token_selector
                    .select(scores, cfg.keep_ratio, tokens_in)
                    .map_err(at(layer))?;
                tokens = tokens.select_rows(&keep.kept_indices).map_err(at(layer))?;
                origin = keep.kept_indices.iter().map(|&i| origin[i]).collect();
            }
            let n = tokens.dims2().map_err(at(layer))?.0;

            // attention block
            let x = tokens.dequantize();
            let ln1 = layer_norm(&x, &w.ln1_gamma, &w.ln1_beta);
            let s = scales.scale(li, P_X1, &ln1);
            let xq1 = quantize(&ln1, &[n, d], s, 0).map_err(at(layer))?;
            let q = self
                .requant(scales, li, P_Q, &gemm_q8(&xq1, &w.wq).map_err(at(layer))?)
                .map_err(at(layer))?;
            let k = self
                .requant(scales, li, P_K, &gemm_q8(&xq1, &w.wk).map_err(at(layer))?)
                .map_err(at(layer))?;
            let v = self
                .requant(scales, li, P_V, &gemm_q8(&xq1, &w.wv).map_err(at(layer))?)
                .map_err(at(layer))?;

            let mut ctx = vec![0.0f64; n * d];
            let mut cls_rows = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = q.column_block(h * hd, hd).map_err(at(layer))?;
                let kt = k
                    .column_block(h * hd, hd)
                    .and_then(|t| t.transpose())
                    .map_err(at(layer))?;
                let vh = v.column_block(h * hd, hd).map_err(at(layer))?;
                let logits = gemm_q8(&qh, &kt).map_err(at(layer))?.dequantize();
                let mut probs = Vec::with_capacity(n * n);
                for row in logits.chunks(n) {
                    probs.extend(softmax_row(row, softmax_scale));
                }
                cls_rows.push(probs[..n].to_vec());
                let pq = quantize(&probs, &[n, n], PROB_SCALE, 0).map_err(at(layer))?;
                let head_out = gemm_q8(&pq, &vh).map_err(at(layer))?.dequantize();
                for t in 0..n {
                    ctx[t * d + h * hd..t * d + (h + 1) * hd]
                        .copy_from_slice(&head_out[t * hd..(t + 1) * hd]);
                }
            }
            let scores = class_attention(&cls_rows, heads, layer).map_err(at(layer))?;
            let s = scales.scale(li, P_CTX, &ctx);
            let ctxq = quantize(&ctx, &[n, d], s, 0).map_err(at(layer))?;
            let proj = gemm_q8(&ctxq, &w.wproj).map_err(at(layer))?.dequantize();
            let resid: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();

            // feed-forward block
            let ln2 = layer_norm(&resid, &w.ln2_gamma, &w.ln2_beta);
            let s = scales.scale(li, P_X2, &ln2);
            let xq2 = quantize(&ln2, &[n, d], s, 0).map_err(at(layer))?;
            let act: Vec<f64> = gemm_q8(&xq2, &w.wffn1)
                .map_err(at(layer))?
                .dequantize()
                .into_iter()
                .map(|v| self.strategies.activation.apply(v))
                .collect();
            let s = scales.scale(li, P_ACT, &act);
            let actq = quantize(&act, &[n, f], s, 0).map_err(at(layer))?;
            let mask = self
                .strategies
                .ffn2_pruner
                .keep_mask(&actq.dequantize(), n, f, cfg.ffn2_thresholds[li])
                .map_err(at(layer))?;
            let kept = mask.kept_indices();
            let ffn2 = match self.options.ffn2_mode {
                Ffn2Mode::Skip => gemm_q8_subset(&actq, &w.wffn2, &kept),
                Ffn2Mode::DenseZeroed => w
                    .wffn2
                    .with_zeroed_rows(|r| !mask.mask[r])
                    .and_then(|w2| gemm_q8(&actq, &w2)),
            }
            .map_err(at(layer))?
            .dequantize();
            let out: Vec<f64> = resid.iter().zip(&ffn2).map(|(a, b)| a + b).collect();
            let s = scales.scale(li, P_OUT, &out);
            tokens = quantize(&out, &[n, d], s, 0).map_err(at(layer))?;

            let zeros = actq.data().iter().filter(|&&v| v == 0).count();
            traces.push(LayerTrace {
                layer_index: layer,
                tokens_in,
                tokens_out: n,
                kept_tokens: origin.clone(),
                ffn2_kept_dims: kept.len(),
                ffn2_mask: mask.mask,
                class_attention: Some(scores.clone()),
                activation_sparsity: zeros as f64 / actq.len() as f64,
            });
            if self.options.keep_layer_outputs {
                layer_outputs.push(tokens.clone());
            }
            prev_scores = Some(scores);
        }
        Ok(EncoderOutput {
            tokens,
            token_origin: origin,
            traces,
            layer_outputs,
        })
    }
}

fn check_model(
    config: &EncoderConfig,
    layers: &[LayerWeights],
    scales: usize,
) -> Result<(), EngineError> {
    config.validate()?;
    if layers.len() != config.num_layers || scales != config.num_layers {
        return Err(EngineError::ModelShape {
            layers: layers.len(),
            scales,
            expected: config.num_layers,
        });
    }
    for (i, l) in layers.iter().enumerate() {
        l.validate(config, i + 1).map_err(|e| EngineError::Layer {
            layer: i + 1,
            source: LayerFault::Quant(QuantError::ShapeMismatch(e.to_string())),
        })?;
    }
    Ok(())
}

pub struct Engine<'m> {
    model: &'m Model,
    strategies: Strategies,
    options: RunOptions,
}

impl<'m> Engine<'m> {
    pub fn new(model: &'m Model, registry: &Registry) -> Result<Self, EngineError> {
        check_model(&model.config, &model.layers, model.scales.len())?;
        let strategies = registry.resolve(&model.config)?;
        Ok(Self {
            model,
            strategies,
            options: RunOptions::default(),
        })
    }

    pub fn with_options(mut self, options: RunOptions) -> Self {
        self.options = options;
        self
    }

    pub fn strategies(&self) -> &Strategies {
        &self.strategies
    }

    pub fn run(&self, input: &QuantTensor) -> Result<EncoderOutput, EngineError> {
        let fwd = Forward {
            config: &self.model.config,
            layers: &self.model.layers,
            strategies: &self.strategies,
            options: self.options,
        };
        fwd.run(input, &mut ScaleMode::Fixed(&self.model.scales))
    }
}

pub fn run_encoder(
    model: &Model,
    input: &QuantTensor,
    registry: &Registry,
) -> Result<EncoderOutput, EngineError> {
    Engine::new(model, registry)?.run(input)
}

/// Max-abs activation scales over a calibration batch. Each input runs with
/// dynamic per-tensor scales; the final scale per point is the batch maximum
/// over 127, rounded to `f32` so it survives the container.
pub fn calibrate(
    config: &EncoderConfig,
    layers: &[LayerWeights],
    batch: &[QuantTensor],
    registry: &Registry,
) -> Result<Vec<LayerScales>, EngineError> {
    check_model(config, layers, config.num_layers)?;
    let strategies = registry.resolve(config)?;
    let fwd = Forward {
        config,
        layers,
        strategies: &strategies,
        options: RunOptions::default(),
    };
    let mut mode = ScaleMode::Observe(vec![[0.0; LayerScales::COUNT]; config.num_layers]);
    for input in batch {
        fwd.run(input, &mut mode)?;
    }
    let ScaleMode::Observe(maxima) = mode else {
        unreachable!()
    };
    Ok(maxima
        .into_iter()
        .map(|m| LayerScales::from_array(m.map(|v| max_abs_scale([v]) as f32 as f64)))
        .collect())
}
