//! Independent float reference for the INT8 encoder.
//!
//! Plain nested loops over `f64`, with fake quantization at the same points
//! the engine quantizes. Only the public tensor accessors of the model are
//! used; no engine, pruning or GEMM code is called.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vitprune_core::{EncoderConfig, Model};

pub const PROB_SCALE: f64 = 1.0 / 127.0;
const LN_EPS: f64 = 1e-6;

pub struct RefOutput {
    pub tokens: Vec<i8>,
    pub origin: Vec<usize>,
    pub kept_tokens: Vec<Vec<usize>>,
    pub masks: Vec<Vec<bool>>,
}

/// Integer grid value of `x` at `scale`, ties to even, clamped.
pub fn fake_q(x: f64, scale: f64) -> i64 {
    let r = x / scale;
    let f = r.floor();
    let diff = r - f;
    let up = diff > 0.5 || (diff == 0.5 && f % 2.0 != 0.0);
    let rounded = if up { f + 1.0 } else { f };
    rounded.clamp(-128.0, 127.0) as i64
}

/// Real-valued product of two integer grids with their scales.
fn matmul(a: &[i64], sa: f64, b: &[i64], sb: f64, n: usize, d: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s: i64 = 0;
            for k in 0..d {
                s += a[i * d + k] * b[k * m + j];
            }
            out[i * m + j] = s as f64 * (sa * sb);
        }
    }
    out
}

fn grid(x: &[f64], s: f64) -> Vec<i64> {
    x.iter().map(|&v| fake_q(v, s)).collect()
}

fn ints(t: &vitprune_core::quant::QuantTensor) -> Vec<i64> {
    t.data().iter().map(|&v| v as i64).collect()
}

fn norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let d = g.len();
    let mut out = vec![0.0; x.len()];
    for r in 0..x.len() / d {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for c in 0..d {
            out[r * d + c] = (row[c] - mean) * inv * g[c] + b[c];
        }
    }
    out
}

fn softmax(row: &[f64], scale: f64) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &v in row {
        m = m.max(v * scale);
    }
    let e: Vec<f64> = row.iter().map(|&v| (v * scale - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Ranks every candidate by counting how many others beat it.
pub fn brute_topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut kept = vec![0];
    for j in 0..scores.len() {
        let beaten_by = (0..scores.len())
            .filter(|&i| scores[i] > scores[j] || (scores[i] == scores[j] && i < j))
            .count();
        if beaten_by < k {
            kept.push(j + 1);
        }
    }
    kept
}

pub fn brute_keep_count(n: usize, rho: f64) -> usize {
    // smallest integer k with k >= (n-1) * rho, up to representation error
    let target = (n - 1) as f64 * rho;
    (0..n).find(|&k| k as f64 >= target - 1e-9).unwrap_or(n - 1)
}

/// Column sums over the rows, compared strictly.
pub fn brute_mask(post_act: &[f64], rows: usize, cols: usize, theta: f64) -> Vec<bool> {
    (0..cols)
        .map(|j| {
            let mut s = 0.0;
            for t in 0..rows {
                s += post_act[t * cols + j];
            }
            s > theta
        })
        .collect()
}

pub fn reference_forward(model: &Model, input: &vitprune_core::quant::QuantTensor) -> RefOutput {
    let c = &model.config;
    let (d, hd, heads, f) = (c.embed_dim, c.head_dim, c.num_heads, c.ffn_dim);
    let mut tok: Vec<i64> = ints(input);
    let mut tok_scale = input.scale();
    let mut n = c.num_tokens;
    let mut origin: Vec<usize> = (0..n).collect();
    let mut prev_cls: Option<Vec<f64>> = None;
    let mut out = RefOutput {
        tokens: vec![],
        origin: vec![],
        kept_tokens: vec![],
        masks: vec![],
    };
    let relu = c.activation == "relu";

    for (li, (w, s)) in model.layers.iter().zip(&model.scales).enumerate() {
        let layer = li + 1;
        if c.prune_layers.contains(&layer) && c.keep_ratio < 1.0 {
            let scores = prev_cls.as_ref().expect("pruning after layer 1");
            let keep = brute_topk(scores, brute_keep_count(n, c.keep_ratio));
            let mut next = Vec::with_capacity(keep.len() * d);
            for &r in &keep {
                next.extend_from_slice(&tok[r * d..(r + 1) * d]);
            }
            tok = next;
            origin = keep.iter().map(|&r| origin[r]).collect();
            n = keep.len();
        }
        out.kept_tokens.push(origin.clone());

        let x: Vec<f64> = tok.iter().map(|&q| q as f64 * tok_scale).collect();
        let x1 = grid(&norm(&x, &w.ln1_gamma, &w.ln1_beta), s.x1);
        let q = grid(&matmul(&x1, s.x1, &ints(&w.wq), w.wq.scale(), n, d, d), s.q);
        let k = grid(&matmul(&x1, s.x1, &ints(&w.wk), w.wk.scale(), n, d, d), s.k);
        let v = grid(&matmul(&x1, s.x1, &ints(&w.wv), w.wv.scale(), n, d, d), s.v);

        let mut ctx = vec![0.0; n * d];
        let mut cls = vec![0.0; n];
        for h in 0..heads {
            let mut probs = vec![0i64; n * n];
            for i in 0..n {
                let mut logits = vec![0.0; n];
                for (j, l) in logits.iter_mut().enumerate() {
                    let mut acc: i64 = 0;
                    for e in 0..hd {
                        acc += q[i * d + h * hd + e] * k[j * d + h * hd + e];
                    }
                    *l = acc as f64 * (s.q * s.k);
                }
                let p = softmax(&logits, 1.0 / (hd as f64).sqrt());
                if i == 0 {
                    for j in 0..n {
                        cls[j] += p[j];
                    }
                }
                for j in 0..n {
                    probs[i * n + j] = fake_q(p[j], PROB_SCALE);
                }
            }
            for i in 0..n {
                for e in 0..hd {
                    let mut acc: i64 = 0;
                    for j in 0..n {
                        acc += probs[i * n + j] * v[j * d + h * hd + e];
                    }
                    ctx[i * d + h * hd + e] = acc as f64 * (PROB_SCALE * s.v);
                }
            }
        }
        prev_cls = Some(cls[1..].iter().map(|v| v / heads as f64).collect());

        let ctxq = grid(&ctx, s.ctx);
        let proj = matmul(&ctxq, s.ctx, &ints(&w.wproj), w.wproj.scale(), n, d, d);
        let resid: Vec<f64> = x.iter().zip(&proj).map(|(a, b)| a + b).collect();
        let x2 = grid(&norm(&resid, &w.ln2_gamma, &w.ln2_beta), s.x2);
        let h1 = matmul(&x2, s.x2, &ints(&w.wffn1), w.wffn1.scale(), n, d, f);
        let act: Vec<f64> = h1
            .iter()
            .map(|&v| if relu { v.max(0.0) } else { gelu(v) })
            .collect();
        let actq = grid(&act, s.act);
        let act_real: Vec<f64> = actq.iter().map(|&q| q as f64 * s.act).collect();
        let mask = if c.ffn2_pruner == "threshold" {
            brute_mask(&act_real, n, f, c.ffn2_thresholds[li])
        } else {
            vec![true; f]
        };
        let w2: Vec<i64> = ints(&w.wffn2)
            .chunks(d)
            .zip(&mask)
            .flat_map(|(row, &m)| row.iter().map(move |&v| if m { v } else { 0 }))
            .collect();
        let ffn2 = matmul(&actq, s.act, &w2, w.wffn2.scale(), n, f, d);
        let y: Vec<f64> = resid.iter().zip(&ffn2).map(|(a, b)| a + b).collect();
        tok = grid(&y, s.out);
        tok_scale = s.out;
        out.masks.push(mask);
    }
    out.tokens = tok.iter().map(|&v| v as i8).collect();
    out.origin = origin;
    out
}

/// Seeded tiny encoders: d <= 16, N <= 8, 1 or 2 layers.
pub fn tiny_configs(count: usize, seed: u64) -> Vec<(EncoderConfig, u64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let num_heads = rng.random_range(1..=2usize);
            let head_dim = [4usize, 8][rng.random_range(0..2)];
            let num_layers = rng.random_range(1..=2usize);
            let gelu = rng.random_bool(0.2);
            let prune = num_layers == 2 && rng.random_bool(0.7);
            let cfg = EncoderConfig {
                num_layers,
                embed_dim: num_heads * head_dim,
                num_heads,
                head_dim,
                ffn_dim: rng.random_range(4..=32usize),
                num_tokens: rng.random_range(2..=8usize),
                prune_layers: if prune { vec![2] } else { vec![] },
                keep_ratio: if prune {
                    [0.25, 0.5, 0.75][rng.random_range(0..3)]
                } else {
                    1.0
                },
                ffn2_thresholds: (0..num_layers)
                    .map(|_| rng.random_range(0.0..3.0))
                    .collect(),
                activation: if gelu {
                    "gelu_tanh".into()
                } else {
                    "relu".into()
                },
                token_selector: "topk".into(),
                ffn2_pruner: if gelu {
                    "keep-all".into()
                } else {
                    "threshold".into()
                },
            };
            (cfg, rng.random())
        })
        .collect()
}
