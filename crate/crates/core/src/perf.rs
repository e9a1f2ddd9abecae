//! Cycle-approximate model of the PE-group accelerator.
//!
//! The default array is 8 PE groups x 8 arrays x 8 MACs = 512 MACs/cycle.
//! Fully connected layers process 8 token rows against a 64-deep slice of
//! the inner dimension per cycle and emit 8 outputs every `ceil(D/64)`
//! cycles. QK^T maps the whole 64-wide head dimension in one cycle and emits
//! 8 scores per cycle. A·V reuses the FC mapping with inner dimension N.
//!
//! FFN1 and FFN2 are interleaved: FFN1 produces 8 post-activation columns
//! at a time, the FFN2 pruning stage forwards kept dimensions, and every 8
//! kept dimensions are issued as one FFN2 partial GEMM (8 tokens x 8 inner x
//! 8 output columns per cycle). Pruned FFN2 rows cost nothing.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::EncoderConfig;
use crate::engine::LayerTrace;
use crate::pruning::token_schedule;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerfError {
    #[error("PE config: {0}")]
    Pe(String),
    #[error("head_dim {head_dim} must equal the 64-deep inner mapping ({inner})")]
    HeadDim { head_dim: usize, inner: usize },
    #[error("sorter needs 1 <= K <= N-1, got N={n}, K={k}")]
    SorterRange { n: usize, k: usize },
    #[error("layer {layer}: {reason}")]
    Workload { layer: usize, reason: String },
    #[error("{actual} layer workloads for a {expected}-layer config")]
    LayerCount { expected: usize, actual: usize },
}

fn div_ceil(a: u64, b: u64) -> u64 {
    a.div_ceil(b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PeConfig {
    pub num_groups: usize,
    pub arrays_per_group: usize,
    pub macs_per_array: usize,
    pub clock_hz: f64,
    /// Extra cycles per softmax row; 0 means fully overlapped with the next
    /// head's QK^T.
    pub softmax_cycles_per_row: u64,
    /// Sorter setup is `ceil(N / divisor)` buffer-fill cycles.
    pub sorter_setup_divisor: usize,
}

impl Default for PeConfig {
    fn default() -> Self {
        Self {
            num_groups: 8,
            arrays_per_group: 8,
            macs_per_array: 8,
            clock_hz: 1e9,
            softmax_cycles_per_row: 0,
            sorter_setup_divisor: 8,
        }
    }
}

impl PeConfig {
    pub fn validate(&self) -> Result<(), PerfError> {
        if self.num_groups == 0 || self.arrays_per_group == 0 || self.macs_per_array == 0 {
            return Err(PerfError::Pe(
                "group, array and MAC counts must be positive".into(),
            ));
        }
        if !(self.clock_hz.is_finite() && self.clock_hz > 0.0) {
            return Err(PerfError::Pe(format!(
                "clock_hz {} must be positive",
                self.clock_hz
            )));
        }
        if self.sorter_setup_divisor == 0 {
            return Err(PerfError::Pe(
                "sorter_setup_divisor must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Token rows processed in parallel.
    pub fn row_block(&self) -> u64 {
        self.macs_per_array as u64
    }

    /// Inner-dimension elements accumulated per cycle across all groups.
    pub fn inner_chunk(&self) -> u64 {
        (self.arrays_per_group * self.num_groups) as u64
    }

    /// FFN columns per interleave step and kept rows per FFN2 issue.
    pub fn octet(&self) -> u64 {
        self.arrays_per_group as u64
    }

    pub fn peak_macs_per_cycle(&self) -> u64 {
        (self.num_groups * self.arrays_per_group * self.macs_per_array) as u64
    }

    /// Dense ops/s with 1 MAC = 2 ops.
    pub fn peak_gops(&self) -> f64 {
        2.0 * self.peak_macs_per_cycle() as f64 * self.clock_hz / 1e9
    }

    /// `ceil(N/8) * ceil(D/64) * M`.
    pub fn cycles_fc(&self, rows: usize, inner: usize, outer: usize) -> u64 {
        div_ceil(rows as u64, self.row_block())
            * div_ceil(inner as u64, self.inner_chunk())
            * outer as u64
    }

    /// `ceil(N*N / 8)` per head.
    pub fn cycles_qkt(&self, tokens: usize, head_dim: usize) -> Result<u64, PerfError> {
        if head_dim as u64 != self.inner_chunk() {
            return Err(PerfError::HeadDim {
                head_dim,
                inner: self.inner_chunk() as usize,
            });
        }
        let n = tokens as u64;
        Ok(div_ceil(n * n, self.row_block()))
    }

    /// FC mapping with inner dimension N and outer dimension head_dim.
    pub fn cycles_av(&self, tokens: usize, head_dim: usize) -> u64 {
        self.cycles_fc(tokens, tokens, head_dim)
    }

    /// Cycles for one packed group of kept FFN2 rows: `ceil(N/8) * ceil(d/8)`.
    pub fn cycles_ffn2_group(&self, tokens: usize, embed_dim: usize) -> u64 {
        div_ceil(tokens as u64, self.row_block()) * self.output_steps_per_group(embed_dim)
    }

    /// 8-column output steps needed to cover the embedding dimension once
    /// (48 for d = 384).
    pub fn output_steps_per_group(&self, embed_dim: usize) -> u64 {
        div_ceil(embed_dim as u64, self.num_groups as u64)
    }

    pub fn sorter_setup(&self, tokens: usize) -> u64 {
        div_ceil(tokens as u64, self.sorter_setup_divisor as u64)
    }

    /// Setup then one index per cycle until K are out.
    pub fn sorter_latency(&self, tokens: usize, k: usize) -> Result<u64, PerfError> {
        if k == 0 || k + 1 > tokens {
            return Err(PerfError::SorterRange { n: tokens, k });
        }
        Ok(self.sorter_setup(tokens) + k as u64)
    }

    pub fn schedule_ffn_interleaved(
        &self,
        tokens: usize,
        embed_dim: usize,
        ffn_dim: usize,
        mask: &[bool],
    ) -> Result<FfnSchedule, PerfError> {
        if mask.len() != ffn_dim {
            return Err(PerfError::Workload {
                layer: 0,
                reason: format!("mask has {} entries for ffn_dim {ffn_dim}", mask.len()),
            });
        }
        let octet = self.octet() as usize;
        let group_cycles = self.cycles_ffn2_group(tokens, embed_dim);
        let mut s = FfnSchedule::default();
        let mut pending = 0u64;
        for cols in mask.chunks(octet) {
            s.octets += 1;
            s.ffn1_cycles += self.cycles_fc(tokens, embed_dim, cols.len());
            let kept = cols.iter().filter(|&&m| m).count() as u64;
            s.kept_rows += kept;
            pending += kept;
            s.pending_high_water = s.pending_high_water.max(pending);
            while pending >= self.octet() {
                pending -= self.octet();
                s.ffn2_groups += 1;
                s.ffn2_cycles += group_cycles;
            }
        }
        if pending > 0 {
            s.ffn2_groups += 1;
            s.ffn2_cycles += group_cycles;
        }
        s.temp_high_water_bytes = tokens as u64 * s.pending_high_water;
        s.ffn1_macs = (tokens * embed_dim * ffn_dim) as u64;
        s.ffn2_macs = tokens as u64 * s.kept_rows * embed_dim as u64;
        Ok(s)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FfnSchedule {
    pub octets: u64,
    pub ffn1_cycles: u64,
    pub ffn2_cycles: u64,
    pub ffn2_groups: u64,
    pub kept_rows: u64,
    /// Most kept post-activation columns waiting in Temp SRAM at once.
    pub pending_high_water: u64,
    pub temp_high_water_bytes: u64,
    pub ffn1_macs: u64,
    pub ffn2_macs: u64,
}

impl FfnSchedule {
    pub fn total_cycles(&self) -> u64 {
        self.ffn1_cycles + self.ffn2_cycles
    }
}

/// What one layer computes on, independent of where the numbers came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWorkload {
    pub tokens_in: usize,
    pub tokens: usize,
    pub ffn2_mask: Vec<bool>,
}

impl LayerWorkload {
    pub fn from_trace(t: &LayerTrace) -> Self {
        Self {
            tokens_in: t.tokens_in,
            tokens: t.tokens_out,
            ffn2_mask: t.ffn2_mask.clone(),
        }
    }

    pub fn from_traces(traces: &[LayerTrace]) -> Vec<Self> {
        traces.iter().map(Self::from_trace).collect()
    }

    pub fn kept_dims(&self) -> usize {
        self.ffn2_mask.iter().filter(|&&m| m).count()
    }
}

/// Mask with `kept` true entries spread evenly over `len` positions.
pub fn spread_mask(len: usize, kept: usize) -> Vec<bool> {
    let kept = kept.min(len);
    (0..len)
        .map(|j| (j + 1) * kept / len > j * kept / len)
        .collect()
}

/// Ceiling-chain token counts with full FFN2.
pub fn dense_ffn_workloads(config: &EncoderConfig) -> Vec<LayerWorkload> {
    token_schedule(config)
        .into_iter()
        .map(|l| LayerWorkload {
            tokens_in: l.tokens_in,
            tokens: l.tokens_out,
            ffn2_mask: vec![true; config.ffn_dim],
        })
        .collect()
}

/// Ceiling-chain token counts with per-layer kept FFN2 dimension counts.
pub fn workloads_with_kept(
    config: &EncoderConfig,
    kept: &[usize],
) -> Result<Vec<LayerWorkload>, PerfError> {
    if kept.len() != config.num_layers {
        return Err(PerfError::LayerCount {
            expected: config.num_layers,
            actual: kept.len(),
        });
    }
    Ok(token_schedule(config)
        .into_iter()
        .zip(kept)
        .map(|(l, &k)| LayerWorkload {
            tokens_in: l.tokens_in,
            tokens: l.tokens_out,
            ffn2_mask: spread_mask(config.ffn_dim, k),
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Sorter,
    Qkv,
    Qkt,
    Softmax,
    Av,
    Proj,
    Ffn1,
    Ffn2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpRecord {
    pub kind: OpKind,
    pub layer: usize,
    pub head: Option<usize>,
    pub cycles: u64,
    pub macs: u64,
    /// MACs issued in a full interior cycle of this op.
    pub peak_macs_per_cycle: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCycles {
    pub layer: usize,
    pub tokens: usize,
    pub ffn2_kept_dims: usize,
    pub cycles: u64,
    pub macs: u64,
    pub attention_cycles: u64,
    pub ffn_cycles: u64,
    pub sorter_cycles: u64,
    pub temp_high_water_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub records: Vec<OpRecord>,
    pub layers: Vec<LayerCycles>,
    pub total_cycles: u64,
    pub total_macs: u64,
    pub utilization: f64,
    pub peak_macs_per_cycle: u64,
    pub sorter_cycles: u64,
    /// Comparator is streamed behind FFN1; always 0 cycles.
    pub ffn2_module_cycles: u64,
    pub latency_seconds: f64,
    pub effective_gops: f64,
}

impl CycleReport {
    pub fn layers_csv(&self) -> String {
        crate::report::to_csv(&self.layers)
    }
}

/// Schedules every layer back to back. Heads run sequentially; LayerNorm,
/// residual adds and requantization are free.
pub fn simulate(
    config: &EncoderConfig,
    workloads: &[LayerWorkload],
    pe: &PeConfig,
) -> Result<CycleReport, PerfError> {
    pe.validate()?;
    if workloads.len() != config.num_layers {
        return Err(PerfError::LayerCount {
            expected: config.num_layers,
            actual: workloads.len(),
        });
    }
    let d = config.embed_dim;
    let hd = config.head_dim;
    let rb = pe.row_block() as usize;
    let ic = pe.inner_chunk() as usize;
    let mut records = Vec::new();
    let mut layers = Vec::with_capacity(workloads.len());

    for (li, w) in workloads.iter().enumerate() {
        let layer = li + 1;
        let bad = |reason: String| PerfError::Workload { layer, reason };
        if w.tokens == 0 {
            return Err(bad("zero tokens".into()));
        }
        if w.tokens > w.tokens_in {
            return Err(bad(format!(
                "{} tokens out of {} in",
                w.tokens, w.tokens_in
            )));
        }
        if w.ffn2_mask.len() != config.ffn_dim {
            return Err(bad(format!(
                "FFN2 mask has {} entries for ffn_dim {}",
                w.ffn2_mask.len(),
                config.ffn_dim
            )));
        }
        let n = w.tokens;
        let first = records.len();

        let mut sorter = 0;
        if config.is_prune_layer(layer) && config.keep_ratio < 1.0 {
            sorter = pe
                .sorter_latency(w.tokens_in, n - 1)
                .map_err(|e| bad(e.to_string()))?;
            records.push(OpRecord {
                kind: OpKind::Sorter,
                layer,
                head: None,
                cycles: sorter,
                macs: 0,
                peak_macs_per_cycle: 0,
            });
        }
        let fc_peak = |rows: usize, inner: usize| (rows.min(rb) * inner.min(ic)) as u64;
        records.push(OpRecord {
            kind: OpKind::Qkv,
            layer,
            head: None,
            cycles: 3 * pe.cycles_fc(n, d, d),
            macs: 3 * (n * d * d) as u64,
            peak_macs_per_cycle: fc_peak(n, d),
        });
        for h in 0..config.num_heads {
            records.push(OpRecord {
                kind: OpKind::Qkt,
                layer,
                head: Some(h),
                cycles: pe.cycles_qkt(n, hd)?,
                macs: (n * n * hd) as u64,
                peak_macs_per_cycle: ((n * n).min(rb) * hd) as u64,
            });
            if pe.softmax_cycles_per_row > 0 {
                records.push(OpRecord {
                    kind: OpKind::Softmax,
                    layer,
                    head: Some(h),
                    cycles: pe.softmax_cycles_per_row * n as u64,
                    macs: 0,
                    peak_macs_per_cycle: 0,
                });
            }
            records.push(OpRecord {
                kind: OpKind::Av,
                layer,
                head: Some(h),
                cycles: pe.cycles_av(n, hd),
                macs: (n * n * hd) as u64,
                peak_macs_per_cycle: fc_peak(n, n),
            });
        }
        records.push(OpRecord {
            kind: OpKind::Proj,
            layer,
            head: None,
            cycles: pe.cycles_fc(n, d, d),
            macs: (n * d * d) as u64,
            peak_macs_per_cycle: fc_peak(n, d),
        });
        let ffn = pe
            .schedule_ffn_interleaved(n, d, config.ffn_dim, &w.ffn2_mask)
            .map_err(|e| bad(e.to_string()))?;
        records.push(OpRecord {
            kind: OpKind::Ffn1,
            layer,
            head: None,
            cycles: ffn.ffn1_cycles,
            macs: ffn.ffn1_macs,
            peak_macs_per_cycle: fc_peak(n, d),
        });
        records.push(OpRecord {
            kind: OpKind::Ffn2,
            layer,
            head: None,
            cycles: ffn.ffn2_cycles,
            macs: ffn.ffn2_macs,
            peak_macs_per_cycle: if ffn.kept_rows == 0 {
                0
            } else {
                (n.min(rb) as u64) * pe.octet().min(ffn.kept_rows) * (pe.num_groups.min(d) as u64)
            },
        });

        let layer_records = &records[first..];
        let sum = |kinds: &[OpKind]| -> u64 {
            layer_records
                .iter()
                .filter(|r| kinds.contains(&r.kind))
                .map(|r| r.cycles)
                .sum()
        };
        layers.push(LayerCycles {
            layer,
            tokens: n,
            ffn2_kept_dims: ffn.kept_rows as usize,
            cycles: layer_records.iter().map(|r| r.cycles).sum(),
            macs: layer_records.iter().map(|r| r.macs).sum(),
            attention_cycles: sum(&[
                OpKind::Qkv,
                OpKind::Qkt,
                OpKind::Softmax,
                OpKind::Av,
                OpKind::Proj,
            ]),
            ffn_cycles: sum(&[OpKind::Ffn1, OpKind::Ffn2]),
            sorter_cycles: sorter,
            temp_high_water_bytes: ffn.temp_high_water_bytes,
        });
    }

    let total_cycles: u64 = records.iter().map(|r| r.cycles).sum();
    let total_macs: u64 = records.iter().map(|r| r.macs).sum();
    let latency_seconds = total_cycles as f64 / pe.clock_hz;
    Ok(CycleReport {
        utilization: total_macs as f64 / (pe.peak_macs_per_cycle() as f64 * total_cycles as f64),
        peak_macs_per_cycle: records
            .iter()
            .map(|r| r.peak_macs_per_cycle)
            .max()
            .unwrap_or(0),
        sorter_cycles: layers.iter().map(|l| l.sorter_cycles).sum(),
        ffn2_module_cycles: 0,
        effective_gops: 2.0 * total_macs as f64 / latency_seconds / 1e9,
        latency_seconds,
        records,
        layers,
        total_cycles,
        total_macs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fc_examples() {
        let pe = PeConfig::default();
        assert_eq!(pe.cycles_fc(8, 384, 1), 6);
        assert_eq!(pe.cycles_fc(8, 64, 1), 1);
        assert_eq!(pe.cycles_fc(197, 384, 384), 57_600);
        let util = (197 * 384 * 384) as f64 / (512.0 * 57_600.0);
        assert!((util - 0.985).abs() < 1e-3);
    }

    #[test]
    fn qkt_and_av_examples() {
        let pe = PeConfig::default();
        assert_eq!(pe.cycles_qkt(8, 64).unwrap(), 8);
        assert_eq!(pe.cycles_qkt(197, 64).unwrap(), 4852);
        assert_eq!(pe.cycles_qkt(1, 64).unwrap(), 1);
        assert!(matches!(
            pe.cycles_qkt(8, 32),
            Err(PerfError::HeadDim { .. })
        ));
        assert_eq!(pe.cycles_av(64, 64), 512);
        assert_eq!(pe.cycles_av(8, 64), 64);
        assert_eq!(pe.cycles_av(197, 64), 6400);
    }

    #[test]
    fn sorter_examples() {
        let pe = PeConfig::default();
        assert_eq!(pe.sorter_latency(197, 98).unwrap(), 123);
        assert_eq!(pe.sorter_latency(9, 1).unwrap(), pe.sorter_setup(9) + 1);
        assert!(pe.sorter_latency(5, 5).is_err());
        assert!(pe.sorter_latency(5, 0).is_err());
    }

    /// Hand enumeration: octet 0 and octet 1 each cost cycles_fc(8, 64, 8)
    /// = 8 for FFN1; 16 kept rows form two packed groups of
    /// ceil(8/8) * ceil(64/8) = 8 cycles each.
    #[test]
    fn interleaved_ffn_tiny_all_true() {
        let pe = PeConfig::default();
        let s = pe.schedule_ffn_interleaved(8, 64, 16, &[true; 16]).unwrap();
        assert_eq!(
            (s.ffn1_cycles, s.ffn2_cycles, s.total_cycles()),
            (16, 16, 32)
        );
        assert_eq!(s.temp_high_water_bytes, 8 * 8);
    }

    #[test]
    fn interleaved_ffn_all_false_skips_ffn2() {
        let pe = PeConfig::default();
        let s = pe
            .schedule_ffn_interleaved(8, 64, 16, &[false; 16])
            .unwrap();
        assert_eq!(s.ffn2_cycles, 0);
        assert_eq!(s.ffn2_macs, 0);
        assert_eq!(s.ffn1_cycles, 16);
    }

    #[test]
    fn packing_spans_octets() {
        let pe = PeConfig::default();
        // 4 kept rows in each of 4 octets pack into 2 groups
        let mask: Vec<bool> = (0..32).map(|j| j % 8 < 4).collect();
        let s = pe.schedule_ffn_interleaved(8, 64, 32, &mask).unwrap();
        assert_eq!(s.ffn2_groups, 2);
        assert_eq!(s.pending_high_water, 8);
        // a lone kept row still costs a whole group
        let mut mask = vec![false; 32];
        mask[5] = true;
        let s = pe.schedule_ffn_interleaved(8, 64, 32, &mask).unwrap();
        assert_eq!(s.ffn2_groups, 1);
        assert_eq!(s.ffn2_cycles, 8);
    }

    #[test]
    fn deit_s_dense_ffn_matches_fc_formula() {
        let pe = PeConfig::default();
        let s = pe
            .schedule_ffn_interleaved(197, 384, 1536, &[true; 1536])
            .unwrap();
        assert_eq!(s.ffn1_cycles, pe.cycles_fc(197, 384, 1536));
        assert_eq!(s.ffn2_cycles, pe.cycles_fc(197, 1536, 384));
        assert_eq!(s.ffn2_cycles, 230_400);
        assert_eq!(pe.output_steps_per_group(384), 48);
        // layer with 97.59% skip: 37 kept rows
        let s12 = pe
            .schedule_ffn_interleaved(197, 384, 1536, &spread_mask(1536, 37))
            .unwrap();
        let frac = s12.ffn2_cycles as f64 / s.ffn2_cycles as f64;
        assert!(frac < 0.03, "{frac}");
    }

    #[test]
    fn dense_deit_s_simulation() {
        let cfg = EncoderConfig::deit_s().dense();
        let pe = PeConfig::default();
        let r = simulate(&cfg, &dense_ffn_workloads(&cfg), &pe).unwrap();
        assert_eq!(r.total_macs, 4_540_695_552);
        assert!(r.utilization >= 0.95, "{}", r.utilization);
        assert_eq!(r.peak_macs_per_cycle, 512);
        assert_eq!(r.sorter_cycles, 0);
        assert_eq!(
            r.total_cycles,
            r.records.iter().map(|x| x.cycles).sum::<u64>()
        );
        assert_eq!(
            r.total_cycles,
            r.layers.iter().map(|x| x.cycles).sum::<u64>()
        );
        assert_eq!(pe.peak_gops(), 1024.0);
    }

    #[test]
    fn single_layer_hand_schedule() {
        let cfg = EncoderConfig {
            num_layers: 1,
            embed_dim: 128,
            num_heads: 2,
            head_dim: 64,
            ffn_dim: 256,
            num_tokens: 16,
            prune_layers: vec![],
            keep_ratio: 1.0,
            ffn2_thresholds: vec![0.0],
            ..EncoderConfig::tiny()
        };
        let pe = PeConfig::default();
        let w = LayerWorkload {
            tokens_in: 16,
            tokens: 16,
            ffn2_mask: vec![true; 256],
        };
        let r = simulate(&cfg, &[w], &pe).unwrap();
        // qkv 3*(2*2*128) + heads 2*(32 + 2*1*64) + proj 2*2*128
        // + ffn1 2*2*256 + ffn2 32 groups * 2*16
        let want = 3 * 512 + 2 * (32 + 128) + 512 + 1024 + 32 * 32;
        assert_eq!(r.total_cycles, want as u64);
        let macs = 4 * 16 * 128 * 128 + 2 * 2 * 16 * 16 * 64 + 2 * 16 * 128 * 256;
        assert_eq!(r.total_macs, macs as u64);
        assert_eq!(r.utilization, macs as f64 / (512.0 * want as f64));
    }

    #[test]
    fn degenerate_workloads_error() {
        let cfg = EncoderConfig::tiny();
        let pe = PeConfig::default();
        let mut ws = dense_ffn_workloads(&cfg);
        ws[0].tokens = 0;
        assert!(matches!(
            simulate(&cfg, &ws, &pe),
            Err(PerfError::Workload { layer: 1, .. })
        ));
        assert!(matches!(
            simulate(&cfg, &ws[..1], &pe),
            Err(PerfError::LayerCount { .. })
        ));
    }

    #[test]
    fn spread_mask_counts() {
        for k in [0, 1, 37, 768, 1536] {
            assert_eq!(spread_mask(1536, k).iter().filter(|&&m| m).count(), k);
        }
    }

    proptest! {
        #[test]
        fn aligned_fc_is_fully_utilized(a in 1usize..20, b in 1usize..8, m in 1usize..50) {
            let pe = PeConfig::default();
            let (n, d) = (8 * a, 64 * b);
            let cycles = pe.cycles_fc(n, d, m);
            prop_assert_eq!((n * d * m) as u64, 512 * cycles);
        }

        #[test]
        fn sorter_is_monotone_in_k(n in 2usize..400, k1 in 1usize..400, k2 in 1usize..400) {
            let pe = PeConfig::default();
            let (lo, hi) = (k1.min(k2), k1.max(k2));
            prop_assume!(hi < n);
            prop_assert!(pe.sorter_latency(n, lo).unwrap() <= pe.sorter_latency(n, hi).unwrap());
        }

        #[test]
        fn all_true_interleave_matches_dense_fc(n in 1usize..100, blocks in 1usize..6, dm in 1usize..12) {
            let pe = PeConfig::default();
            let (d, f) = (8 * dm, 64 * blocks);
            let s = pe.schedule_ffn_interleaved(n, d, f, &vec![true; f]).unwrap();
            prop_assert_eq!(s.ffn1_cycles, pe.cycles_fc(n, d, f));
            prop_assert_eq!(s.ffn2_cycles, pe.cycles_fc(n, f, d));
            prop_assert_eq!(s.temp_high_water_bytes, 8 * n as u64);
        }
    }
}
