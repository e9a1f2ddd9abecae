//! Closed-form MAC counts and run comparisons.
//!
//! Counts cover the six GEMMs of an encoder layer only; softmax, LayerNorm,
//! residual adds and pruning comparators are excluded.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::EncoderConfig;
use crate::perf::LayerWorkload;
use crate::pruning::token_schedule;

const SKIP_FIXTURE: &str = include_str!("../fixtures/ffn2_skip_deit_s.csv");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticsError {
    #[error("{what}: {actual} entries for {expected} layers")]
    LayerCount {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("layer {layer}: {kept} kept FFN2 dims exceed ffn_dim {ffn_dim}")]
    KeptRange {
        layer: usize,
        kept: usize,
        ffn_dim: usize,
    },
    #[error("skip fixture: {0}")]
    Fixture(String),
    #[error("no runs to compare")]
    NoRuns,
    #[error("run '{run}' differs from '{baseline}' in {field} ({a} vs {b})")]
    Mismatch {
        run: String,
        baseline: String,
        field: &'static str,
        a: String,
        b: String,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacParts {
    pub qkv: u64,
    pub qkt: u64,
    pub av: u64,
    pub proj: u64,
    pub ffn1: u64,
    pub ffn2: u64,
}

impl MacParts {
    /// One layer on `n` tokens with `kept` FFN2 rows.
    pub fn layer(config: &EncoderConfig, n: usize, kept: usize) -> Self {
        let (n, d, f, k) = (
            n as u64,
            config.embed_dim as u64,
            config.ffn_dim as u64,
            kept as u64,
        );
        Self {
            qkv: 3 * n * d * d,
            qkt: n * n * d,
            av: n * n * d,
            proj: n * d * d,
            ffn1: n * d * f,
            ffn2: n * k * d,
        }
    }

    pub fn total(&self) -> u64 {
        self.qkv + self.qkt + self.av + self.proj + self.ffn1 + self.ffn2
    }
}

impl std::ops::Add for MacParts {
    type Output = MacParts;
    fn add(self, o: MacParts) -> MacParts {
        MacParts {
            qkv: self.qkv + o.qkv,
            qkt: self.qkt + o.qkt,
            av: self.av + o.av,
            proj: self.proj + o.proj,
            ffn1: self.ffn1 + o.ffn1,
            ffn2: self.ffn2 + o.ffn2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMacs {
    pub layer: usize,
    pub tokens: usize,
    pub ffn2_kept_dims: usize,
    pub qkv: u64,
    pub qkt: u64,
    pub av: u64,
    pub proj: u64,
    pub ffn1: u64,
    pub ffn2: u64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacBreakdown {
    pub layers: Vec<LayerMacs>,
    pub totals: MacParts,
    pub grand_total: u64,
    /// Dense encoder of the same shape.
    pub dense_total: u64,
    pub reduction: f64,
}

impl MacBreakdown {
    pub fn gmacs(&self) -> f64 {
        self.grand_total as f64 / 1e9
    }

    pub fn layers_csv(&self) -> String {
        crate::report::to_csv(&self.layers)
    }
}

pub fn reduction(baseline: u64, pruned: u64) -> f64 {
    if baseline == 0 {
        0.0
    } else {
        1.0 - pruned as f64 / baseline as f64
    }
}

pub fn count_macs(
    config: &EncoderConfig,
    tokens: &[usize],
    kept_dims: &[usize],
) -> Result<MacBreakdown, AnalyticsError> {
    let expected = config.num_layers;
    for (what, v) in [("token counts", tokens), ("kept dims", kept_dims)] {
        if v.len() != expected {
            return Err(AnalyticsError::LayerCount {
                what,
                expected,
                actual: v.len(),
            });
        }
    }
    let mut layers = Vec::with_capacity(expected);
    let mut totals = MacParts::default();
    for (i, (&n, &k)) in tokens.iter().zip(kept_dims).enumerate() {
        if k > config.ffn_dim {
            return Err(AnalyticsError::KeptRange {
                layer: i + 1,
                kept: k,
                ffn_dim: config.ffn_dim,
            });
        }
        let p = MacParts::layer(config, n, k);
        totals = totals + p;
        layers.push(LayerMacs {
            layer: i + 1,
            tokens: n,
            ffn2_kept_dims: k,
            qkv: p.qkv,
            qkt: p.qkt,
            av: p.av,
            proj: p.proj,
            ffn1: p.ffn1,
            ffn2: p.ffn2,
            total: p.total(),
        });
    }
    let dense_total =
        MacParts::layer(config, config.num_tokens, config.ffn_dim).total() * expected as u64;
    let grand_total = totals.total();
    Ok(MacBreakdown {
        layers,
        totals,
        grand_total,
        dense_total,
        reduction: reduction(dense_total, grand_total),
    })
}

pub fn count_workload_macs(
    config: &EncoderConfig,
    workloads: &[LayerWorkload],
) -> Result<MacBreakdown, AnalyticsError> {
    let tokens: Vec<usize> = workloads.iter().map(|w| w.tokens).collect();
    let kept: Vec<usize> = workloads.iter().map(LayerWorkload::kept_dims).collect();
    count_macs(config, &tokens, &kept)
}

pub fn dense_macs(config: &EncoderConfig) -> MacBreakdown {
    let n = config.num_layers;
    count_macs(
        config,
        &vec![config.num_tokens; n],
        &vec![config.ffn_dim; n],
    )
    .expect("lengths match")
}

/// Ceiling-chain token counts, full FFN2.
pub fn token_pruned_macs(config: &EncoderConfig) -> MacBreakdown {
    let tokens: Vec<usize> = token_schedule(config)
        .iter()
        .map(|l| l.tokens_out)
        .collect();
    count_macs(config, &tokens, &vec![config.ffn_dim; config.num_layers]).expect("lengths match")
}

/// Ceiling-chain token counts with per-layer kept FFN2 dims.
pub fn combined_macs(
    config: &EncoderConfig,
    kept_dims: &[usize],
) -> Result<MacBreakdown, AnalyticsError> {
    let tokens: Vec<usize> = token_schedule(config)
        .iter()
        .map(|l| l.tokens_out)
        .collect();
    count_macs(config, &tokens, kept_dims)
}

/// `1 - pruned / dense` over whole-encoder MACs.
pub fn combined_reduction(dense: &MacBreakdown, pruned: &MacBreakdown) -> f64 {
    reduction(dense.grand_total, pruned.grand_total)
}

/// Ops/s in G with 1 MAC = 2 ops.
pub fn gops(macs: u64, cycles: u64, clock_hz: f64) -> f64 {
    if cycles == 0 {
        return 0.0;
    }
    2.0 * macs as f64 * clock_hz / cycles as f64 / 1e9
}

#[derive(Debug, Deserialize)]
struct FixtureRow {
    layer: usize,
    kept_dims: usize,
    ffn_dim: usize,
}

/// Per-layer kept FFN2 dims from a `layer,kept_dims,ffn_dim` CSV.
pub fn parse_kept_csv(text: &str) -> Result<Vec<usize>, AnalyticsError> {
    let mut out = Vec::new();
    for (i, row) in csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .enumerate()
    {
        let row: FixtureRow = row.map_err(|e| AnalyticsError::Fixture(e.to_string()))?;
        if row.layer != i + 1 {
            return Err(AnalyticsError::Fixture(format!(
                "row {} is layer {}",
                i + 1,
                row.layer
            )));
        }
        if row.kept_dims > row.ffn_dim {
            return Err(AnalyticsError::KeptRange {
                layer: row.layer,
                kept: row.kept_dims,
                ffn_dim: row.ffn_dim,
            });
        }
        out.push(row.kept_dims);
    }
    Ok(out)
}

/// Per-layer kept FFN2 dims for DeiT-S with the layer-adaptive thresholds.
pub fn deit_s_skip_fixture() -> Vec<usize> {
    parse_kept_csv(SKIP_FIXTURE).expect("bundled fixture parses")
}

/// Shape of the encoder a run was made on; runs must agree on all of it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub num_layers: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub num_tokens: usize,
}

impl From<&EncoderConfig> for ModelDims {
    fn from(c: &EncoderConfig) -> Self {
        Self {
            num_layers: c.num_layers,
            embed_dim: c.embed_dim,
            num_heads: c.num_heads,
            head_dim: c.head_dim,
            ffn_dim: c.ffn_dim,
            num_tokens: c.num_tokens,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub tool_version: String,
    pub config_hash: String,
    pub dims: ModelDims,
    pub macs: u64,
    pub cycles: Option<u64>,
    pub traffic_bytes: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub name: String,
    pub config_hash: String,
    pub macs: u64,
    pub cycles: Option<u64>,
    pub traffic_bytes: Option<u64>,
    /// Reductions against the first run; absent in a single-run table.
    pub mac_reduction: Option<f64>,
    pub cycle_reduction: Option<f64>,
    pub traffic_reduction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn has_deltas(&self) -> bool {
        self.rows.len() > 1
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_default();
        let pct = |v: Option<f64>| v.map(|x| format!("{:.6}", x)).unwrap_or_default();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["name", "config_hash", "macs", "cycles", "traffic_bytes"];
        if self.has_deltas() {
            header.extend(["mac_reduction", "cycle_reduction", "traffic_reduction"]);
        }
        w.write_record(&header).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![
                r.name.clone(),
                r.config_hash.clone(),
                r.macs.to_string(),
                opt(r.cycles),
                opt(r.traffic_bytes),
            ];
            if self.has_deltas() {
                rec.extend([
                    pct(r.mac_reduction),
                    pct(r.cycle_reduction),
                    pct(r.traffic_reduction),
                ]);
            }
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory writer")).expect("CSV is UTF-8")
    }
}

/// Aligns runs against the first one. Shapes must match; mixed tool
/// versions are refused unless `force`.
pub fn compare(runs: &[RunSummary], force: bool) -> Result<ComparisonTable, AnalyticsError> {
    let base = runs.first().ok_or(AnalyticsError::NoRuns)?;
    for r in &runs[1..] {
        let mismatch = |field: &'static str, a: String, b: String| AnalyticsError::Mismatch {
            run: r.name.clone(),
            baseline: base.name.clone(),
            field,
            a,
            b,
        };
        let (x, y) = (&base.dims, &r.dims);
        for (field, a, b) in [
            ("num_layers", x.num_layers, y.num_layers),
            ("embed_dim", x.embed_dim, y.embed_dim),
            ("num_heads", x.num_heads, y.num_heads),
            ("head_dim", x.head_dim, y.head_dim),
            ("ffn_dim", x.ffn_dim, y.ffn_dim),
            ("num_tokens", x.num_tokens, y.num_tokens),
        ] {
            if a != b {
                return Err(mismatch(field, a.to_string(), b.to_string()));
            }
        }
        if r.tool_version != base.tool_version && !force {
            return Err(mismatch(
                "tool_version",
                base.tool_version.clone(),
                r.tool_version.clone(),
            ));
        }
    }
    let single = runs.len() == 1;
    let delta = |b: Option<u64>, v: Option<u64>| match (single, b, v) {
        (false, Some(b), Some(v)) => Some(reduction(b, v)),
        _ => None,
    };
    let rows = runs
        .iter()
        .map(|r| ComparisonRow {
            name: r.name.clone(),
            config_hash: r.config_hash.clone(),
            macs: r.macs,
            cycles: r.cycles,
            traffic_bytes: r.traffic_bytes,
            mac_reduction: delta(Some(base.macs), Some(r.macs)),
            cycle_reduction: delta(base.cycles, r.cycles),
            traffic_reduction: delta(base.traffic_bytes, r.traffic_bytes),
        })
        .collect();
    Ok(ComparisonTable {
        baseline: base.name.clone(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn one_layer(n: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: 1,
            num_tokens: n,
            prune_layers: vec![],
            keep_ratio: 1.0,
            ffn2_thresholds: vec![0.0],
            ..EncoderConfig::deit_s()
        }
    }

    #[test]
    fn dense_deit_s_total() {
        let b = dense_macs(&EncoderConfig::deit_s());
        assert_eq!(b.grand_total, 4_540_695_552);
        assert!((b.gmacs() - 4.5407).abs() < 5e-4);
        assert!((b.gmacs() / 4.54 - 1.0).abs() < 0.005);
        assert_eq!(b.reduction, 0.0);
        assert_eq!(
            b.totals.total(),
            b.layers.iter().map(|l| l.total).sum::<u64>()
        );
    }

    #[test]
    fn token_only_total() {
        let b = token_pruned_macs(&EncoderConfig::deit_s());
        assert_eq!(b.grand_total, 2_094_045_696);
        assert!((b.reduction - 0.5388).abs() < 1e-4);
    }

    #[test]
    fn single_token_layer() {
        let c = one_layer(1);
        let b = count_macs(&c, &[1], &[0]).unwrap();
        let l = &b.layers[0];
        assert_eq!(
            (l.qkv, l.qkt, l.av, l.proj, l.ffn1, l.ffn2),
            (442_368, 384, 384, 147_456, 589_824, 0)
        );
        // the quadratic coefficient of the per-layer closed form
        assert_eq!(l.qkt + l.av, 768);
    }

    #[test]
    fn closed_form_matches_parts() {
        for n in 1..=512u64 {
            let c = one_layer(n as usize);
            let parts = MacParts::layer(&c, n as usize, 1536);
            assert_eq!(parts.total(), 1_769_472 * n + 768 * n * n, "N={n}");
        }
    }

    #[test]
    fn fixture_combined_reduction() {
        let kept = deit_s_skip_fixture();
        assert_eq!(kept.len(), 12);
        let cfg = EncoderConfig::deit_s();
        let r = combined_reduction(&dense_macs(&cfg), &combined_macs(&cfg, &kept).unwrap());
        assert!((r - 0.615).abs() <= 0.015, "{r}");
        let no_skip = combined_macs(&cfg, &[1536; 12]).unwrap();
        assert_eq!(no_skip.grand_total, token_pruned_macs(&cfg).grand_total);
    }

    #[test]
    fn fixture_parse_errors() {
        assert!(parse_kept_csv("layer,kept_dims,ffn_dim\n1,2000,1536\n").is_err());
        assert!(parse_kept_csv("layer,kept_dims,ffn_dim\n2,10,1536\n").is_err());
        assert!(parse_kept_csv("layer,kept\n1,10\n").is_err());
    }

    fn summary(name: &str, cfg: &EncoderConfig, macs: u64) -> RunSummary {
        RunSummary {
            name: name.into(),
            tool_version: "0.1.0".into(),
            config_hash: cfg.hash(),
            dims: cfg.into(),
            macs,
            cycles: None,
            traffic_bytes: None,
        }
    }

    #[test]
    fn compare_two_runs() {
        let cfg = EncoderConfig::deit_s();
        let runs = [
            summary("baseline", &cfg.dense(), dense_macs(&cfg).grand_total),
            summary("pruned", &cfg, token_pruned_macs(&cfg).grand_total),
        ];
        let t = compare(&runs, false).unwrap();
        let d = t.rows[1].mac_reduction.unwrap();
        assert!((d - 0.539).abs() < 0.001);
        assert_eq!(t.rows[0].mac_reduction, Some(0.0));
        assert!(t
            .to_csv()
            .starts_with("name,config_hash,macs,cycles,traffic_bytes,mac_reduction"));
    }

    #[test]
    fn compare_single_run_has_no_deltas() {
        let cfg = EncoderConfig::deit_s();
        let t = compare(&[summary("a", &cfg, 1)], false).unwrap();
        assert_eq!(t.rows[0].mac_reduction, None);
        assert_eq!(
            t.to_csv().lines().next().unwrap(),
            "name,config_hash,macs,cycles,traffic_bytes"
        );
        assert_eq!(compare(&[], false), Err(AnalyticsError::NoRuns));
    }

    #[test]
    fn compare_rejects_mismatches() {
        let a = summary("a", &EncoderConfig::deit_s(), 1);
        let b = summary("b", &EncoderConfig::deit_ti(), 1);
        assert!(matches!(
            compare(&[a.clone(), b], false),
            Err(AnalyticsError::Mismatch {
                field: "embed_dim",
                ..
            })
        ));
        let mut c = a.clone();
        c.tool_version = "9.9.9".into();
        assert!(matches!(
            compare(&[a.clone(), c.clone()], false),
            Err(AnalyticsError::Mismatch {
                field: "tool_version",
                ..
            })
        ));
        assert!(compare(&[a, c], true).is_ok());
    }

    #[test]
    fn gops_at_peak() {
        assert_eq!(gops(512, 1, 1e9), 1024.0);
        assert_eq!(gops(1, 0, 1e9), 0.0);
    }

    proptest! {
        #[test]
        fn fc_terms_linear_attention_quadratic(n in 1usize..300, kept in 0usize..=1536) {
            let c = one_layer(n);
            let a = MacParts::layer(&c, n, kept);
            let b = MacParts::layer(&c, 2 * n, kept);
            prop_assert_eq!(b.qkv, 2 * a.qkv);
            prop_assert_eq!(b.proj, 2 * a.proj);
            prop_assert_eq!(b.ffn1, 2 * a.ffn1);
            prop_assert_eq!(b.ffn2, 2 * a.ffn2);
            prop_assert_eq!(b.qkt, 4 * a.qkt);
            prop_assert_eq!(b.av, 4 * a.av);
        }
    }
}
