//! Experiment config file and its resolution against command-line flags.
//!
//! ```toml
//! seed = 7
//!
//! [model]
//! preset = "deit-s"          # or: container = "model.vpsw"
//!
//! [pruning]
//! keep_ratio = 0.5
//! prune_layers = [4, 7, 10]
//! ffn2_thresholds = [1.5, 1.5, 1.5, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.8]
//! activation = "relu"
//! skip_fixture = "deit-s"    # or a layer,kept_dims,ffn_dim CSV
//!
//! [pe]
//! softmax_cycles_per_row = 0
//!
//! [sram]
//! token_kb = 96
//!
//! [traffic]
//! fetch_events = 1
//!
//! [output]
//! dir = "results"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vitprune_core::analytics::{deit_s_skip_fixture, parse_kept_csv};
use vitprune_core::config::config_hash;
use vitprune_core::mem::{SramConfig, TrafficConfig};
use vitprune_core::model::load_model;
use vitprune_core::perf::PeConfig;
use vitprune_core::quant::QuantTensor;
use vitprune_core::{EncoderConfig, Model, Registry};

use crate::error::{CliError, Result};

pub const OUT_DIR_ENV: &str = "VITPRUNE_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "vitprune-out";
pub const BUILTIN_FIXTURE: &str = "deit-s";

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub pruning: PruningSection,
    pub pe: PeConfig,
    pub sram: SramConfig,
    pub traffic: TrafficConfig,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: Option<String>,
    pub container: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruningSection {
    pub keep_ratio: Option<f64>,
    pub prune_layers: Option<Vec<usize>>,
    pub ffn2_thresholds: Option<Vec<f64>>,
    pub activation: Option<String>,
    pub token_selector: Option<String>,
    pub ffn2_pruner: Option<String>,
    pub skip_fixture: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))
    }
}

/// Flags shared by the subcommands that take a config.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub preset: Option<String>,
    pub model: Option<PathBuf>,
    pub seed: Option<u64>,
    pub keep_ratio: Option<f64>,
    pub skip_fixture: Option<String>,
    pub fetch_events: Option<u32>,
    pub out_dir: Option<PathBuf>,
}

pub struct Settings {
    pub encoder: EncoderConfig,
    pub pe: PeConfig,
    pub sram: SramConfig,
    pub traffic: TrafficConfig,
    pub seed: u64,
    /// Per-layer kept FFN2 dims for runs without a trace.
    pub skip_kept: Option<Vec<usize>>,
    pub out_dir: PathBuf,
    /// Weights and optional stored input when a container was named.
    pub loaded: Option<(Model, Option<QuantTensor>)>,
}

/// Everything that determines a report, hashed for provenance.
#[derive(Serialize)]
struct Provenance<'a> {
    encoder: &'a EncoderConfig,
    pe: &'a PeConfig,
    sram: &'a SramConfig,
    traffic: &'a TrafficConfig,
    seed: u64,
    skip_kept: &'a Option<Vec<usize>>,
    source: Option<&'a str>,
}

pub fn load_skip_fixture(spec: &str) -> Result<Vec<usize>> {
    if spec == BUILTIN_FIXTURE {
        return Ok(deit_s_skip_fixture());
    }
    let path = Path::new(spec);
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_kept_csv(&text).map_err(|e| CliError::invalid(format!("{spec}: {e}")))
}

pub fn resolve_out_dir(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_path_buf();
    }
    if let Some(env) = std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(env);
    }
    config
        .map(Path::to_path_buf)
        .unwrap_or_else(|| DEFAULT_OUT_DIR.into())
}

impl Settings {
    pub fn resolve(o: &Overrides, registry: &Registry) -> Result<Self> {
        let rc = match &o.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let container = o.model.clone().or(rc.model.container.clone());
        let preset = o.preset.clone().or(rc.model.preset.clone());
        if container.is_some() && preset.is_some() {
            return Err(CliError::invalid(
                "model: give either a preset or a container, not both",
            ));
        }
        let loaded = match &container {
            Some(path) => Some(load_model(path, registry).map_err(|e| CliError::model(path, e))?),
            None => None,
        };
        let mut encoder = match (&loaded, &preset) {
            (Some((m, _)), _) => m.config.clone(),
            (None, p) => EncoderConfig::preset(p.as_deref().unwrap_or("deit-s"))
                .map_err(CliError::invalid)?,
        };

        let p = &rc.pruning;
        if let Some(v) = o.keep_ratio.or(p.keep_ratio) {
            encoder.keep_ratio = v;
        }
        if let Some(v) = &p.prune_layers {
            encoder.prune_layers = v.clone();
        }
        if let Some(v) = &p.ffn2_thresholds {
            encoder.ffn2_thresholds = v.clone();
        }
        if let Some(v) = &p.activation {
            encoder.activation = v.clone();
        }
        if let Some(v) = &p.token_selector {
            encoder.token_selector = v.clone();
        }
        if let Some(v) = &p.ffn2_pruner {
            encoder.ffn2_pruner = v.clone();
        }
        encoder.validate().map_err(CliError::invalid)?;
        registry.resolve(&encoder).map_err(CliError::invalid)?;

        let mut traffic = rc.traffic.clone();
        if let Some(v) = o.fetch_events {
            traffic.fetch_events = v;
        }
        traffic.validate().map_err(CliError::invalid)?;
        rc.pe.validate().map_err(CliError::invalid)?;

        let skip_kept = match o.skip_fixture.as_deref().or(p.skip_fixture.as_deref()) {
            Some(spec) => {
                let kept = load_skip_fixture(spec)?;
                if kept.len() != encoder.num_layers {
                    return Err(CliError::invalid(format!(
                        "skip_fixture: {} layers for a {}-layer encoder",
                        kept.len(),
                        encoder.num_layers
                    )));
                }
                if let Some(k) = kept.iter().find(|&&k| k > encoder.ffn_dim) {
                    return Err(CliError::invalid(format!(
                        "skip_fixture: {k} kept dims exceed ffn_dim {}",
                        encoder.ffn_dim
                    )));
                }
                Some(kept)
            }
            None => None,
        };

        let loaded = loaded.map(|(mut m, x)| {
            m.config = encoder.clone();
            (m, x)
        });
        Ok(Self {
            encoder,
            pe: rc.pe,
            sram: rc.sram,
            traffic,
            seed: o.seed.unwrap_or(rc.seed),
            skip_kept,
            out_dir: resolve_out_dir(o.out_dir.as_deref(), rc.output.dir.as_deref()),
            loaded,
        })
    }

    /// Provenance hash; `source` names an upstream artifact such as a trace.
    pub fn hash(&self, encoder: &EncoderConfig, source: Option<&str>) -> String {
        config_hash(&Provenance {
            encoder,
            pe: &self.pe,
            sram: &self.sram,
            traffic: &self.traffic,
            seed: self.seed,
            skip_kept: &self.skip_kept,
            source,
        })
    }
}
