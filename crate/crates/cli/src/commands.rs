use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use vitprune_core::analytics::{
    compare, count_workload_macs, dense_macs, token_pruned_macs, ComparisonTable, MacBreakdown,
    ModelDims, RunSummary,
};
use vitprune_core::engine::{Ffn2Mode, RunOptions};
use vitprune_core::mem::{sram_check, total_traffic, SramReport, TrafficReport};
use vitprune_core::model::{save_model, synth_input};
use vitprune_core::perf::{
    dense_ffn_workloads, simulate, workloads_with_kept, CycleReport, LayerWorkload, PerfError,
};
use vitprune_core::report::{Envelope, TOOL_VERSION};
use vitprune_core::{EncoderConfig, Engine, LayerTrace, Model, Registry};

use crate::error::{CliError, Result};
use crate::settings::Settings;

pub const TRACE_KIND: &str = "trace";
pub const ANALYZE_KIND: &str = "analyze";

/// What `run` records: enough to replay every downstream model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTrace {
    pub encoder: EncoderConfig,
    pub seed: u64,
    pub model_source: String,
    pub ffn2_mode: Ffn2Mode,
    pub output_shape: Vec<usize>,
    pub output_scale: f64,
    pub output: Vec<i8>,
    pub token_origin: Vec<usize>,
    pub layers: Vec<LayerTrace>,
}

/// Shapes plus per-layer workloads, from a trace or from the config.
pub struct Workload {
    pub encoder: EncoderConfig,
    pub layers: Vec<LayerWorkload>,
    pub source: String,
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn read_envelope<T: serde::de::DeserializeOwned>(path: &Path, kind: &str) -> Result<Envelope<T>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let env: Envelope<serde_json::Value> = Envelope::from_json(&text)
        .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    if env.kind != kind {
        return Err(CliError::invalid(format!(
            "{}: expected a {kind} report, found '{}'",
            path.display(),
            env.kind
        )));
    }
    let body = serde_json::from_value(env.body)
        .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    Ok(Envelope {
        tool: env.tool,
        tool_version: env.tool_version,
        kind: env.kind,
        config_hash: env.config_hash,
        body,
    })
}

pub fn load_trace(path: &Path) -> Result<Envelope<RunTrace>> {
    let env: Envelope<RunTrace> = read_envelope(path, TRACE_KIND)?;
    env.body
        .encoder
        .validate()
        .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?;
    if env.body.layers.len() != env.body.encoder.num_layers {
        return Err(CliError::invalid(format!(
            "{}: {} layer traces for a {}-layer encoder",
            path.display(),
            env.body.layers.len(),
            env.body.encoder.num_layers
        )));
    }
    Ok(env)
}

pub fn workload(settings: &Settings, trace: Option<&Path>) -> Result<Workload> {
    if let Some(path) = trace {
        let env = load_trace(path)?;
        return Ok(Workload {
            layers: LayerWorkload::from_traces(&env.body.layers),
            encoder: env.body.encoder,
            source: format!("trace {}", env.config_hash),
        });
    }
    let encoder = settings.encoder.clone();
    let (layers, source) = match &settings.skip_kept {
        Some(kept) => (
            workloads_with_kept(&encoder, kept).map_err(CliError::invalid)?,
            "schedule with FFN2 skip fixture",
        ),
        None => (dense_ffn_workloads(&encoder), "schedule"),
    };
    Ok(Workload {
        encoder,
        layers,
        source: source.to_string(),
    })
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn giga(x: u64) -> String {
    format!("{:.4} G ({x})", x as f64 / 1e9)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeReport {
    pub summary: RunSummary,
    pub workload_source: String,
    pub dense_macs: u64,
    pub token_only_macs: u64,
    pub token_only_reduction: f64,
    pub reduction: f64,
    pub macs: MacBreakdown,
    /// Absent when the dims do not map onto the PE array.
    pub total_cycles: Option<u64>,
    pub utilization: Option<f64>,
    pub effective_gops: Option<f64>,
    pub cycle_model_note: Option<String>,
    pub traffic_reduction: f64,
    pub checks: Vec<Check>,
}

impl AnalyzeReport {
    pub fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

/// MACs, cycles and traffic for one workload, cross-checked.
pub fn analyze(
    settings: &Settings,
    trace: Option<&Path>,
    name: &str,
) -> Result<Envelope<AnalyzeReport>> {
    let w = workload(settings, trace)?;
    let cfg = &w.encoder;
    let macs = count_workload_macs(cfg, &w.layers).map_err(CliError::invalid)?;
    let dense = dense_macs(cfg);
    let token_only = token_pruned_macs(cfg);
    let cycles = match simulate(cfg, &w.layers, &settings.pe) {
        Ok(c) => Ok(c),
        Err(e @ PerfError::HeadDim { .. }) => Err(e.to_string()),
        Err(e) => return Err(CliError::invalid(e)),
    };
    let traffic = total_traffic(cfg, &w.layers, &settings.traffic).map_err(CliError::invalid)?;

    let (d, f) = (cfg.embed_dim as u64, cfg.ffn_dim as u64);
    let n = cfg.num_tokens as u64;
    let closed_form = cfg.num_layers as u64 * (n * (4 * d * d + 2 * d * f) + 2 * d * n * n);
    let mut checks = vec![
        Check {
            name: "layer totals sum to the grand total".into(),
            pass: macs.layers.iter().map(|l| l.total).sum::<u64>() == macs.grand_total
                && macs.totals.total() == macs.grand_total,
        },
        Check {
            name: "dense count matches the closed form".into(),
            pass: dense.grand_total == closed_form,
        },
        Check {
            name: "FFN2 fetch bytes follow the masks".into(),
            pass: traffic
                .layers
                .iter()
                .zip(&w.layers)
                .all(|(t, l)| t.ffn2_bytes_pruned == l.kept_dims() as u64 * d),
        },
    ];
    if let Ok(c) = &cycles {
        checks.push(Check {
            name: "cycle model issues the counted MACs".into(),
            pass: c.total_macs == macs.grand_total,
        });
    }
    let cycles = cycles.as_ref();
    let hash = settings.hash(cfg, Some(&w.source));
    let summary = RunSummary {
        name: name.to_string(),
        tool_version: TOOL_VERSION.to_string(),
        config_hash: hash.clone(),
        dims: ModelDims::from(cfg),
        macs: macs.grand_total,
        cycles: cycles.ok().map(|c| c.total_cycles),
        traffic_bytes: Some(traffic.total.pruned),
    };
    let body = AnalyzeReport {
        summary,
        workload_source: w.source,
        dense_macs: dense.grand_total,
        token_only_macs: token_only.grand_total,
        token_only_reduction: token_only.reduction,
        reduction: macs.reduction,
        total_cycles: cycles.ok().map(|c| c.total_cycles),
        utilization: cycles.ok().map(|c| c.utilization),
        effective_gops: cycles.ok().map(|c| c.effective_gops),
        cycle_model_note: cycles.err().cloned(),
        traffic_reduction: traffic.total_reduction,
        checks,
        macs,
    };
    Ok(Envelope::new(ANALYZE_KIND, hash, body))
}

pub fn render_analyze(env: &Envelope<AnalyzeReport>) -> String {
    let r = &env.body;
    let mut s = String::new();
    let _ = writeln!(s, "config hash        {}", env.config_hash);
    let _ = writeln!(s, "workload           {}", r.workload_source);
    let _ = writeln!(s, "dense MACs         {}", giga(r.dense_macs));
    let _ = writeln!(
        s,
        "token-pruned MACs  {}  reduction {}",
        giga(r.token_only_macs),
        pct(r.token_only_reduction)
    );
    let _ = writeln!(
        s,
        "MACs               {}  reduction {}",
        giga(r.macs.grand_total),
        pct(r.reduction)
    );
    let t = &r.macs.totals;
    let _ = writeln!(
        s,
        "  qkv {}  qk^t {}  a.v {}  proj {}  ffn1 {}  ffn2 {}",
        t.qkv, t.qkt, t.av, t.proj, t.ffn1, t.ffn2
    );
    match (
        r.total_cycles,
        r.utilization,
        r.effective_gops,
        &r.cycle_model_note,
    ) {
        (Some(c), Some(u), Some(g), _) => {
            let _ = writeln!(s, "cycles             {c}  utilization {u:.4}  {g:.1} GOPS");
        }
        (_, _, _, note) => {
            let _ = writeln!(
                s,
                "cycles             n/a ({})",
                note.as_deref().unwrap_or("not modelled")
            );
        }
    }
    let _ = writeln!(s, "traffic reduction  {}", pct(r.traffic_reduction));
    for c in &r.checks {
        let _ = writeln!(
            s,
            "check              {}: {}",
            c.name,
            if c.pass { "ok" } else { "FAILED" }
        );
    }
    s
}

pub fn run_engine(
    settings: &Settings,
    synth: bool,
    mode: Ffn2Mode,
    registry: &Registry,
) -> Result<Envelope<RunTrace>> {
    let (model, input, source) = match (&settings.loaded, synth) {
        (Some(_), true) => {
            return Err(CliError::invalid(
                "run: --synth and a model container are exclusive",
            ))
        }
        (Some((m, x)), false) => {
            let x = x
                .clone()
                .unwrap_or_else(|| synth_input(&m.config, settings.seed));
            (m.clone(), x, "container".to_string())
        }
        (None, true) => {
            let m = Model::synthesize(&settings.encoder, settings.seed, registry)
                .map_err(CliError::invalid)?;
            let x = synth_input(&settings.encoder, settings.seed);
            (m, x, "synthetic".to_string())
        }
        (None, false) => {
            return Err(CliError::invalid(
                "run: no model; pass --synth or --model <container>",
            ))
        }
    };
    let opts = RunOptions {
        ffn2_mode: mode,
        keep_layer_outputs: false,
    };
    let out = Engine::new(&model, registry)
        .map_err(CliError::invalid)?
        .with_options(opts)
        .run(&input)
        .map_err(CliError::invalid)?;
    let body = RunTrace {
        encoder: model.config.clone(),
        seed: settings.seed,
        model_source: source,
        ffn2_mode: mode,
        output_shape: out.tokens.shape().to_vec(),
        output_scale: out.tokens.scale(),
        output: out.tokens.data().to_vec(),
        token_origin: out.token_origin,
        layers: out.traces,
    };
    Ok(Envelope::new(
        TRACE_KIND,
        settings.hash(&model.config, None),
        body,
    ))
}

pub fn render_trace(env: &Envelope<RunTrace>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "config hash  {}", env.config_hash);
    for l in &env.body.layers {
        let _ = writeln!(
            s,
            "layer {:>2}  tokens {:>4}  ffn2 kept {:>5}/{}  act sparsity {:.3}",
            l.layer_index,
            l.tokens_out,
            l.ffn2_kept_dims,
            l.ffn2_mask.len(),
            l.activation_sparsity
        );
    }
    s
}

pub fn simulate_report(settings: &Settings, w: &Workload) -> Result<Envelope<CycleReport>> {
    let r = simulate(&w.encoder, &w.layers, &settings.pe).map_err(CliError::invalid)?;
    Ok(Envelope::new(
        "simulate",
        settings.hash(&w.encoder, Some(&w.source)),
        r,
    ))
}

pub fn render_simulate(env: &Envelope<CycleReport>) -> String {
    let r = &env.body;
    let mut s = String::new();
    let _ = writeln!(s, "config hash   {}", env.config_hash);
    for l in &r.layers {
        let _ = writeln!(
            s,
            "layer {:>2}  tokens {:>4}  cycles {:>8}  attention {:>8}  ffn {:>8}  sorter {:>4}",
            l.layer, l.tokens, l.cycles, l.attention_cycles, l.ffn_cycles, l.sorter_cycles
        );
    }
    let _ = writeln!(s, "total cycles  {}", r.total_cycles);
    let _ = writeln!(s, "issued MACs   {}", r.total_macs);
    let _ = writeln!(
        s,
        "utilization   {:.4} (peak {} MACs/cycle)",
        r.utilization, r.peak_macs_per_cycle
    );
    let _ = writeln!(
        s,
        "latency       {:.3} ms  {:.1} GOPS",
        r.latency_seconds * 1e3,
        r.effective_gops
    );
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrafficBody {
    pub traffic: TrafficReport,
    pub sram: SramReport,
}

pub fn traffic_report(settings: &Settings, w: &Workload) -> Result<Envelope<TrafficBody>> {
    let traffic =
        total_traffic(&w.encoder, &w.layers, &settings.traffic).map_err(CliError::invalid)?;
    let sram = sram_check(&w.encoder, &w.layers, &settings.pe, &settings.sram)
        .map_err(CliError::invalid)?;
    Ok(Envelope::new(
        "traffic",
        settings.hash(&w.encoder, Some(&w.source)),
        TrafficBody { traffic, sram },
    ))
}

pub fn render_traffic(env: &Envelope<TrafficBody>) -> String {
    let r = &env.body.traffic;
    let mut s = String::new();
    let _ = writeln!(s, "config hash        {}", env.config_hash);
    let _ = writeln!(
        s,
        "token fetch        {} -> {} bytes  reduction {}  (reference {})",
        r.token.baseline,
        r.token.pruned,
        pct(r.token_reduction),
        pct(r.reference_token_reduction)
    );
    let _ = writeln!(s, "note               {}", r.methodology_note);
    let _ = writeln!(
        s,
        "weight fetch       {} bytes (QKV, projection, FFN1; unpruned)",
        r.weight.baseline
    );
    let _ = writeln!(
        s,
        "FFN2 weight fetch  {} -> {} bytes  reduction {}  (reference {})",
        r.ffn2_weight.baseline,
        r.ffn2_weight.pruned,
        pct(r.ffn2_reduction),
        pct(r.reference_ffn2_reduction)
    );
    let _ = writeln!(
        s,
        "total fetch        {} -> {} bytes  reduction {}  (reference {})",
        r.total.baseline,
        r.total.pruned,
        pct(r.total_reduction),
        pct(r.reference_total_reduction)
    );
    let m = &env.body.sram;
    let _ = writeln!(
        s,
        "SRAM high water    token {} B  weight {} B  temp {} B",
        m.token_high_water, m.weight_high_water, m.temp_high_water
    );
    match m.first_overflow() {
        None => {
            let _ = writeln!(s, "SRAM check         pass");
        }
        Some(c) => {
            let _ = writeln!(
                s,
                "SRAM check         FAIL: layer {} {} buffer needs {} B of {} B",
                c.layer, c.buffer, c.required_bytes, c.capacity_bytes
            );
        }
    }
    s
}

/// Runs or loads every member, then aligns them against the first.
/// `.toml` members are analyzed concurrently; anything else is read as a
/// saved analyze report.
pub fn compare_runs(
    inputs: &[PathBuf],
    force: bool,
    registry: &Registry,
) -> Result<ComparisonTable> {
    let results: Vec<Result<RunSummary>> = std::thread::scope(|scope| {
        let handles: Vec<_> = inputs
            .iter()
            .map(|path| scope.spawn(move || compare_member(path, registry)))
            .collect();
        handles
            .into_iter()
            .map(|h| {
                h.join()
                    .unwrap_or_else(|_| Err(CliError::invalid("analysis thread panicked")))
            })
            .collect()
    });
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    compare(&runs, force).map_err(CliError::invalid)
}

fn member_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

fn compare_member(path: &Path, registry: &Registry) -> Result<RunSummary> {
    let name = member_name(path);
    if path.extension().is_some_and(|e| e == "toml") {
        let o = crate::settings::Overrides {
            config: Some(path.to_path_buf()),
            ..Default::default()
        };
        let settings = Settings::resolve(&o, registry)?;
        return Ok(analyze(&settings, None, &name)?.body.summary);
    }
    let env: Envelope<AnalyzeReport> = read_envelope(path, ANALYZE_KIND)?;
    let mut summary = env.body.summary;
    summary.name = name;
    summary.tool_version = env.tool_version;
    Ok(summary)
}

pub fn render_compare(t: &ComparisonTable) -> String {
    let mut s = String::new();
    let opt = |v: Option<u64>| v.map(|x| x.to_string()).unwrap_or_else(|| "-".into());
    let _ = writeln!(
        s,
        "{:<16} {:>14} {:>12} {:>14}{}",
        "run",
        "MACs",
        "cycles",
        "traffic B",
        if t.has_deltas() {
            "   MAC red.  cycle red.  traffic red."
        } else {
            ""
        }
    );
    for r in &t.rows {
        let _ = write!(
            s,
            "{:<16} {:>14} {:>12} {:>14}",
            r.name,
            r.macs,
            opt(r.cycles),
            opt(r.traffic_bytes)
        );
        if t.has_deltas() {
            let p = |v: Option<f64>| v.map(pct).unwrap_or_else(|| "-".into());
            let _ = write!(
                s,
                "  {:>9}  {:>10}  {:>12}",
                p(r.mac_reduction),
                p(r.cycle_reduction),
                p(r.traffic_reduction)
            );
        }
        s.push('\n');
    }
    s
}

pub fn synth(
    settings: &Settings,
    out: &Path,
    with_input: bool,
    registry: &Registry,
) -> Result<Model> {
    let model =
        Model::synthesize(&settings.encoder, settings.seed, registry).map_err(CliError::invalid)?;
    let input = with_input.then(|| synth_input(&settings.encoder, settings.seed));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    save_model(out, &model, input.as_ref()).map_err(|e| CliError::container(out, e))?;
    Ok(model)
}
