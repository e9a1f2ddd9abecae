use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use vitprune_core::engine::Ffn2Mode;
use vitprune_core::Registry;

mod commands;
mod error;
mod settings;

use commands::write_file;
use error::{CliError, Result};
use settings::{resolve_out_dir, Overrides, Settings};

#[derive(Parser)]
#[command(
    name = "vitprune",
    version,
    about = "Pruned INT8 ViT encoder: engine, cycle model, traffic and MAC analytics"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// TOML experiment config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// deit-s, deit-ti or tiny.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    keep_ratio: Option<f64>,
    /// Per-layer kept FFN2 dims: a CSV path, or "deit-s" for the bundled table.
    #[arg(long)]
    skip_fixture: Option<String>,
    #[arg(long)]
    fetch_events: Option<u32>,
    /// Output directory (else $VITPRUNE_OUT_DIR, the config, or ./vitprune-out).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl Common {
    fn overrides(&self, model: Option<PathBuf>) -> Overrides {
        Overrides {
            config: self.config.clone(),
            preset: self.preset.clone(),
            model,
            seed: self.seed,
            keep_ratio: self.keep_ratio,
            skip_fixture: self.skip_fixture.clone(),
            fetch_events: self.fetch_events,
            out_dir: self.out_dir.clone(),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Skip,
    DenseZeroed,
}

#[derive(Subcommand)]
enum Command {
    /// MAC breakdown with cycle and traffic cross-checks.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// Trace from `run`; otherwise the configured token schedule is used.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Execute the INT8 encoder and write a trace.
    Run {
        #[command(flatten)]
        common: Common,
        /// Synthesize seeded weights instead of loading a container.
        #[arg(long)]
        synth: bool,
        /// Weight container written by `synth`.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "skip")]
        ffn2_mode: Mode,
        /// Trace path (default <out-dir>/trace.json).
        #[arg(long)]
        trace_out: Option<PathBuf>,
    },
    /// Cycle-level schedule of a traced run.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Use the configured token schedule instead of a trace.
        #[arg(long, conflicts_with = "trace")]
        analytic: bool,
    },
    /// External-memory traffic and SRAM residency.
    Traffic {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Align analyze reports (.json) or configs (.toml) against the first.
    Compare {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Accept reports from different tool versions.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Write a seeded synthetic weight container.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Container path (default <out-dir>/model.vpsw).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Leave the seeded input tensor out of the container.
        #[arg(long)]
        no_input: bool,
    },
}

fn emit(dir: &std::path::Path, files: &[(&str, String)]) -> Result<()> {
    for (name, body) in files {
        write_file(&dir.join(name), body)?;
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<bool> {
    let registry = Registry::builtin();
    match cli.command {
        Command::Analyze { common, trace } => {
            let settings = Settings::resolve(&common.overrides(None), &registry)?;
            let env = commands::analyze(&settings, trace.as_deref(), "run")?;
            print!("{}", commands::render_analyze(&env));
            emit(
                &settings.out_dir,
                &[
                    ("analyze.json", env.to_json()),
                    ("analyze_layers.csv", env.body.macs.layers_csv()),
                ],
            )?;
            Ok(env.body.pass())
        }
        Command::Run {
            common,
            synth,
            model,
            ffn2_mode,
            trace_out,
        } => {
            let settings = Settings::resolve(&common.overrides(model), &registry)?;
            let mode = match ffn2_mode {
                Mode::Skip => Ffn2Mode::Skip,
                Mode::DenseZeroed => Ffn2Mode::DenseZeroed,
            };
            let env = commands::run_engine(&settings, synth, mode, &registry)?;
            print!("{}", commands::render_trace(&env));
            let path = trace_out.unwrap_or_else(|| settings.out_dir.join("trace.json"));
            write_file(&path, &env.to_json())?;
            println!("trace        {}", path.display());
            Ok(true)
        }
        Command::Simulate {
            common,
            trace,
            analytic,
        } => {
            if trace.is_none() && !analytic {
                return Err(CliError::invalid(
                    "trace required: pass --trace <file> written by `vitprune run`, or --analytic",
                ));
            }
            let settings = Settings::resolve(&common.overrides(None), &registry)?;
            let w = commands::workload(&settings, trace.as_deref())?;
            let env = commands::simulate_report(&settings, &w)?;
            print!("{}", commands::render_simulate(&env));
            emit(
                &settings.out_dir,
                &[
                    ("simulate.json", env.to_json()),
                    ("simulate_layers.csv", env.body.layers_csv()),
                ],
            )?;
            Ok(true)
        }
        Command::Traffic { common, trace } => {
            let settings = Settings::resolve(&common.overrides(None), &registry)?;
            let w = commands::workload(&settings, trace.as_deref())?;
            let env = commands::traffic_report(&settings, &w)?;
            print!("{}", commands::render_traffic(&env));
            emit(
                &settings.out_dir,
                &[
                    ("traffic.json", env.to_json()),
                    ("traffic_layers.csv", env.body.traffic.layers_csv()),
                ],
            )?;
            Ok(env.body.sram.pass())
        }
        Command::Compare {
            inputs,
            force,
            out_dir,
        } => {
            let table = commands::compare_runs(&inputs, force, &registry)?;
            print!("{}", commands::render_compare(&table));
            let dir = resolve_out_dir(out_dir.as_deref(), None);
            let hash = vitprune_core::config::config_hash(&table);
            let env = vitprune_core::report::Envelope::new("compare", hash, &table);
            emit(
                &dir,
                &[
                    ("compare.json", env.to_json()),
                    ("compare.csv", table.to_csv()),
                ],
            )?;
            Ok(true)
        }
        Command::Synth {
            common,
            out,
            no_input,
        } => {
            let settings = Settings::resolve(&common.overrides(None), &registry)?;
            let path = out.unwrap_or_else(|| settings.out_dir.join("model.vpsw"));
            let model = commands::synth(&settings, &path, !no_input, &registry)?;
            println!("config hash  {}", settings.hash(&settings.encoder, None));
            println!("parameters   {}", model.param_count());
            println!("container    {}", path.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
