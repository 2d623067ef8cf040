//! Command-line front end for the federated LoRA simulator.
//!
//! Verbs:
//! - `run`             one experiment, full artifact set into --out
//! - `compare`         the same config under several strategies, with a
//!   joined CSV plus a summary of final losses and norm traces
//! - `sweep-editing`   grid over edit modes and Min-K values
//! - `validate-config` parse + validate, print the resolved config
//!
//! Logging goes to stderr, gated by FEDLORA_LOG_LEVEL (error|info|debug).

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fedlora::config::ExperimentConfig;
use fedlora::editing::EditMode;
use fedlora::fedsim::RoundRecord;
use fedlora::telemetry::{execute_run, MetricsRow, CSV_HEADER, SCHEMA_VERSION};
use fedlora::Strategy;

#[derive(Clone, Copy, PartialEq, Eq, PartialOrd)]
enum LogLevel {
    Error = 0,
    Info = 1,
    Debug = 2,
}

fn log_level() -> LogLevel {
    match std::env::var("FEDLORA_LOG_LEVEL").as_deref() {
        Ok("debug") => LogLevel::Debug,
        Ok("info") => LogLevel::Info,
        _ => LogLevel::Error,
    }
}

macro_rules! log_info {
    ($($arg:tt)*) => {
        if log_level() >= LogLevel::Info {
            eprintln!("[info] {}", format!($($arg)*));
        }
    };
}

macro_rules! log_debug {
    ($($arg:tt)*) => {
        if log_level() >= LogLevel::Debug {
            eprintln!("[debug] {}", format!($($arg)*));
        }
    };
}

#[derive(Parser)]
#[command(
    name = "fedlora",
    version,
    about = "Deterministic federated LoRA simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment config file (TOML, or JSON with a .json extension).
    #[arg(long)]
    config: PathBuf,
    /// Output directory (created if absent).
    #[arg(long)]
    out: PathBuf,
    /// Replace the config's seed bundle with one derived from this master seed.
    #[arg(long)]
    seed_override: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv, metrics.json,
    /// config-echo.json and the final adapter snapshot.
    Run(CommonArgs),
    /// Run the same config once per strategy on an identical seed bundle.
    Compare {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated strategies (at least two, no duplicates).
        #[arg(long, value_delimiter = ',', required = true)]
        strategies: Vec<String>,
    },
    /// Grid over editing modes and Min-K values.
    SweepEditing {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated edit modes (a_only, b_only, both, none).
        #[arg(long, value_delimiter = ',', required = true)]
        modes: Vec<String>,
        /// Comma-separated Min-K values.
        #[arg(long, value_delimiter = ',', required = true)]
        ks: Vec<usize>,
    },
    /// Parse and validate a config, printing the resolved form.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load_config(path: &Path, seed_override: Option<u64>) -> Result<ExperimentConfig> {
    let mut config =
        ExperimentConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    if let Some(master) = seed_override {
        config.seeds = fedlora::SeedBundle::from_master(master);
        log_debug!("seed override {master} -> {}", config.seeds.describe());
    }
    Ok(config)
}

fn run_and_log(config: &ExperimentConfig, out_dir: &Path) -> Result<Vec<RoundRecord>> {
    log_info!(
        "running strategy={} rounds={} missing_ratio={} -> {}",
        config.strategy.name(),
        config.rounds,
        config.missing_ratio,
        out_dir.display()
    );
    let (_, records) = execute_run(config, out_dir)?;
    for r in &records {
        log_debug!(
            "round {}: global_loss={:.6} personalized_loss={:.6} norm={:.4} ({:.2}s)",
            r.round,
            r.global_loss,
            r.personalized_loss,
            r.total_adapter_norm(),
            r.wall_time_secs
        );
    }
    if let Some(last) = records.last() {
        log_info!(
            "finished: final global_loss={:.6} personalized_loss={:.6}",
            last.global_loss,
            last.personalized_loss
        );
    }
    Ok(records)
}

#[derive(serde::Serialize)]
struct StrategySummary {
    strategy: String,
    final_global_loss: Option<f64>,
    final_personalized_loss: Option<f64>,
    norm_trace: Vec<f64>,
}

#[derive(serde::Serialize)]
struct CompareSummary {
    schema_version: u32,
    strategies: Vec<StrategySummary>,
}

fn cmd_compare(common: &CommonArgs, strategies: &[String]) -> Result<()> {
    if strategies.len() < 2 {
        bail!("compare needs at least two strategies");
    }
    let mut parsed = Vec::new();
    for name in strategies {
        let strategy = Strategy::from_str(name)?;
        if parsed.contains(&strategy) {
            bail!("duplicate strategy {name:?}");
        }
        parsed.push(strategy);
    }
    let base = load_config(&common.config, common.seed_override)?;
    fs::create_dir_all(&common.out)?;

    let mut joined = vec![CSV_HEADER.to_string()];
    let mut summaries = Vec::new();
    for strategy in parsed {
        let mut config = base.clone();
        config.strategy = strategy;
        let sub_dir = common.out.join(strategy.name());
        let records = run_and_log(&config, &sub_dir)?;
        for r in &records {
            joined.push(MetricsRow::from_record(&config, r).to_csv_line());
        }
        summaries.push(StrategySummary {
            strategy: strategy.name().to_string(),
            final_global_loss: records.last().map(|r| r.global_loss),
            final_personalized_loss: records.last().map(|r| r.personalized_loss),
            norm_trace: records.iter().map(|r| r.total_adapter_norm()).collect(),
        });
    }
    let mut joined_text = joined.join("\n");
    joined_text.push('\n');
    fs::write(common.out.join("compare.csv"), joined_text)?;
    let summary = CompareSummary {
        schema_version: SCHEMA_VERSION,
        strategies: summaries,
    };
    fs::write(
        common.out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(())
}

#[derive(serde::Serialize)]
struct SweepCell {
    mode: String,
    k: usize,
    final_global_loss: Option<f64>,
    final_personalized_loss: Option<f64>,
}

#[derive(serde::Serialize)]
struct SweepSummary {
    schema_version: u32,
    cells: Vec<SweepCell>,
}

fn cmd_sweep(common: &CommonArgs, modes: &[String], ks: &[usize]) -> Result<()> {
    if modes.is_empty() || ks.is_empty() {
        bail!("sweep-editing needs at least one mode and one k");
    }
    let mut parsed_modes = Vec::new();
    for name in modes {
        let mode = EditMode::from_str(name)?;
        if parsed_modes.contains(&mode) {
            bail!("duplicate mode {name:?}");
        }
        parsed_modes.push(mode);
    }
    let mut seen_ks = Vec::new();
    for &k in ks {
        if seen_ks.contains(&k) {
            bail!("duplicate k {k}");
        }
        seen_ks.push(k);
    }
    let base = load_config(&common.config, common.seed_override)?;
    fs::create_dir_all(&common.out)?;

    let mut cells = Vec::new();
    let mut sweep_csv = vec!["mode,k,final_global_loss,final_personalized_loss".to_string()];
    for &mode in &parsed_modes {
        for &k in ks {
            let mut config = base.clone();
            config.edit.mode = mode;
            config.edit.k = k;
            config.validate().map_err(anyhow::Error::from)?;
            let sub_dir = common.out.join(format!("{}_k{k}", mode.name()));
            let records = run_and_log(&config, &sub_dir)?;
            let cell = SweepCell {
                mode: mode.name().to_string(),
                k,
                final_global_loss: records.last().map(|r| r.global_loss),
                final_personalized_loss: records.last().map(|r| r.personalized_loss),
            };
            sweep_csv.push(format!(
                "{},{},{},{}",
                cell.mode,
                cell.k,
                cell.final_global_loss
                    .map_or(String::new(), |v| v.to_string()),
                cell.final_personalized_loss
                    .map_or(String::new(), |v| v.to_string()),
            ));
            cells.push(cell);
        }
    }
    let mut sweep_text = sweep_csv.join("\n");
    sweep_text.push('\n');
    fs::write(common.out.join("sweep.csv"), sweep_text)?;
    let summary = SweepSummary {
        schema_version: SCHEMA_VERSION,
        cells,
    };
    fs::write(
        common.out.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    let outcome: Result<()> = match &cli.command {
        Command::Run(common) => load_config(&common.config, common.seed_override)
            .and_then(|config| run_and_log(&config, &common.out).map(|_| ())),
        Command::Compare { common, strategies } => cmd_compare(common, strategies),
        Command::SweepEditing { common, modes, ks } => cmd_sweep(common, modes, ks),
        Command::ValidateConfig { config } => load_config(config, None).map(|resolved| {
            println!("{}", resolved.to_json().expect("config serializes"));
        }),
    };
    if let Err(e) = outcome {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
