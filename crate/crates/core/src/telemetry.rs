//! Metrics persistence: a versioned per-round CSV for plotting, a nested JSON
//! document with full per-client detail, the config echo, and final adapter
//! snapshots.
//!
//! The CSV is the primary figure-data format (one row per round). It is
//! appended and flushed as each round completes, so a killed run leaves a
//! valid prefix of rows. Floats are serialized with Rust's shortest
//! round-trip formatting, which is what makes identical reruns byte-identical
//! and lets the JSON/CSV cross-check compare values exactly.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::editing::EditReport;
use crate::error::{Error, Result};
use crate::fedsim::{run_experiment, RoundRecord, RoundSink, ServerState};
use crate::lora::GlobalAdapterState;
use crate::matrix::Matrix;

pub const SCHEMA_VERSION: u32 = 1;

/// Exact CSV header for schema version 1. Readers reject anything else.
pub const CSV_HEADER: &str = "schema_version,round,strategy,missing_ratio,global_loss,\
personalized_loss,adapter_norms,edited_layers,edited_similarities,sampled_clients,seed_bundle";

/// One metrics row: the CSV columns plus (JSON only) the full edit reports.
///
/// `edited_layers` and `edited_similarities` carry, per edited client, the
/// least-similar layer index and its pre-clamp similarity — the pair the
/// layer-selection analysis plots. Rounds without edits leave them empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub schema_version: u32,
    pub round: usize,
    pub strategy: String,
    pub missing_ratio: f64,
    pub global_loss: f64,
    pub personalized_loss: f64,
    pub adapter_norms: Vec<f64>,
    pub edited_layers: Vec<(usize, usize)>,
    pub edited_similarities: Vec<(usize, f64)>,
    pub sampled_clients: Vec<usize>,
    pub seed_bundle: String,
    /// Full per-client reports; serialized to JSON, omitted from CSV.
    #[serde(default)]
    pub reports: Vec<EditReport>,
}

impl MetricsRow {
    pub fn from_record(config: &ExperimentConfig, record: &RoundRecord) -> Self {
        let edited: Vec<&EditReport> = record
            .edit_reports
            .iter()
            .filter(|r| r.applied_gamma.is_some())
            .collect();
        Self {
            schema_version: SCHEMA_VERSION,
            round: record.round,
            strategy: config.strategy.name().to_string(),
            missing_ratio: config.missing_ratio,
            global_loss: record.global_loss,
            personalized_loss: record.personalized_loss,
            adapter_norms: record.adapter_norms.clone(),
            edited_layers: edited.iter().map(|r| (r.client_id, r.min_layer)).collect(),
            edited_similarities: edited
                .iter()
                .map(|r| (r.client_id, r.similarities[r.min_layer]))
                .collect(),
            sampled_clients: record.sampled_clients.clone(),
            seed_bundle: config.seeds.describe(),
            reports: record.edit_reports.clone(),
        }
    }

    /// Equality over the CSV-visible columns (ignores `reports`).
    pub fn csv_fields_eq(&self, other: &MetricsRow) -> bool {
        self.schema_version == other.schema_version
            && self.round == other.round
            && self.strategy == other.strategy
            && self.missing_ratio == other.missing_ratio
            && self.global_loss == other.global_loss
            && self.personalized_loss == other.personalized_loss
            && self.adapter_norms == other.adapter_norms
            && self.edited_layers == other.edited_layers
            && self.edited_similarities == other.edited_similarities
            && self.sampled_clients == other.sampled_clients
            && self.seed_bundle == other.seed_bundle
    }

    pub fn to_csv_line(&self) -> String {
        let norms = join_semicolon(self.adapter_norms.iter().map(f64::to_string));
        let layers = join_semicolon(self.edited_layers.iter().map(|(c, l)| format!("{c}:{l}")));
        let sims = join_semicolon(
            self.edited_similarities
                .iter()
                .map(|(c, s)| format!("{c}:{s}")),
        );
        let sampled = join_semicolon(self.sampled_clients.iter().map(usize::to_string));
        format!(
            "{},{},{},{},{},{},{},{},{},{},{}",
            self.schema_version,
            self.round,
            self.strategy,
            self.missing_ratio,
            self.global_loss,
            self.personalized_loss,
            norms,
            layers,
            sims,
            sampled,
            self.seed_bundle
        )
    }

    pub fn from_csv_line(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.split(',').collect();
        let expected = CSV_HEADER.split(',').count();
        if fields.len() != expected {
            return Err(Error::MetricsParse(format!(
                "expected {expected} fields, found {} in {line:?}",
                fields.len()
            )));
        }
        let parse_f64 = |s: &str, what: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::MetricsParse(format!("bad {what}: {s:?}")))
        };
        let parse_usize = |s: &str, what: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::MetricsParse(format!("bad {what}: {s:?}")))
        };
        let schema_version: u32 = fields[0]
            .parse()
            .map_err(|_| Error::MetricsParse(format!("bad schema_version: {:?}", fields[0])))?;
        if schema_version != SCHEMA_VERSION {
            return Err(Error::MetricsParse(format!(
                "unsupported schema version {schema_version}"
            )));
        }
        let mut edited_layers = Vec::new();
        for part in fields[7].split(';').filter(|p| !p.is_empty()) {
            let (c, l) = part
                .split_once(':')
                .ok_or_else(|| Error::MetricsParse(format!("bad edited layer {part:?}")))?;
            edited_layers.push((parse_usize(c, "client id")?, parse_usize(l, "layer")?));
        }
        let mut edited_similarities = Vec::new();
        for part in fields[8].split(';').filter(|p| !p.is_empty()) {
            let (c, s) = part
                .split_once(':')
                .ok_or_else(|| Error::MetricsParse(format!("bad similarity {part:?}")))?;
            edited_similarities.push((parse_usize(c, "client id")?, parse_f64(s, "similarity")?));
        }
        Ok(Self {
            schema_version,
            round: parse_usize(fields[1], "round")?,
            strategy: fields[2].to_string(),
            missing_ratio: parse_f64(fields[3], "missing_ratio")?,
            global_loss: parse_f64(fields[4], "global_loss")?,
            personalized_loss: parse_f64(fields[5], "personalized_loss")?,
            adapter_norms: fields[6]
                .split(';')
                .filter(|p| !p.is_empty())
                .map(|p| parse_f64(p, "adapter norm"))
                .collect::<Result<Vec<_>>>()?,
            edited_layers,
            edited_similarities,
            sampled_clients: fields[9]
                .split(';')
                .filter(|p| !p.is_empty())
                .map(|p| parse_usize(p, "sampled client"))
                .collect::<Result<Vec<_>>>()?,
            seed_bundle: fields[10].to_string(),
            reports: Vec::new(),
        })
    }
}

fn join_semicolon(parts: impl Iterator<Item = String>) -> String {
    parts.collect::<Vec<_>>().join(";")
}

/// Strict reader: header must match the schema exactly (unknown or reordered
/// columns are rejected) and every data line must parse in full.
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::MetricsParse("empty metrics file".to_string()))?;
    if header != CSV_HEADER {
        return Err(Error::MetricsParse(format!(
            "unrecognized header {header:?}"
        )));
    }
    lines
        .filter(|l| !l.is_empty())
        .map(MetricsRow::from_csv_line)
        .collect()
}

/// Crash-recovery reader: returns every leading row that parses cleanly plus
/// the error that stopped the scan, if any.
///
/// Only newline-terminated lines count: a run killed mid-write leaves at most
/// one unterminated trailing fragment, and a truncated numeric field can
/// still parse (losing digits), so the terminator is the row's completeness
/// marker.
pub fn read_metrics_csv_prefix(text: &str) -> (Vec<MetricsRow>, Option<Error>) {
    let complete = match text.rfind('\n') {
        Some(pos) => &text[..=pos],
        None => {
            return (
                Vec::new(),
                Some(Error::MetricsParse("no complete lines".to_string())),
            )
        }
    };
    let mut lines = complete.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return (
                Vec::new(),
                Some(Error::MetricsParse(format!(
                    "unrecognized header {other:?}"
                ))),
            )
        }
    }
    let mut rows = Vec::new();
    for line in lines.filter(|l| !l.is_empty()) {
        match MetricsRow::from_csv_line(line) {
            Ok(row) => rows.push(row),
            Err(e) => return (rows, Some(e)),
        }
    }
    (rows, None)
}

/// The nested metrics document written alongside the CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsDocument {
    pub schema_version: u32,
    pub rows: Vec<MetricsRow>,
}

/// Final model state persisted at the end of a run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdapterSnapshot {
    pub schema_version: u32,
    pub strategy: String,
    pub rounds: usize,
    /// The global adapter pair (current for pair strategies; the untouched
    /// initial pair under flora).
    pub global: GlobalAdapterState,
    /// Accumulated merged delta (all-zero for pair strategies).
    pub merged_delta: Vec<Matrix>,
}

/// Streaming CSV writer: one row per round, flushed immediately.
pub struct CsvSink {
    config: ExperimentConfig,
    writer: BufWriter<File>,
    rows_written: usize,
}

impl CsvSink {
    pub fn create(config: &ExperimentConfig, path: &Path) -> Result<Self> {
        let file = File::create(path)?;
        let mut writer = BufWriter::new(file);
        writeln!(writer, "{CSV_HEADER}")?;
        writer.flush()?;
        Ok(Self {
            config: config.clone(),
            writer,
            rows_written: 0,
        })
    }

    pub fn rows_written(&self) -> usize {
        self.rows_written
    }
}

impl RoundSink for CsvSink {
    fn on_round(&mut self, record: &RoundRecord) -> Result<()> {
        let row = MetricsRow::from_record(&self.config, record);
        writeln!(self.writer, "{}", row.to_csv_line())?;
        self.writer.flush()?;
        self.rows_written += 1;
        Ok(())
    }
}

/// Run an experiment and persist the full artifact set into `out_dir`:
/// `config-echo.json`, `metrics.csv` (streamed per round), `metrics.json`,
/// and `global_adapter.json`.
pub fn execute_run(
    config: &ExperimentConfig,
    out_dir: &Path,
) -> Result<(ServerState, Vec<RoundRecord>)> {
    config.validate()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config-echo.json"), config.to_json()?)?;

    let mut sink = CsvSink::create(config, &out_dir.join("metrics.csv"))?;
    let (state, records) = run_experiment(config, &mut sink)?;

    let rows: Vec<MetricsRow> = records
        .iter()
        .map(|r| MetricsRow::from_record(config, r))
        .collect();
    let doc = MetricsDocument {
        schema_version: SCHEMA_VERSION,
        rows,
    };
    fs::write(
        out_dir.join("metrics.json"),
        serde_json::to_string_pretty(&doc)?,
    )?;

    let snapshot = AdapterSnapshot {
        schema_version: SCHEMA_VERSION,
        strategy: config.strategy.name().to_string(),
        rounds: records.len(),
        global: state.global.clone(),
        merged_delta: state.merged_delta.clone(),
    };
    fs::write(
        out_dir.join("global_adapter.json"),
        serde_json::to_string_pretty(&snapshot)?,
    )?;
    Ok((state, records))
}
