// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Command-line front end.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::Error;
use crate::metrics;
use crate::plot;
use crate::sim::{self, RunSummary, SimConfig, SimOutput};

const COLUMNS_HELP: &str = "\
Output files:
  rounds.csv      round, trained, published, publish_rate, nodes, mean_accuracy,
                  mean_loss, modularity, modules, pureness, energy_total,
                  energy_reference, round_time
                  (evaluation columns are empty except every eval_every rounds
                  and on the final round; energies are cumulative, round_time
                  is the summed update time of that round)
  energy.csv      round, client, e_tip, e_agg, e_train, e_ref, e_total, t_tip
                  (one row per client update)
  comparison.csv  round, sdagfl_time, esdagfl_time, sdagfl_energy,
                  esdagfl_energy, sdagfl_reference_energy,
                  esdagfl_reference_energy, sdagfl_accuracy, esdagfl_accuracy
  sweep.csv       threshold, final_accuracy, pureness, publish_rate, total_energy
  summary.json    config hash, final metrics, energy totals by component
  ledger.ndjson   one {id, parents, publisher, round} object per node
  payloads.bin    u32 LE node count, u32 LE dimension, then f64 LE payloads

Environment:
  TANGLEFL_THREADS  caps client-level parallelism (0 = all cores)

Exit codes: 0 success, 2 configuration error, 3 I/O error.";

#[derive(Debug, Parser)]
#[command(name = "tanglefl", version, about = "Specializing DAG federated learning simulator", after_long_help = COLUMNS_HELP)]
pub struct Cli {
    /// Suppress progress output.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one simulation and write rounds.csv, energy.csv, summary.json, curves.svg.
    Run {
        #[command(flatten)]
        common: Common,
        /// Skip curves.svg.
        #[arg(long)]
        no_svg: bool,
    },
    /// Run the reference baseline and the event-triggered variant with one seed.
    Compare {
        #[command(flatten)]
        common: Common,
    },
    /// Run the event-triggered variant once per threshold.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated trigger thresholds, e.g. "0,0.008,0.12".
        #[arg(long)]
        thresholds: String,
    },
    /// Run a simulation and export the final ledger.
    ExportLedger {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON configuration file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Override the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Io(String),
    Other(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Other(_) => 1,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Config(m) | CliError::Io(m) | CliError::Other(m) => m,
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => CliError::Config(e.to_string()),
            Error::Io(_) => CliError::Io(e.to_string()),
            Error::Csv(ref inner) if matches!(inner.kind(), csv::ErrorKind::Io(_)) => CliError::Io(e.to_string()),
            other => CliError::Other(other.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Resolved configuration plus provenance, written as `manifest.json`.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub config_path: PathBuf,
    pub config: SimConfig,
    pub out_dir: PathBuf,
    pub config_hash: String,
}

impl RunManifest {
    pub fn load(common: &Common) -> Result<Self, CliError> {
        let text = fs::read_to_string(&common.config).map_err(|e| io_err(&common.config, e))?;
        let mut config = parse_config(&text).map_err(|m| CliError::Config(format!("{}:{m}", common.config.display())))?;
        if let Some(seed) = common.seed {
            config.seed = seed;
        }
        let config = config.resolve()?;
        Ok(Self {
            config_path: common.config.clone(),
            config_hash: config.content_hash(),
            config,
            out_dir: common.out.clone(),
        })
    }
}

/// Parses a JSON config; errors carry `line:column: message`.
pub fn parse_config(text: &str) -> Result<SimConfig, String> {
    serde_json::from_str(text).map_err(|e| {
        let msg = e.to_string();
        // serde_json appends " at line L column C"; move it to the front
        let bare = msg.split(" at line ").next().unwrap_or(&msg);
        format!("{}:{}: {bare}", e.line(), e.column())
    })
}

pub fn parse_thresholds(list: &str) -> Result<Vec<f64>, CliError> {
    let parts: Vec<&str> = list.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    if parts.is_empty() {
        return Err(CliError::Config("--thresholds: empty threshold list".into()));
    }
    parts
        .iter()
        .map(|p| {
            let v: f64 = p
                .parse()
                .map_err(|e| CliError::Config(format!("--thresholds: cannot parse {p:?} as a number: {e}")))?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(CliError::Config(format!("--thresholds: {p} must be finite and >= 0")));
            }
            Ok(v)
        })
        .collect()
}

fn create_out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<(), Error>) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    f(&mut w).map_err(|e| match e {
        Error::Io(inner) => io_err(path, inner),
        other => CliError::from(other),
    })?;
    w.flush().map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    write_file(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

fn write_csv_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<(), CliError> {
    write_file(path, |w| {
        let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        csv.write_record(header)?;
        for r in rows {
            csv.serialize(r)?;
        }
        csv.flush()?;
        Ok(())
    })
}

fn write_run_outputs(out: &SimOutput, dir: &Path, svg: bool) -> Result<RunSummary, CliError> {
    write_file(&dir.join("rounds.csv"), |w| metrics::write_rounds_csv(&out.records, w))?;
    write_file(&dir.join("energy.csv"), |w| out.energy.write_csv(w))?;
    let summary = out.summary();
    write_json(&dir.join("summary.json"), &summary)?;
    if svg {
        let body = plot::render_curves(&[(out.config.variant.name(), &out.records)]);
        let path = dir.join("curves.svg");
        fs::write(&path, body).map_err(|e| io_err(&path, e))?;
    }
    Ok(summary)
}

pub fn cmd_run(common: &Common, svg: bool, quiet: bool) -> Result<(), CliError> {
    let manifest = RunManifest::load(common)?;
    create_out_dir(&common.out)?;
    let out = sim::run(manifest.config.clone())?;
    write_json(&common.out.join("manifest.json"), &manifest)?;
    let summary = write_run_outputs(&out, &common.out, svg)?;
    if !quiet {
        let m = &summary.final_metrics;
        println!(
            "{} rounds={} nodes={} publish_rate={:.3} accuracy={} pureness={} energy={:.6e}",
            summary.variant.name(),
            summary.rounds,
            summary.nodes,
            summary.publish_rate,
            fmt_opt(m.mean_accuracy),
            fmt_opt(m.pureness),
            summary.energy.total
        );
    }
    Ok(())
}

#[derive(Serialize)]
struct ComparisonSummary {
    config_hash: String,
    energy_reduction_percent: f64,
    time_reduction_percent: f64,
    sdagfl: RunSummary,
    esdagfl: RunSummary,
}

pub const COMPARISON_COLUMNS: [&str; 9] = [
    "round",
    "sdagfl_time",
    "esdagfl_time",
    "sdagfl_energy",
    "esdagfl_energy",
    "sdagfl_reference_energy",
    "esdagfl_reference_energy",
    "sdagfl_accuracy",
    "esdagfl_accuracy",
];

pub fn cmd_compare(common: &Common, quiet: bool) -> Result<(), CliError> {
    let manifest = RunManifest::load(common)?;
    create_out_dir(&common.out)?;
    let cmp = sim::compare(&manifest.config)?;
    write_csv_rows(&common.out.join("comparison.csv"), &COMPARISON_COLUMNS, &cmp.rows)?;
    let summary = ComparisonSummary {
        config_hash: manifest.config_hash.clone(),
        energy_reduction_percent: cmp.energy_reduction_percent(),
        time_reduction_percent: cmp.time_reduction_percent(),
        sdagfl: cmp.baseline.summary(),
        esdagfl: cmp.triggered.summary(),
    };
    write_json(&common.out.join("comparison.json"), &summary)?;
    let svg = plot::render_curves(&[("sdagfl", &cmp.baseline.records), ("esdagfl", &cmp.triggered.records)]);
    let path = common.out.join("curves.svg");
    fs::write(&path, svg).map_err(|e| io_err(&path, e))?;
    if !quiet {
        println!(
            "energy reduction {:.2}% (time {:.2}%): sdagfl accuracy {} vs esdagfl accuracy {}",
            summary.energy_reduction_percent,
            summary.time_reduction_percent,
            fmt_opt(summary.sdagfl.final_metrics.mean_accuracy),
            fmt_opt(summary.esdagfl.final_metrics.mean_accuracy),
        );
    }
    Ok(())
}

pub const SWEEP_COLUMNS: [&str; 5] = ["threshold", "final_accuracy", "pureness", "publish_rate", "total_energy"];

pub fn cmd_sweep(common: &Common, thresholds: &str, quiet: bool) -> Result<(), CliError> {
    let thresholds = parse_thresholds(thresholds)?;
    let manifest = RunManifest::load(common)?;
    create_out_dir(&common.out)?;
    let rows = sim::sweep_threshold(&manifest.config, &thresholds)?;
    write_csv_rows(&common.out.join("sweep.csv"), &SWEEP_COLUMNS, &rows)?;
    if !quiet {
        for r in &rows {
            println!(
                "threshold={} accuracy={} pureness={} publish_rate={:.3}",
                r.threshold,
                fmt_opt(r.final_accuracy),
                fmt_opt(r.pureness),
                r.publish_rate
            );
        }
    }
    Ok(())
}

pub fn cmd_export_ledger(common: &Common, quiet: bool) -> Result<(), CliError> {
    let manifest = RunManifest::load(common)?;
    create_out_dir(&common.out)?;
    let out = sim::run(manifest.config)?;
    write_file(&common.out.join("ledger.ndjson"), |w| out.ledger.write_ndjson(w))?;
    write_file(&common.out.join("payloads.bin"), |w| out.ledger.write_payloads(w))?;
    if !quiet {
        println!("exported {} nodes", out.ledger.node_count());
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.4}"))
}

/// Runs the parsed command and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let result = match &cli.command {
        Command::Run { common, no_svg } => cmd_run(common, !no_svg, cli.quiet),
        Command::Compare { common } => cmd_compare(common, cli.quiet),
        Command::Sweep { common, thresholds } => cmd_sweep(common, thresholds, cli.quiet),
        Command::ExportLedger { common } => cmd_export_ledger(common, cli.quiet),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}
