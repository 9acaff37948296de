//! Experiment driver: runs single training jobs or whole method sweeps from
//! a TOML config, writes JSON result records and CSV tables, and emits the
//! numbers behind comparison plots (effect sizes, ranks, pairwise decisions,
//! training curves).
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime
//! failure.

mod config;

use clap::{Parser, Subcommand};
use config::{load_config, ConfigFile};
use qrt::data::SynthKind;
use qrt::metrics::MetricConfig;
use qrt::report::{self, CurveRow, RunRecord, RunRequest};
use qrt::stats;
use rayon::prelude::*;
use serde::Serialize;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Runtime(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Runtime(_) => 4,
        }
    }
}

impl From<qrt::train::TrainError> for CliError {
    fn from(e: qrt::train::TrainError) -> Self {
        match e {
            qrt::train::TrainError::Data(d) => CliError::Data(d.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "qrt", version, about = "Calibrated-regression experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one (dataset, method, seed) experiment and write its record.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Method name (a config row's name, default its preset).
        #[arg(long)]
        method: String,
        /// Dataset name from the config; defaults to the first one.
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        seed: u64,
    },
    /// Run every (dataset, method, seed) combination of the config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Parallel jobs (defaults to the rayon heuristic).
        #[arg(long)]
        jobs: Option<usize>,
        /// Restrict to a comma-separated subset of method names.
        #[arg(long)]
        methods: Option<String>,
    },
    /// Statistical comparison over a directory of result records.
    Compare {
        #[arg(long)]
        results: PathBuf,
        #[arg(long, default_value = "nll")]
        metric: String,
        #[arg(long, default_value = "BASE")]
        baseline: String,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Output directory for report.json and the CSV tables.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-epoch curve data (tidy CSV) for selected methods on one dataset.
    Curves {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        dataset: String,
        /// Comma-separated method names; defaults to all present.
        #[arg(long)]
        methods: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset as CSV (features then target column).
    Synth {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train { config, method, dataset, seed } => cmd_train(&config, &method, dataset.as_deref(), seed),
        Command::Sweep { config, jobs, methods } => cmd_sweep(&config, jobs, methods.as_deref()),
        Command::Compare { results, metric, baseline, alpha, out } => {
            cmd_compare(&results, &metric, &baseline, alpha, &out)
        }
        Command::Curves { results, dataset, methods, out } => {
            cmd_curves(&results, &dataset, methods.as_deref(), &out)
        }
        Command::Synth { kind, n, seed, out } => cmd_synth(&kind, n, seed, &out),
    }
}

/// Serialize to a temp file in the target directory, then rename into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", dir.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes)
        .map_err(|e| CliError::Runtime(format!("writing {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| CliError::Runtime(format!("renaming into {}: {e}", path.display())))?;
    Ok(())
}

fn record_path(dir: &Path, record: &RunRecord) -> PathBuf {
    dir.join(format!("{}__{}__seed{}.json", record.dataset, record.method.name, record.seed))
}

fn write_record(dir: &Path, record: &RunRecord) -> Result<PathBuf, CliError> {
    let path = record_path(dir, record);
    let json = serde_json::to_string_pretty(record)
        .map_err(|e| CliError::Runtime(format!("serializing record: {e}")))?;
    write_atomic(&path, json.as_bytes())?;
    Ok(path)
}

fn build_requests(
    cfg: &ConfigFile,
    config_dir: &Path,
    method_filter: Option<&str>,
) -> Result<Vec<RunRequest>, CliError> {
    let wanted: Option<Vec<&str>> = method_filter.map(|m| m.split(',').map(str::trim).collect());
    let mut methods = Vec::new();
    for section in &cfg.methods {
        let spec = section.resolve()?;
        if wanted.as_ref().map(|w| w.contains(&spec.name.as_str())).unwrap_or(true) {
            methods.push(spec);
        }
    }
    if methods.is_empty() {
        return Err(CliError::Config("method filter matched nothing".into()));
    }
    let mut requests = Vec::new();
    for ds in &cfg.datasets {
        let dataset = ds.load(config_dir)?;
        for spec in &methods {
            for &seed in &cfg.experiment.seeds {
                requests.push(RunRequest {
                    dataset: dataset.clone(),
                    method: spec.clone(),
                    mdn: cfg.model.mdn_config(),
                    seed,
                    metric_cfg: MetricConfig::default(),
                });
            }
        }
    }
    Ok(requests)
}

fn cmd_train(
    config_path: &Path,
    method: &str,
    dataset: Option<&str>,
    seed: u64,
) -> Result<(), CliError> {
    let cfg = load_config(config_path)?;
    let config_dir = config_path.parent().unwrap_or_else(|| Path::new("."));
    let section = cfg
        .methods
        .iter()
        .find(|m| m.name.as_deref().unwrap_or(m.preset.as_str()) == method)
        .ok_or_else(|| CliError::Config(format!("method {method:?} not in config")))?;
    let spec = section.resolve()?;
    let ds_section = match dataset {
        Some(name) => cfg
            .datasets
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| CliError::Config(format!("dataset {name:?} not in config")))?,
        None => &cfg.datasets[0],
    };
    let data = ds_section.load(config_dir)?;
    let request = RunRequest {
        dataset: data,
        method: spec,
        mdn: cfg.model.mdn_config(),
        seed,
        metric_cfg: MetricConfig::default(),
    };
    let record = report::run_method(&request)?;
    let path = write_record(&cfg.experiment.output_dir, &record)?;
    println!("{}", path.display());
    Ok(())
}

fn cmd_sweep(config_path: &Path, jobs: Option<usize>, methods: Option<&str>) -> Result<(), CliError> {
    let cfg = load_config(config_path)?;
    let config_dir = config_path.parent().unwrap_or_else(|| Path::new("."));
    let requests = build_requests(&cfg, config_dir, methods)?;
    if let Some(n) = jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    }
    let out_dir = cfg.experiment.output_dir.clone();
    let results: Vec<Result<PathBuf, CliError>> = requests
        .par_iter()
        .map(|req| {
            let record = report::run_method(req)?;
            write_record(&out_dir, &record)
        })
        .collect();
    let mut done = 0;
    for r in results {
        let path = r?;
        done += 1;
        println!("{}", path.display());
    }
    eprintln!(
        "sweep {:?} complete: {done} runs -> {}",
        cfg.experiment.name,
        out_dir.display()
    );
    Ok(())
}

fn read_records(dir: &Path) -> Result<Vec<RunRecord>, CliError> {
    let mut records = Vec::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| CliError::Data(format!("reading {}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "json") == Some(true))
        .collect();
    paths.sort();
    for path in paths {
        let text = std::fs::read_to_string(&path)
            .map_err(|e| CliError::Data(format!("reading {}: {e}", path.display())))?;
        let record: RunRecord = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("parsing {}: {e}", path.display())))?;
        records.push(record);
    }
    if records.is_empty() {
        return Err(CliError::Data(format!("no result records under {}", dir.display())));
    }
    Ok(records)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| CliError::Runtime(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(format!("csv: {e}")))?;
    write_atomic(path, &bytes)
}

#[derive(Serialize)]
struct RankRow<'a> {
    method: &'a str,
    average_rank: f64,
}

#[derive(Serialize)]
struct LetterRow<'a> {
    method: &'a str,
    q125: f64,
    q25: f64,
    q50: f64,
    q75: f64,
    q875: f64,
}

fn cmd_compare(
    results: &Path,
    metric: &str,
    baseline: &str,
    alpha: f64,
    out: &Path,
) -> Result<(), CliError> {
    let records = read_records(results)?;
    let matrix = report::matrix_from_records(&records, metric).map_err(|e| match e {
        stats::StatsError::MissingCell { .. } => {
            // list every missing cell, not just the first
            let mut missing = Vec::new();
            let mut datasets: Vec<String> = records.iter().map(|r| r.dataset.clone()).collect();
            datasets.sort();
            datasets.dedup();
            let mut methods: Vec<String> =
                records.iter().map(|r| r.method.name.clone()).collect();
            methods.sort();
            methods.dedup();
            for d in &datasets {
                for m in &methods {
                    if !records.iter().any(|r| &r.dataset == d && &r.method.name == m) {
                        missing.push(format!("({d}, {m})"));
                    }
                }
            }
            CliError::Data(format!("ragged result matrix; missing cells: {}", missing.join(", ")))
        }
        other => CliError::Data(other.to_string()),
    })?;
    let lower_is_better = metric != "sd"; // sd is descriptive; rank sharper first
    let report = stats::compare(&matrix, metric, baseline, lower_is_better, alpha)
        .map_err(|e| CliError::Data(e.to_string()))?;

    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Runtime(format!("serializing report: {e}")))?;
    write_atomic(&out.join("report.json"), json.as_bytes())?;

    write_csv(&out.join("cohens_d.csv"), &report.cohens_d)?;
    let rank_rows: Vec<RankRow> = report
        .methods
        .iter()
        .zip(&report.average_ranks)
        .map(|(m, &r)| RankRow { method: m, average_rank: r })
        .collect();
    write_csv(&out.join("ranks.csv"), &rank_rows)?;
    write_csv(&out.join("pairwise.csv"), &report.pairwise)?;
    let letter_rows: Vec<LetterRow> = report
        .letter_values
        .iter()
        .map(|lv| LetterRow {
            method: &lv.method,
            q125: lv.quantiles[0],
            q25: lv.quantiles[1],
            q50: lv.quantiles[2],
            q75: lv.quantiles[3],
            q875: lv.quantiles[4],
        })
        .collect();
    write_csv(&out.join("letter_values.csv"), &letter_rows)?;
    println!("{}", out.join("report.json").display());
    Ok(())
}

fn cmd_curves(
    results: &Path,
    dataset: &str,
    methods: Option<&str>,
    out: &Path,
) -> Result<(), CliError> {
    let records = read_records(results)?;
    let wanted: Option<Vec<&str>> = methods.map(|m| m.split(',').map(str::trim).collect());
    let subset: Vec<RunRecord> = records
        .into_iter()
        .filter(|r| r.dataset == dataset)
        .filter(|r| wanted.as_ref().map(|w| w.contains(&r.method.name.as_str())).unwrap_or(true))
        .collect();
    if subset.is_empty() {
        return Err(CliError::Data(format!("no records for dataset {dataset:?}")));
    }
    let rows: Vec<CurveRow> = report::curve_rows(&subset);
    write_csv(out, &rows)?;
    println!("{}", out.display());
    Ok(())
}

fn cmd_synth(kind: &str, n: usize, seed: u64, out: &Path) -> Result<(), CliError> {
    let kind: SynthKind = kind.parse().map_err(|e: String| CliError::Config(e))?;
    let data = qrt::data::synth(kind, n, seed);
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    let d = data.x.cols();
    let mut header: Vec<String> = (0..d).map(|c| format!("x{c}")).collect();
    header.push("y".to_string());
    w.write_record(&header).map_err(|e| CliError::Runtime(format!("csv: {e}")))?;
    for r in 0..data.n() {
        let mut row: Vec<String> = (0..d).map(|c| format!("{}", data.x.get(r, c))).collect();
        row.push(format!("{}", data.y[r]));
        w.write_record(&row).map_err(|e| CliError::Runtime(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(format!("csv: {e}")))?;
    write_atomic(out, &bytes)?;
    println!("{}", out.display());
    Ok(())
}
