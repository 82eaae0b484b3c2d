//! Commands behind the `ldpfl` binary.
//!
//! Output layout of a run directory:
//!
//! * `manifest.json`: config hash, version, timestamps and output paths.
//! * `records.jsonl`: one [`RoundRecord`] per line.
//! * `summary.csv`: one row with columns [`SUMMARY_COLUMNS`].
//!
//! A sweep writes one run directory per value plus `sweep.csv` with columns
//! [`SWEEP_COLUMNS`].

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use ldpfl_core::data::{dirichlet_partition, normalize_histogram, tv_distance};
use ldpfl_core::{DatasetSource, ExperimentConfig, Protocol, RoundRecord, Simulation};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SUMMARY_COLUMNS: [&str; 8] = [
    "protocol",
    "dataset",
    "attack",
    "aggregation",
    "rounds",
    "num_malicious",
    "final_error_rate",
    "mean_last5_error_rate",
];

pub const SWEEP_COLUMNS: [&str; 3] = ["value", "final_error_rate", "mean_last5_error_rate"];

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] ldpfl_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    /// Process exit code: 2 for bad input, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Usage(_) => 2,
            CliError::Core(ldpfl_core::Error::Config(_) | ldpfl_core::Error::Usage(_)) => 2,
            _ => 1,
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Parses a TOML experiment config. Schema errors name the offending field
/// path; dataset paths are resolved against the config's directory.
pub fn parse_config(text: &str, base_dir: &Path, origin: &Path) -> Result<ExperimentConfig> {
    let de = toml::Deserializer::new(text);
    let mut cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        let message = if path.is_empty() || path == "." {
            inner.message().to_string()
        } else {
            format!("{path}: {}", inner.message())
        };
        CliError::Config {
            path: origin.to_path_buf(),
            message,
        }
    })?;
    cfg.dataset.resolve_paths(base_dir);
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_config(&text, base, path)
}

/// SHA-256 of the config's canonical JSON form (keys sorted).
pub fn config_hash(cfg: &ExperimentConfig) -> Result<String> {
    let value = serde_json::to_value(cfg)?;
    let canonical = serde_json::to_string(&value)?;
    let digest = Sha256::digest(canonical.as_bytes());
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub artifact_version: String,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
    pub config: ExperimentConfig,
    pub records: PathBuf,
    pub summary: PathBuf,
}

/// The single row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub protocol: String,
    pub dataset: String,
    pub attack: String,
    pub aggregation: String,
    pub rounds: usize,
    pub num_malicious: usize,
    pub final_error_rate: f64,
    pub mean_last5_error_rate: f64,
}

fn now_ms() -> u128 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis())
}

fn dataset_label(src: &DatasetSource) -> String {
    match src {
        DatasetSource::Idx { images, subset, .. } => {
            let stem = images
                .parent()
                .and_then(|p| p.file_name())
                .map_or_else(|| "idx".to_string(), |n| n.to_string_lossy().into_owned());
            match subset {
                Some(n) => format!("{stem}[{n}]"),
                None => stem,
            }
        }
        DatasetSource::Synth { .. } => "synth".into(),
    }
}

pub fn summarize(cfg: &ExperimentConfig, records: &[RoundRecord]) -> Summary {
    let tail = &records[records.len().saturating_sub(5)..];
    let mean_last5 = if tail.is_empty() {
        f64::NAN
    } else {
        tail.iter().map(|r| r.error_rate).sum::<f64>() / tail.len() as f64
    };
    Summary {
        protocol: cfg.protocol.protocol.name().into(),
        dataset: dataset_label(&cfg.dataset),
        attack: match (&cfg.attack, cfg.malicious_ids.is_empty()) {
            (Some(plan), false) => plan.label(),
            _ => "none".into(),
        },
        aggregation: cfg.aggregation.name().into(),
        rounds: records.len(),
        num_malicious: cfg.malicious_ids.len(),
        final_error_rate: records.last().map_or(f64::NAN, |r| r.error_rate),
        mean_last5_error_rate: mean_last5,
    }
}

/// Writes records as JSON lines. Equal records give equal bytes.
pub fn write_records(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Runs an already-loaded config into `out_dir`.
pub fn run_config(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Summary> {
    fs::create_dir_all(out_dir)?;
    let started = now_ms();
    let mut sim = Simulation::new(cfg.clone())?;
    let records = sim.run()?;
    let records_path = out_dir.join("records.jsonl");
    write_records(&records_path, &records)?;

    let summary = summarize(cfg, &records);
    let summary_path = out_dir.join("summary.csv");
    let mut w = csv::Writer::from_path(&summary_path)?;
    w.serialize(&summary)?;
    w.flush()?;

    let manifest = RunManifest {
        config_hash: config_hash(cfg)?,
        artifact_version: env!("CARGO_PKG_VERSION").into(),
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
        config: cfg.clone(),
        records: records_path,
        summary: summary_path,
    };
    let mut f = File::create(out_dir.join("manifest.json"))?;
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.write_all(b"\n")?;
    log::info!(
        "{} / {} / {}: final error rate {:.4}",
        summary.protocol,
        summary.aggregation,
        summary.attack,
        summary.final_error_rate
    );
    Ok(summary)
}

/// `run --config <path> --out <dir> [--seed <u64>]`
pub fn cmd_run(config_path: &Path, out_dir: &Path, seed: Option<u64>) -> Result<Summary> {
    let mut cfg = load_config(config_path)?;
    if let Some(s) = seed {
        cfg.global_seed = s;
    }
    run_config(&cfg, out_dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SweepAxis {
    FractionMalicious,
    Alpha,
    Sigma,
    Epsilon,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::FractionMalicious => "fraction_malicious",
            SweepAxis::Alpha => "alpha",
            SweepAxis::Sigma => "sigma",
            SweepAxis::Epsilon => "epsilon",
        }
    }

    /// Returns `cfg` with the axis set to `value`.
    pub fn apply(self, cfg: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut out = cfg.clone();
        match self {
            SweepAxis::FractionMalicious => {
                if !(0.0..=1.0).contains(&value) {
                    return Err(CliError::Usage(format!("fraction_malicious must lie in [0, 1], got {value}")));
                }
                if cfg.attack.is_none() {
                    return Err(CliError::Usage("fraction_malicious sweep needs an [attack] section".into()));
                }
                let n = (value * cfg.num_clients as f64).round() as usize;
                out.malicious_ids = (0..n).collect();
            }
            SweepAxis::Alpha => out.partition.alpha = value,
            SweepAxis::Sigma => {
                if !cfg.protocol.protocol.is_gradient_perturbing() {
                    return Err(CliError::Usage(format!(
                        "sigma does not apply to {}, which is epsilon-driven",
                        cfg.protocol.protocol.name()
                    )));
                }
                out.protocol.sigma = value;
            }
            SweepAxis::Epsilon => {
                if cfg.protocol.protocol != Protocol::Ldpfl {
                    return Err(CliError::Usage(format!(
                        "epsilon does not apply to {}, which is sigma-driven",
                        cfg.protocol.protocol.name()
                    )));
                }
                out.protocol.epsilon = value;
            }
        }
        out.validate()?;
        Ok(out)
    }
}

/// One row of `sweep.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: f64,
    pub final_error_rate: f64,
    pub mean_last5_error_rate: f64,
}

/// Parses `0.1,0.2,1e3`.
pub fn parse_values(s: &str) -> Result<Vec<f64>> {
    let values = s
        .split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| CliError::Usage(format!("not a number: {t:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(CliError::Usage("no sweep values given".into()));
    }
    Ok(values)
}

/// `sweep --config <path> --axis <name> --values <csv> --out <dir>`
pub fn cmd_sweep(config_path: &Path, axis: SweepAxis, values: &[f64], out_dir: &Path) -> Result<Vec<SweepRow>> {
    let cfg = load_config(config_path)?;
    sweep_config(&cfg, axis, values, out_dir)
}

pub fn sweep_config(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64], out_dir: &Path) -> Result<Vec<SweepRow>> {
    // Check every point before running any of them.
    let points = values
        .iter()
        .map(|&v| axis.apply(cfg, v).map(|c| (v, c)))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out_dir)?;
    let rows = points
        .par_iter()
        .map(|(v, c)| {
            let dir = out_dir.join(format!("{}={}", axis.name(), v));
            let s = run_config(c, &dir)?;
            Ok(SweepRow {
                value: *v,
                final_error_rate: s.final_error_rate,
                mean_last5_error_rate: s.mean_last5_error_rate,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut w = csv::Writer::from_path(out_dir.join("sweep.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

/// Label histogram of one client.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientHistogram {
    pub client: usize,
    pub counts: Vec<usize>,
    /// Total variation distance to the global label distribution.
    pub tv_distance: f64,
}

/// Partitions the training data as a run would and histograms each client.
pub fn partition_report(cfg: &ExperimentConfig) -> Result<Vec<ClientHistogram>> {
    cfg.validate()?;
    let (train, _) = cfg.dataset.load(cfg.global_seed)?;
    let global = normalize_histogram(&train.label_histogram());
    let partition = dirichlet_partition(&train, &cfg.partition_config())?;
    Ok(partition
        .shards
        .iter()
        .enumerate()
        .map(|(client, shard)| {
            let mut counts = shard.label_histogram();
            counts.resize(train.num_classes(), 0);
            let tv = if shard.is_empty() {
                1.0
            } else {
                tv_distance(&normalize_histogram(&counts), &global)
            };
            ClientHistogram {
                client,
                counts,
                tv_distance: tv,
            }
        })
        .collect())
}

/// Writes `client,total,class_0..class_{K-1},tv_distance`.
pub fn write_partition_csv<W: Write>(rows: &[ClientHistogram], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let k = rows.first().map_or(0, |r| r.counts.len());
    let mut header = vec!["client".to_string(), "total".to_string()];
    header.extend((0..k).map(|c| format!("class_{c}")));
    header.push("tv_distance".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.client.to_string(), r.counts.iter().sum::<usize>().to_string()];
        rec.extend(r.counts.iter().map(usize::to_string));
        rec.push(r.tv_distance.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `partition-report --config <path> [--out <file>]`; stdout by default.
pub fn cmd_partition_report(config_path: &Path, out: Option<&Path>) -> Result<Vec<ClientHistogram>> {
    let cfg = load_config(config_path)?;
    let rows = partition_report(&cfg)?;
    match out {
        Some(p) => write_partition_csv(&rows, File::create(p)?)?,
        None => write_partition_csv(&rows, std::io::stdout().lock())?,
    }
    Ok(rows)
}
