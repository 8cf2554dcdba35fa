//! `fedsel run|sweep|study|report`.
//!
//! Exit codes: 0 success, 1 output or internal failure, 2 invalid
//! configuration or input data, 3 numeric divergence.
//!
//! Every CSV starts with the schema line `# fedsel-csv v1`.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::data::PartitionMode;
use crate::error::FedselError;
use crate::federation::{aggregate_runs, run_experiment, AggregateRow, ExperimentResult, MeanStd, RoundMetrics, SeedRun};
use crate::rng::ALL_STREAMS;
use crate::selection::PolicySpec;
use crate::study::{run_study, StudyConfig, StudyDataset, StudyReport, FEATURE_NAMES};

pub const CSV_SCHEMA_LINE: &str = "# fedsel-csv v1";

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGENCE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "fedsel", version, about = "Federated-learning client-selection simulator")]
pub struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment config.
    Run(RunArgs),
    /// Run the Cartesian product of a sweep config's axes.
    Sweep(RunArgs),
    /// Run the pairwise feature study.
    Study(RunArgs),
    /// Merge aggregate CSVs into comparison tables.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Added to every seed in the config.
    #[arg(long, default_value_t = 0)]
    pub seed_offset: u64,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run or sweep output directories (or aggregate CSV files).
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Round for the accuracy table; defaults to the last round.
    #[arg(long)]
    pub round: Option<usize>,
    /// Test-accuracy target for the rounds-to-target table.
    #[arg(long, default_value_t = 0.5)]
    pub target: f64,
}

/// An error paired with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<FedselError> for CliError {
    fn from(e: FedselError) -> Self {
        let code = match &e {
            FedselError::Divergence { .. } => EXIT_DIVERGENCE,
            e if e.is_config() => EXIT_CONFIG,
            _ => EXIT_FAILURE,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn output_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError {
        code: EXIT_FAILURE,
        message: format!("cannot write {}: {e}", path.display()),
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses arguments, runs the command and returns the exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(CliError {
                code: EXIT_CONFIG,
                message: "--jobs must be >= 1".into(),
            });
        }
        pool = pool.num_threads(j);
    }
    let pool = pool.build().map_err(|e| CliError {
        code: EXIT_FAILURE,
        message: format!("cannot start thread pool: {e}"),
    })?;
    pool.install(|| match &cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Study(a) => cmd_study(a),
        Command::Report(a) => cmd_report(a),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub config: serde_json::Value,
    /// Artifact name → path relative to the manifest.
    pub artifacts: BTreeMap<String, String>,
    /// Named random streams derived from each seed.
    pub seed_streams: Vec<String>,
    pub seeds: Vec<u64>,
    pub duration_secs: f64,
}

fn manifest(command: &str, config: serde_json::Value, config_hash: String, seeds: Vec<u64>, started: Instant) -> RunManifest {
    RunManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        command: command.into(),
        config_hash,
        config,
        artifacts: BTreeMap::new(),
        seed_streams: ALL_STREAMS.iter().map(|s| s.to_string()).collect(),
        seeds,
        duration_secs: 0.0,
    }
    .finish(started)
}

impl RunManifest {
    fn finish(mut self, started: Instant) -> Self {
        self.duration_secs = started.elapsed().as_secs_f64();
        self
    }
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| output_error(dir, e))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| output_error(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    write_text(path, &text)
}

/// Writes `# fedsel-csv v1`, a header and rows.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> CliResult<()> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(header).map_err(|e| output_error(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| output_error(path, e))?;
    }
    let body = w.into_inner().map_err(|e| output_error(path, e))?;
    let mut text = format!("{CSV_SCHEMA_LINE}\n").into_bytes();
    text.extend(body);
    fs::write(path, text).map_err(|e| output_error(path, e))
}

/// Reads a fedsel CSV, checking the schema line.
pub fn read_csv(path: &Path) -> CliResult<(Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).map_err(|e| CliError {
        code: EXIT_CONFIG,
        message: format!("cannot read {}: {e}", path.display()),
    })?;
    let body = text.strip_prefix(CSV_SCHEMA_LINE).map(|b| b.trim_start_matches(['\r', '\n']));
    let Some(body) = body else {
        return Err(CliError {
            code: EXIT_CONFIG,
            message: format!("{}: missing '{CSV_SCHEMA_LINE}' header line", path.display()),
        });
    };
    let mut r = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    let bad = |e: csv::Error| CliError {
        code: EXIT_CONFIG,
        message: format!("{}: {e}", path.display()),
    };
    let header = r.headers().map_err(bad)?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()).map_err(bad))
        .collect::<CliResult<_>>()?;
    Ok((header, rows))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const METRICS_HEADER: [&str; 14] = [
    "seed",
    "round",
    "eta",
    "train_loss",
    "val_loss",
    "val_accuracy",
    "test_loss",
    "test_accuracy",
    "selected",
    "subset_score",
    "regret",
    "bytes_summary",
    "bytes_full",
    "bytes_cumulative",
];

fn metrics_row(m: &RoundMetrics) -> Vec<String> {
    vec![
        m.seed.to_string(),
        m.round.to_string(),
        m.eta.to_string(),
        m.train_loss.to_string(),
        m.val_loss.to_string(),
        m.val_accuracy.to_string(),
        m.test_loss.to_string(),
        m.test_accuracy.to_string(),
        m.selected.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(";"),
        opt(m.subset_score),
        opt(m.regret),
        m.bytes_summary.to_string(),
        m.bytes_full.to_string(),
        m.bytes_cumulative.to_string(),
    ]
}

pub const AGGREGATE_HEADER: [&str; 18] = [
    "policy",
    "policy_spec",
    "queue_len",
    "heterogeneity",
    "round",
    "seeds",
    "train_loss_mean",
    "train_loss_std",
    "val_loss_mean",
    "val_loss_std",
    "val_accuracy_mean",
    "val_accuracy_std",
    "test_loss_mean",
    "test_loss_std",
    "test_accuracy_mean",
    "test_accuracy_std",
    "regret_mean",
    "regret_std",
];

pub fn heterogeneity_label(p: &PartitionMode) -> String {
    match p {
        PartitionMode::Shard { shards_per_client } => format!("shard:{shards_per_client}"),
        PartitionMode::Dirichlet { alpha } => format!("dirichlet:{alpha}"),
    }
}

/// Policy spec without its queue length, as compact JSON.
fn policy_spec_key(p: &PolicySpec) -> String {
    let mut v = serde_json::to_value(p).expect("serializable");
    if let Some(o) = v.as_object_mut() {
        o.remove("queue_len");
    }
    v.to_string()
}

fn aggregate_rows(cfg: &ExperimentConfig, rows: &[AggregateRow]) -> Vec<Vec<String>> {
    let ms = |m: MeanStd| [m.mean.to_string(), m.std.to_string()];
    rows.iter()
        .map(|r| {
            let mut out = vec![
                cfg.policy.label().to_string(),
                policy_spec_key(&cfg.policy),
                cfg.policy.queue_len().to_string(),
                heterogeneity_label(&cfg.partition),
                r.round.to_string(),
                r.seeds.to_string(),
            ];
            for m in [r.train_loss, r.val_loss, r.val_accuracy, r.test_loss, r.test_accuracy] {
                out.extend(ms(m));
            }
            match r.regret {
                Some(m) => out.extend(ms(m)),
                None => out.extend([String::new(), String::new()]),
            }
            out
        })
        .collect()
}

fn load_run_config(args: &RunArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::from_file(&args.config)?;
    for s in &mut cfg.seeds {
        *s = s.checked_add(args.seed_offset).ok_or_else(|| CliError {
            code: EXIT_CONFIG,
            message: "seed offset overflows u64".into(),
        })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes metrics.csv, aggregate.csv, rounds.jsonl and manifest.json.
fn write_run_outputs(dir: &Path, cfg: &ExperimentConfig, result: &ExperimentResult, command: &str, started: Instant) -> CliResult<()> {
    create_dir(dir)?;
    let metrics: Vec<Vec<String>> = result.runs.iter().flat_map(|r| r.metrics().map(metrics_row)).collect();
    write_csv(&dir.join("metrics.csv"), &METRICS_HEADER, &metrics)?;
    write_csv(&dir.join("aggregate.csv"), &AGGREGATE_HEADER, &aggregate_rows(cfg, &result.aggregate))?;
    let mut jsonl = String::new();
    for r in &result.runs {
        for rec in &r.records {
            jsonl += &serde_json::to_string(rec).expect("serializable");
            jsonl.push('\n');
        }
    }
    write_text(&dir.join("rounds.jsonl"), &jsonl)?;
    let mut m = manifest(
        command,
        serde_json::from_str(&cfg.canonical_json()).expect("canonical json"),
        cfg.config_hash(),
        cfg.seeds.clone(),
        started,
    );
    for name in ["metrics.csv", "aggregate.csv", "rounds.jsonl"] {
        m.artifacts.insert(name.trim_end_matches(".csv").trim_end_matches(".jsonl").into(), name.into());
    }
    write_json(&dir.join("manifest.json"), &m.finish(started))
}

pub fn cmd_run(args: &RunArgs) -> CliResult<()> {
    let started = Instant::now();
    let cfg = load_run_config(args)?;
    log::info!("running {} seeds, config {}", cfg.seeds.len(), cfg.config_hash());
    let result = run_experiment(&cfg)?;
    write_run_outputs(&args.out, &cfg, &result, "run", started)?;
    if let Some(last) = result.aggregate.last() {
        println!(
            "round {}: test accuracy {:.4} ± {:.4}",
            last.round, last.test_accuracy.mean, last.test_accuracy.std
        );
    }
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxes {
    /// One run per seed; defaults to the base config's seeds.
    #[serde(default)]
    pub seeds: Option<Vec<u64>>,
    /// Requires a shard partition in the base config.
    #[serde(default)]
    pub shards_per_client: Option<Vec<usize>>,
    #[serde(default)]
    pub policies: Option<Vec<PolicySpec>>,
    /// Applied to PNCS policies only.
    #[serde(default)]
    pub queue_lengths: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: ExperimentConfig,
    #[serde(default)]
    pub axes: SweepAxes,
}

/// One point of a sweep: a single-seed experiment config and its directory.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub name: String,
    pub config: ExperimentConfig,
}

impl SweepConfig {
    pub fn from_file(path: &Path) -> crate::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| {
            FedselError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let mut cfg: SweepConfig = serde_json::from_str(&text)
            .map_err(|e| FedselError::Config(format!("{}: invalid sweep config: {e}", path.display())))?;
        cfg.base.resolve_paths(path.parent().unwrap_or(Path::new(".")));
        Ok(cfg)
    }

    /// Cartesian product in policy, heterogeneity, queue, seed order.
    pub fn expand(&self, seed_offset: u64) -> crate::Result<Vec<SweepPoint>> {
        let a = &self.axes;
        let seeds = a.seeds.clone().unwrap_or_else(|| self.base.seeds.clone());
        let partitions: Vec<PartitionMode> = match (&a.shards_per_client, self.base.partition) {
            (None, p) => vec![p],
            (Some(s), PartitionMode::Shard { .. }) => s
                .iter()
                .map(|&shards_per_client| PartitionMode::Shard { shards_per_client })
                .collect(),
            (Some(_), PartitionMode::Dirichlet { .. }) => {
                return Err(FedselError::Config(
                    "shards_per_client axis needs a shard partition in the base config".into(),
                ))
            }
        };
        let policies = a.policies.clone().unwrap_or_else(|| vec![self.base.policy.clone()]);
        for axis in [seeds.is_empty(), partitions.is_empty(), policies.is_empty()] {
            if axis {
                return Err(FedselError::Config("sweep axes must not be empty".into()));
            }
        }
        let mut points = Vec::new();
        for (pi, policy) in policies.iter().enumerate() {
            let queues: Vec<Option<usize>> = match (policy, &a.queue_lengths) {
                (PolicySpec::Pncs { .. }, Some(q)) => q.iter().map(|&l| Some(l)).collect(),
                _ => vec![None],
            };
            for part in &partitions {
                for q in &queues {
                    let mut pol = policy.clone();
                    if let (PolicySpec::Pncs { queue_len, .. }, Some(l)) = (&mut pol, q) {
                        *queue_len = *l;
                    }
                    for &seed in &seeds {
                        let seed = seed.checked_add(seed_offset).ok_or_else(|| {
                            FedselError::Config("seed offset overflows u64".into())
                        })?;
                        let mut config = self.base.clone();
                        config.policy = pol.clone();
                        config.partition = *part;
                        config.seeds = vec![seed];
                        config.validate()?;
                        let name = format!(
                            "p{pi}-{}-q{}-{}-seed{seed}",
                            pol.label(),
                            pol.queue_len(),
                            heterogeneity_label(part).replace(':', "")
                        );
                        points.push(SweepPoint { name, config });
                    }
                }
            }
        }
        Ok(points)
    }
}

pub fn cmd_sweep(args: &RunArgs) -> CliResult<()> {
    use rayon::prelude::*;
    let started = Instant::now();
    let sweep = SweepConfig::from_file(&args.config)?;
    let points = sweep.expand(args.seed_offset)?;
    log::info!("sweep of {} runs", points.len());
    create_dir(&args.out)?;
    let runs_dir = args.out.join("runs");
    let results: Vec<(SweepPoint, ExperimentResult)> = points
        .into_par_iter()
        .map(|p| {
            let t = Instant::now();
            let result = run_experiment(&p.config)?;
            write_run_outputs(&runs_dir.join(&p.name), &p.config, &result, "sweep", t)?;
            Ok((p, result))
        })
        .collect::<CliResult<_>>()?;

    // group seeds of the same (policy, queue, heterogeneity) cell, keeping
    // first-appearance order
    let mut groups: Vec<(ExperimentConfig, Vec<SeedRun>)> = Vec::new();
    for (p, r) in &results {
        let key = |c: &ExperimentConfig| (c.policy.clone(), c.partition);
        match groups.iter_mut().find(|(c, _)| key(c) == key(&p.config)) {
            Some((_, runs)) => runs.extend(r.runs.iter().cloned()),
            None => groups.push((p.config.clone(), r.runs.clone())),
        }
    }
    let mut rows = Vec::new();
    for (cfg, runs) in &groups {
        rows.extend(aggregate_rows(cfg, &aggregate_runs(runs)));
    }
    write_csv(&args.out.join("aggregate.csv"), &AGGREGATE_HEADER, &rows)?;
    let canonical = serde_json::to_value(&sweep).expect("serializable");
    let hash = crate::config::hex_digest(canonical.to_string().as_bytes());
    let mut m = manifest("sweep", canonical, hash, Vec::new(), started);
    m.seeds = results.iter().flat_map(|(p, _)| p.config.seeds.clone()).collect();
    m.artifacts.insert("aggregate".into(), "aggregate.csv".into());
    for (p, _) in &results {
        m.artifacts.insert(format!("run:{}", p.name), format!("runs/{}", p.name));
    }
    write_json(&args.out.join("manifest.json"), &m.finish(started))?;
    println!("{} runs, {} cells written to {}", results.len(), groups.len(), args.out.display());
    Ok(())
}

pub const RELATIVE_LOSS_HEADER: [&str; 6] = ["level", "heterogeneity", "round_bucket", "policy", "conditions", "relative_loss"];

fn write_study_outputs(dir: &Path, cfg: &StudyConfig, data: &StudyDataset, report: &StudyReport, started: Instant) -> CliResult<()> {
    create_dir(dir)?;
    write_json(&dir.join("study_report.json"), report)?;
    let rows: Vec<Vec<String>> = report
        .relative_loss
        .iter()
        .map(|r| {
            vec![
                r.level.to_string(),
                heterogeneity_label(&cfg.heterogeneity[r.level]),
                r.bucket.to_string(),
                r.policy.clone(),
                r.conditions.to_string(),
                r.relative_loss.to_string(),
            ]
        })
        .collect();
    write_csv(&dir.join("relative_loss.csv"), &RELATIVE_LOSS_HEADER, &rows)?;
    let mut header = vec!["round", "level", "seed", "client_a", "client_b", "raw_outcome", "loss", "label"];
    header.extend(FEATURE_NAMES);
    let rows: Vec<Vec<String>> = data
        .samples
        .iter()
        .map(|s| {
            let mut r = vec![
                s.condition.round.to_string(),
                s.condition.level.to_string(),
                s.condition.seed.to_string(),
                s.pair.0.to_string(),
                s.pair.1.to_string(),
                s.raw_outcome.to_string(),
                s.loss.to_string(),
                s.label.to_string(),
            ];
            r.extend(s.features.iter().map(|f| f.to_string()));
            r
        })
        .collect();
    write_csv(&dir.join("pairs.csv"), &header, &rows)?;
    let value = serde_json::to_value(cfg).expect("serializable");
    let hash = crate::config::hex_digest(value.to_string().as_bytes());
    let mut m = manifest("study", value, hash, cfg.seeds.clone(), started);
    for (k, v) in [("report", "study_report.json"), ("relative_loss", "relative_loss.csv"), ("pairs", "pairs.csv")] {
        m.artifacts.insert(k.into(), v.into());
    }
    write_json(&dir.join("manifest.json"), &m.finish(started))
}

pub fn cmd_study(args: &RunArgs) -> CliResult<()> {
    let started = Instant::now();
    let mut cfg = StudyConfig::from_file(&args.config)?;
    for s in &mut cfg.seeds {
        *s = s.checked_add(args.seed_offset).ok_or_else(|| CliError {
            code: EXIT_CONFIG,
            message: "seed offset overflows u64".into(),
        })?;
    }
    cfg.validate()?;
    let (data, report) = run_study(&cfg)?;
    write_study_outputs(&args.out, &cfg, &data, &report, started)?;
    println!("feature ranking: {}", report.ranking.join(" > "));
    if !report.fit.converged {
        println!(
            "warning: logistic fit stopped at gradient norm {:.3e} after {} iterations",
            report.fit.gradient_norm, report.fit.iterations
        );
    }
    Ok(())
}

/// One row of an aggregate CSV, keyed for merging.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRecord {
    pub policy: String,
    pub policy_spec: String,
    pub queue_len: usize,
    pub heterogeneity: String,
    pub round: usize,
    pub test_accuracy_mean: f64,
    pub test_accuracy_std: f64,
}

impl AggregateRecord {
    fn cell(&self) -> (String, usize, String) {
        (self.policy_spec.clone(), self.queue_len, self.heterogeneity.clone())
    }
}

fn parse_aggregate(path: &Path) -> CliResult<Vec<AggregateRecord>> {
    let (header, rows) = read_csv(path)?;
    let col = |name: &str| {
        header.iter().position(|h| h == name).ok_or_else(|| CliError {
            code: EXIT_CONFIG,
            message: format!("{}: missing column '{name}'", path.display()),
        })
    };
    let idx = [
        col("policy")?,
        col("policy_spec")?,
        col("queue_len")?,
        col("heterogeneity")?,
        col("round")?,
        col("test_accuracy_mean")?,
        col("test_accuracy_std")?,
    ];
    rows.iter()
        .enumerate()
        .map(|(i, r)| {
            let bad = |what: &str| CliError {
                code: EXIT_CONFIG,
                message: format!("{}: row {}: invalid {what}", path.display(), i + 1),
            };
            let get = |k: usize| r.get(idx[k]).ok_or_else(|| bad("row length"));
            Ok(AggregateRecord {
                policy: get(0)?.clone(),
                policy_spec: get(1)?.clone(),
                queue_len: get(2)?.parse().map_err(|_| bad("queue_len"))?,
                heterogeneity: get(3)?.clone(),
                round: get(4)?.parse().map_err(|_| bad("round"))?,
                test_accuracy_mean: get(5)?.parse().map_err(|_| bad("test_accuracy_mean"))?,
                test_accuracy_std: get(6)?.parse().map_err(|_| bad("test_accuracy_std"))?,
            })
        })
        .collect()
}

/// Merges aggregate rows; a cell already seen in an earlier input wins.
pub fn merge_aggregates(inputs: &[Vec<AggregateRecord>]) -> Vec<AggregateRecord> {
    let mut seen: Vec<(String, usize, String)> = Vec::new();
    let mut out = Vec::new();
    for rows in inputs {
        let mut cells_here = Vec::new();
        for r in rows {
            let cell = r.cell();
            if seen.contains(&cell) {
                continue;
            }
            if !cells_here.contains(&cell) {
                cells_here.push(cell);
            }
            out.push(r.clone());
        }
        for c in cells_here {
            seen.push(c);
        }
    }
    out
}

pub const ACCURACY_HEADER: [&str; 7] = [
    "policy",
    "policy_spec",
    "queue_len",
    "heterogeneity",
    "round",
    "test_accuracy_mean",
    "test_accuracy_std",
];
pub const TARGET_HEADER: [&str; 6] = ["policy", "policy_spec", "queue_len", "heterogeneity", "target", "rounds_to_target"];

/// Accuracy-at-round and rounds-to-target tables, one row per cell.
pub fn report_tables(rows: &[AggregateRecord], round: Option<usize>, target: f64) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let mut cells: Vec<(String, usize, String)> = Vec::new();
    for r in rows {
        if !cells.contains(&r.cell()) {
            cells.push(r.cell());
        }
    }
    let mut acc = Vec::new();
    let mut tgt = Vec::new();
    for cell in cells {
        let mut mine: Vec<&AggregateRecord> = rows.iter().filter(|r| r.cell() == cell).collect();
        mine.sort_by_key(|r| r.round);
        let head = |r: &AggregateRecord| vec![r.policy.clone(), r.policy_spec.clone(), r.queue_len.to_string(), r.heterogeneity.clone()];
        let at = match round {
            Some(k) => mine.iter().find(|r| r.round == k).copied(),
            None => mine.last().copied(),
        };
        if let Some(r) = at {
            let mut row = head(r);
            row.extend([r.round.to_string(), r.test_accuracy_mean.to_string(), r.test_accuracy_std.to_string()]);
            acc.push(row);
        }
        let hit = mine.iter().find(|r| r.test_accuracy_mean >= target).map(|r| r.round.to_string());
        let mut row = head(mine[0]);
        row.extend([target.to_string(), hit.unwrap_or_default()]);
        tgt.push(row);
    }
    (acc, tgt)
}

fn print_table(header: &[&str], rows: &[Vec<String>]) {
    let skip = 1; // policy_spec is long; the label identifies rows on screen
    let cols: Vec<usize> = (0..header.len()).filter(|&i| i != skip).collect();
    let width = |i: usize| rows.iter().map(|r| r[i].len()).chain([header[i].len()]).max().unwrap_or(0);
    let widths: Vec<usize> = cols.iter().map(|&i| width(i)).collect();
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    println!("{}", line(cols.iter().map(|&i| header[i]).collect()));
    for r in rows {
        println!("{}", line(cols.iter().map(|&i| r[i].as_str()).collect()));
    }
}

pub fn cmd_report(args: &ReportArgs) -> CliResult<()> {
    let mut inputs = Vec::new();
    for p in &args.inputs {
        let file = if p.is_dir() { p.join("aggregate.csv") } else { p.clone() };
        inputs.push(parse_aggregate(&file)?);
    }
    let merged = merge_aggregates(&inputs);
    let (acc, tgt) = report_tables(&merged, args.round, args.target);
    print_table(&ACCURACY_HEADER, &acc);
    println!();
    print_table(&TARGET_HEADER, &tgt);
    if let Some(out) = &args.out {
        create_dir(out)?;
        write_csv(&out.join("accuracy_at_round.csv"), &ACCURACY_HEADER, &acc)?;
        write_csv(&out.join("rounds_to_target.csv"), &TARGET_HEADER, &tgt)?;
    }
    Ok(())
}

/// Entry point for the binary: logging from `FEDSEL_LOG`, then [`run_cli`].
pub fn main_from_env() -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDSEL_LOG", "warn")).try_init();
    run_cli(std::env::args_os())
}
