//! Command-line surface. Every command returns a [`RunReport`]; tables go to
//! CSV files, the report itself is JSON.
//!
//! Options may also come from a JSON file given with `--config`. Top-level
//! keys apply to every command, an object keyed by the command name
//! (`"merge": {...}`) overrides them, and flags on the command line override
//! both. Keys use the long flag names with underscores.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::archive::{load_dataset, load_network, save_dataset, save_network};
use crate::connectivity::{
    build_swap_permutation, default_alphas, interpolation_curve, random_swap_avoiding_clusters,
};
use crate::error::Error;
use crate::ifm::{
    beta_grid_search, profile_from_records, run_ifm, IfmConfig, MergeRecord, PositionSelection,
    Recompute, DEFAULT_BETA_GRID, DEFAULT_RETENTION,
};
use crate::inference::{evaluate, Metrics};
use crate::matching::{distance_matrix, DistanceOptions};
use crate::netcore::{apply_permutation, enumerate_mergeable_positions, position_at, NetworkGraph};
use crate::tensor::Precision;
use crate::toytrain::{make_synthetic_dataset, plant_duplicates, train_mlp, SyntheticKind, TrainConfig, DEFAULT_MAX_WIDTH};

/// Environment variable capping the worker thread count.
pub const THREADS_ENV: &str = "FEATMERGE_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] Error),
    #[error("internal invariant violated: {0}")]
    Invariant(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Invariant(_) => 3,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "featmerge", version, about = "Measure feature complexity by merging equivalent features")]
pub struct Cli {
    /// JSON file with default option values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Write the JSON report here instead of stdout.
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pairwise feature distances at each mergeable position.
    Analyze(AnalyzeArgs),
    /// Merge equivalent features and save the smaller network.
    Merge(MergeArgs),
    /// Merge at every β of a grid and pick the largest one that keeps accuracy.
    Grid(GridArgs),
    /// Remaining feature count per position.
    Complexity(ComplexityArgs),
    /// Accuracy along the line between a network and a permuted copy.
    Interpolate(InterpolateArgs),
    /// Train an MLP on an archived dataset.
    Train(TrainArgs),
    /// Append exact copies of features.
    Plant(PlantArgs),
    /// Generate a synthetic dataset.
    Dataset(DatasetArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Analyze(_) => "analyze",
            Command::Merge(_) => "merge",
            Command::Grid(_) => "grid",
            Command::Complexity(_) => "complexity",
            Command::Interpolate(_) => "interpolate",
            Command::Train(_) => "train",
            Command::Plant(_) => "plant",
            Command::Dataset(_) => "dataset",
        }
    }
}

fn parse_serde<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(Value::String(s.to_owned())).map_err(|e| e.to_string())
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (src, count) = s.split_once(':').ok_or_else(|| format!("`{s}` is not SRC:COUNT"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("`{v}`: {e}"));
    Ok((parse(src)?, parse(count)?))
}

fn is_false(b: &bool) -> bool {
    !b
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeArgs {
    pub model: PathBuf,
    /// Producer layer indices (default: every mergeable position).
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub position: Option<Vec<usize>>,
    /// Directory for the distance CSVs.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Leave biases out of the distance.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub exclude_bias: bool,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeArgs {
    pub model: PathBuf,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// Dataset for accuracy before and after merging.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// Where to save the merged network.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Producer layer indices to merge (default: all).
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_merges: Option<usize>,
    /// `full` or `incremental`.
    #[arg(long, value_parser = parse_serde::<Recompute>)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recompute: Option<Recompute>,
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub exclude_bias: bool,
    /// Also merge inside residual blocks.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub include_residual_interior: bool,
    /// Run the merge this many times and pool the iteration timings.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub repeat: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct GridArgs {
    pub model: PathBuf,
    pub dataset: PathBuf,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub betas: Option<Vec<f64>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub retention: Option<f64>,
    #[arg(long, value_parser = parse_serde::<Recompute>)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub recompute: Option<Recompute>,
    /// CSV file for the grid table.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct ComplexityArgs {
    pub model: PathBuf,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SwapMode {
    /// Cycle the members of each merged cluster.
    Matched,
    /// Move the same number of randomly chosen features, never onto a
    /// member of the same cluster.
    Random,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpolateArgs {
    pub model: PathBuf,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<SwapMode>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alphas: Option<Vec<f64>>,
    /// Tolerance used to find the clusters that are swapped.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub momentum: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight_decay: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub milestones: Option<Vec<usize>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr_decay: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// `f32` or `f64`.
    #[arg(long, value_parser = parse_serde::<Precision>)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub precision: Option<Precision>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct PlantArgs {
    pub model: PathBuf,
    /// Producer layer index.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    /// Comma-separated `SRC:COUNT` items.
    #[arg(long, value_delimiter = ',', value_parser = parse_pair)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pairs: Option<Vec<(usize, usize)>>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_width: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetArgs {
    /// `blobs`, `xor-grid` or `ring`.
    #[arg(long, value_parser = parse_serde::<SyntheticKind>)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<SyntheticKind>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noise: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionRow {
    pub layer: usize,
    pub name: String,
    pub features_before: usize,
    pub features_after: usize,
    pub params_before: usize,
    pub params_after: usize,
}

/// Per-iteration wall time; `std_seconds` is the sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub iterations: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
}

impl Timing {
    pub fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len();
        let mean = if n == 0 { 0.0 } else { samples.iter().sum::<f64>() / n as f64 };
        let var = if n < 2 {
            0.0
        } else {
            samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / (n - 1) as f64
        };
        Timing {
            iterations: n,
            mean_seconds: mean,
            std_seconds: var.sqrt(),
        }
    }
}

impl std::fmt::Display for Timing {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:.3e} ± {:.3e} s per iteration (averaged over {} iterations)",
            self.mean_seconds, self.std_seconds, self.iterations
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    /// Effective options after merging the config file and flags.
    pub config: Value,
    pub positions: Vec<PositionRow>,
    pub metrics: BTreeMap<String, Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<Timing>,
    /// Files written by the command.
    pub outputs: Vec<PathBuf>,
}

impl RunReport {
    fn new(command: &str, config: &impl Serialize) -> Self {
        RunReport {
            command: command.into(),
            config: serde_json::to_value(config).unwrap_or(Value::Null),
            positions: Vec::new(),
            metrics: BTreeMap::new(),
            timing: None,
            outputs: Vec::new(),
        }
    }

    fn metric(&mut self, key: &str, value: impl Serialize) {
        self.metrics
            .insert(key.into(), serde_json::to_value(value).unwrap_or(Value::Null));
    }
}

fn overlay<T: Serialize + DeserializeOwned>(args: &T, config: Option<&Value>, command: &str) -> CliResult<T> {
    let mut merged = Map::new();
    if let Some(Value::Object(top)) = config {
        for (k, v) in top {
            if !v.is_object() {
                merged.insert(k.clone(), v.clone());
            }
        }
        match top.get(command) {
            Some(Value::Object(section)) => merged.extend(section.clone()),
            Some(_) => return Err(CliError::Usage(format!("config key `{command}` must be an object"))),
            None => {}
        }
    }
    match serde_json::to_value(args) {
        Ok(Value::Object(flags)) => merged.extend(flags),
        _ => return Err(CliError::Invariant("arguments did not serialize to an object".into())),
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Usage(format!("config: {e}")))
}

fn required<T>(value: Option<T>, flag: &str) -> CliResult<T> {
    value.ok_or_else(|| CliError::Usage(format!("missing required option --{flag}")))
}

fn write_file(path: &Path, contents: &str, report: &mut RunReport) -> CliResult<()> {
    fs::write(path, contents).map_err(Error::from)?;
    report.outputs.push(path.to_path_buf());
    Ok(())
}

fn layer_params(net: &NetworkGraph, layer: usize) -> usize {
    net.weight(layer).map_or(0, |w| w.numel()) + net.bias(layer).map_or(0, |b| b.numel())
}

fn position_rows(before: &NetworkGraph, after: &NetworkGraph, records: &[MergeRecord]) -> CliResult<Vec<PositionRow>> {
    records
        .iter()
        .map(|r| {
            let layer = r.producer();
            let features_after = after.layer(layer).kind.out_features().unwrap_or(0);
            if features_after != r.final_dim() {
                return Err(CliError::Invariant(format!(
                    "layer {layer} has {features_after} features, record says {}",
                    r.final_dim()
                )));
            }
            Ok(PositionRow {
                layer,
                name: before.layer(layer).name.clone(),
                features_before: r.original_dim(),
                features_after,
                params_before: layer_params(before, layer),
                params_after: layer_params(after, layer),
            })
        })
        .collect()
}

fn check_beta(beta: f64) -> CliResult<f64> {
    if beta > 0.0 && beta < 1.0 {
        Ok(beta)
    } else {
        Err(CliError::Usage(format!("--beta {beta} must lie in (0, 1)")))
    }
}

pub fn cmd_analyze(args: &AnalyzeArgs) -> CliResult<RunReport> {
    let net = load_network(&args.model)?;
    let producers: Vec<usize> = match &args.position {
        Some(p) => p.clone(),
        None => enumerate_mergeable_positions(&net)?.iter().map(|p| p.producer).collect(),
    };
    let out_dir = args.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out_dir).map_err(Error::from)?;
    let opts = DistanceOptions {
        include_bias: !args.exclude_bias,
    };
    let mut report = RunReport::new("analyze", args);
    let mut summaries = Vec::new();
    for producer in producers {
        let position = position_at(&net, producer)?;
        let matrix = distance_matrix(&net, &position, opts)?;
        let path = out_dir.join(format!("distances_layer{producer}.csv"));
        write_file(&path, &matrix.to_csv(), &mut report)?;
        let stats = matrix.stats();
        let argmin = matrix.argmin().map(|(m, n, _)| [m, n]);
        summaries.push(json!({
            "layer": producer,
            "name": net.layer(producer).name,
            "dim": position.dim,
            "min": stats.map(|s| s.min),
            "max": stats.map(|s| s.max),
            "mean": stats.map(|s| s.mean),
            "closest_pair": argmin,
        }));
        let params = layer_params(&net, producer);
        report.positions.push(PositionRow {
            layer: producer,
            name: net.layer(producer).name.clone(),
            features_before: position.dim,
            features_after: position.dim,
            params_before: params,
            params_after: params,
        });
    }
    report.metric("distances", summaries);
    Ok(report)
}

fn ifm_config_from(args: &MergeArgs, beta: f64) -> IfmConfig {
    let mut config = IfmConfig::new(beta);
    if let Some(p) = &args.positions {
        config.positions = PositionSelection::Layers(p.clone());
    }
    config.max_merges = args.max_merges;
    config.bias_in_distance = !args.exclude_bias;
    config.recompute = args.recompute.unwrap_or_default();
    config.include_residual_interior = args.include_residual_interior;
    config
}

pub fn cmd_merge(args: &MergeArgs) -> CliResult<RunReport> {
    let beta = check_beta(required(args.beta, "beta")?)?;
    let repeat = args.repeat.unwrap_or(1);
    if repeat == 0 {
        return Err(CliError::Usage("--repeat must be at least 1".into()));
    }
    let net = load_network(&args.model)?;
    let dataset = args.dataset.as_ref().map(load_dataset).transpose()?;
    let config = ifm_config_from(args, beta);

    let started = Instant::now();
    let mut run = run_ifm(&net, &config)?;
    let mut samples = std::mem::take(&mut run.iteration_seconds);
    for _ in 1..repeat {
        let again = run_ifm(&net, &config)?;
        if again.network != run.network {
            return Err(CliError::Invariant("repeated merges disagree".into()));
        }
        samples.extend(again.iteration_seconds);
    }
    let wall = started.elapsed().as_secs_f64();

    let mut report = RunReport::new("merge", args);
    report.positions = position_rows(&net, &run.network, &run.records)?;
    report.metric("beta", beta);
    report.metric("params_before", net.param_count());
    report.metric("params_after", run.network.param_count());
    report.metric(
        "param_percentage",
        100.0 * run.network.param_count() as f64 / net.param_count() as f64,
    );
    report.metric("merges", run.records.iter().map(MergeRecord::merges).sum::<usize>());
    report.metric("wall_seconds", wall);
    if let Some(data) = &dataset {
        let before = evaluate(&net, data)?;
        let after = evaluate(&run.network, data)?;
        report.metric("accuracy_before", before.accuracy);
        report.metric("accuracy_after", after.accuracy);
        report.metric("loss_before", before.loss);
        report.metric("loss_after", after.loss);
    }
    report.timing = Some(Timing::from_samples(&samples));
    if let Some(out) = &args.out {
        save_network(&run.network, out)?;
        report.outputs.push(out.clone());
    }
    Ok(report)
}

pub fn cmd_grid(args: &GridArgs) -> CliResult<RunReport> {
    let betas = args.betas.clone().unwrap_or_else(|| DEFAULT_BETA_GRID.to_vec());
    for &b in &betas {
        check_beta(b)?;
    }
    let retention = args.retention.unwrap_or(DEFAULT_RETENTION);
    if !(0.0..=1.0).contains(&retention) {
        return Err(CliError::Usage(format!("--retention {retention} must lie in [0, 1]")));
    }
    let net = load_network(&args.model)?;
    let dataset = load_dataset(&args.dataset)?;
    let base = IfmConfig::new(betas[0]).with_recompute(args.recompute.unwrap_or_default());
    let search = beta_grid_search(&net, &betas, &dataset, retention, &base)?;

    let mut report = RunReport::new("grid", args);
    report.metric("baseline_accuracy", search.baseline.accuracy);
    report.metric("baseline_loss", search.baseline.loss);
    report.metric("baseline_params", search.baseline_params);
    report.metric("best_beta", search.best_beta);
    report.metric("rows", &search.rows);
    if let Some(out) = &args.out {
        write_file(out, &search.to_csv(), &mut report)?;
    }
    Ok(report)
}

pub fn cmd_complexity(args: &ComplexityArgs) -> CliResult<RunReport> {
    let beta = check_beta(required(args.beta, "beta")?)?;
    let net = load_network(&args.model)?;
    let run = run_ifm(&net, &IfmConfig::new(beta))?;
    let profile = profile_from_records(&net, beta, &run.records);
    let mut report = RunReport::new("complexity", args);
    report.positions = position_rows(&net, &run.network, &run.records)?;
    report.metric("beta", beta);
    if let Some(out) = &args.out {
        write_file(out, &profile.to_csv(), &mut report)?;
    }
    Ok(report)
}

pub fn cmd_interpolate(args: &InterpolateArgs) -> CliResult<RunReport> {
    let mode = required(args.mode, "mode")?;
    let dataset = load_dataset(required(args.dataset.as_ref(), "dataset")?)?;
    let alphas = args.alphas.clone().unwrap_or_else(default_alphas);
    let beta = check_beta(args.beta.unwrap_or(0.01))?;
    let net = load_network(&args.model)?;
    let (_, records) = crate::ifm::ifm(&net, &IfmConfig::new(beta))?;

    let mut report = RunReport::new("interpolate", args);
    let perm = match mode {
        SwapMode::Matched => build_swap_permutation(&records)?,
        SwapMode::Random => {
            let seed = args.seed.unwrap_or(0);
            report.metric("seed", seed);
            random_swap_avoiding_clusters(&records, seed)?
        }
    };
    let curve = interpolation_curve(&net, &perm, &dataset, &alphas)?;

    let endpoints = [(0.0, apply_permutation(&net, &perm)?), (1.0, net.clone())];
    for (alpha, endpoint) in &endpoints {
        if let Some(i) = curve.alphas.iter().position(|a| a == alpha) {
            let direct: Metrics = evaluate(endpoint, &dataset)?;
            if curve.metrics[i] != direct {
                return Err(CliError::Invariant(format!(
                    "curve at alpha {alpha} differs from direct evaluation"
                )));
            }
        }
    }

    report.metric("moved", perm.moved());
    report.metric("max_accuracy_drop", curve.max_accuracy_drop());
    report.metric("curve", &curve);
    if let Some(out) = &args.out {
        write_file(out, &curve.to_csv(), &mut report)?;
    }
    Ok(report)
}

pub fn cmd_train(args: &TrainArgs) -> CliResult<RunReport> {
    let dataset = load_dataset(required(args.dataset.as_ref(), "dataset")?)?;
    let out = required(args.out.as_ref(), "out")?;
    let d = TrainConfig::default();
    let config = TrainConfig {
        hidden: args.hidden.clone().unwrap_or(d.hidden),
        epochs: args.epochs.unwrap_or(d.epochs),
        batch_size: args.batch_size.unwrap_or(d.batch_size),
        learning_rate: args.learning_rate.unwrap_or(d.learning_rate),
        momentum: args.momentum.unwrap_or(d.momentum),
        weight_decay: args.weight_decay.unwrap_or(d.weight_decay),
        milestones: args.milestones.clone().unwrap_or(d.milestones),
        lr_decay: args.lr_decay.unwrap_or(d.lr_decay),
        seed: args.seed.unwrap_or(d.seed),
        precision: args.precision.unwrap_or(d.precision),
    };
    let net = train_mlp(&config, &dataset)?;
    let metrics = evaluate(&net, &dataset)?;
    save_network(&net, out)?;
    let mut report = RunReport::new("train", &config);
    report.metric("train_accuracy", metrics.accuracy);
    report.metric("train_loss", metrics.loss);
    report.metric("params", net.param_count());
    report.outputs.push(out.clone());
    Ok(report)
}

pub fn cmd_plant(args: &PlantArgs) -> CliResult<RunReport> {
    let layer = required(args.layer, "layer")?;
    let pairs = required(args.pairs.as_ref(), "pairs")?;
    let out = required(args.out.as_ref(), "out")?;
    let net = load_network(&args.model)?;
    let planted = plant_duplicates(&net, layer, pairs, args.max_width.unwrap_or(DEFAULT_MAX_WIDTH))?;
    save_network(&planted, out)?;
    let mut report = RunReport::new("plant", args);
    report.positions.push(PositionRow {
        layer,
        name: net.layer(layer).name.clone(),
        features_before: net.layer(layer).kind.out_features().unwrap_or(0),
        features_after: planted.layer(layer).kind.out_features().unwrap_or(0),
        params_before: layer_params(&net, layer),
        params_after: layer_params(&planted, layer),
    });
    report.metric("params_before", net.param_count());
    report.metric("params_after", planted.param_count());
    report.outputs.push(out.clone());
    Ok(report)
}

pub fn cmd_dataset(args: &DatasetArgs) -> CliResult<RunReport> {
    let kind = required(args.kind, "kind")?;
    let out = required(args.out.as_ref(), "out")?;
    let n = args.n.unwrap_or(1000);
    let noise = args.noise.unwrap_or(0.0);
    let seed = args.seed.unwrap_or(0);
    let dataset = make_synthetic_dataset(kind, n, noise, seed)?;
    save_dataset(&dataset, out)?;
    let mut report = RunReport::new("dataset", args);
    report.metric("samples", dataset.len());
    report.metric("num_classes", dataset.num_classes());
    report.outputs.push(out.clone());
    Ok(report)
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV}=`{raw}` is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Invariant(e.to_string()))
}

/// Dispatch a parsed command line.
pub fn execute(cli: &Cli) -> CliResult<RunReport> {
    let config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(Error::from)?;
            Some(serde_json::from_str::<Value>(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?)
        }
        None => None,
    };
    let config = config.as_ref();
    let name = cli.command.name();
    let mut report = match &cli.command {
        Command::Analyze(a) => cmd_analyze(&overlay(a, config, name)?),
        Command::Merge(a) => cmd_merge(&overlay(a, config, name)?),
        Command::Grid(a) => cmd_grid(&overlay(a, config, name)?),
        Command::Complexity(a) => cmd_complexity(&overlay(a, config, name)?),
        Command::Interpolate(a) => cmd_interpolate(&overlay(a, config, name)?),
        Command::Train(a) => cmd_train(&overlay(a, config, name)?),
        Command::Plant(a) => cmd_plant(&overlay(a, config, name)?),
        Command::Dataset(a) => cmd_dataset(&overlay(a, config, name)?),
    }?;
    if let Some(path) = &cli.report {
        let text = serde_json::to_string_pretty(&report).map_err(|e| CliError::Invariant(e.to_string()))?;
        fs::write(path, text).map_err(Error::from)?;
        report.outputs.push(path.clone());
    }
    Ok(report)
}

/// Parse `args`, run the command and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let outcome = configure_threads().and_then(|()| {
        std::panic::catch_unwind(|| execute(&cli))
            .unwrap_or_else(|_| Err(CliError::Invariant("panic during execution".into())))
    });
    match outcome {
        Ok(report) => {
            if let Some(timing) = &report.timing {
                eprintln!("{timing}");
            }
            if cli.report.is_none() {
                let text = match serde_json::to_string_pretty(&report) {
                    Ok(text) => text,
                    Err(e) => {
                        eprintln!("error: {e}");
                        return 3;
                    }
                };
                // a closed stdout (e.g. piped into `head`) is not a failure
                let _ = writeln!(std::io::stdout().lock(), "{text}");
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
