//! Iterative feature merging.
//!
//! At each selected position the closest pair of features (by weight
//! distance) is merged repeatedly: producer rows and biases are summed,
//! consumer columns are averaged weighted by how many original features each
//! side already represents. Merging stops once the smallest pairwise distance
//! exceeds `beta` times the largest one.

use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{evaluate, LabeledDataset, Metrics};
use crate::matching::{DistanceMatrix, DistanceOptions, FeatureVectors};
use crate::netcore::{
    check_position, enumerate_positions_with, position_at, remap_consumer, resize_consumer,
    resize_producer, MergeablePosition, NetworkGraph, PositionOptions,
};
use crate::tensor::Tensor;

/// The β values searched by default.
pub const DEFAULT_BETA_GRID: [f64; 10] = [0.01, 0.03, 0.05, 0.07, 0.1, 0.12, 0.14, 0.15, 0.18, 0.2];

/// Default accuracy retention for [`beta_grid_search`].
pub const DEFAULT_RETENTION: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PositionSelection {
    #[default]
    All,
    /// Producer layer indices.
    Layers(Vec<usize>),
}

/// How the distance matrix is refreshed after each merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Recompute {
    /// Recompute every pair.
    #[default]
    Full,
    /// Drop the absorbed feature and recompute only the merged one's distances.
    Incremental,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IfmConfig {
    pub beta: f64,
    #[serde(default)]
    pub positions: PositionSelection,
    #[serde(default)]
    pub max_merges: Option<usize>,
    #[serde(default = "default_true")]
    pub bias_in_distance: bool,
    #[serde(default)]
    pub recompute: Recompute,
    #[serde(default)]
    pub include_residual_interior: bool,
}

fn default_true() -> bool {
    true
}

impl IfmConfig {
    pub fn new(beta: f64) -> Self {
        IfmConfig {
            beta,
            positions: PositionSelection::All,
            max_merges: None,
            bias_in_distance: true,
            recompute: Recompute::Full,
            include_residual_interior: false,
        }
    }

    pub fn with_recompute(mut self, recompute: Recompute) -> Self {
        self.recompute = recompute;
        self
    }

    pub fn with_positions(mut self, positions: PositionSelection) -> Self {
        self.positions = positions;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::Validation(format!("beta {} outside (0, 1)", self.beta)));
        }
        Ok(())
    }

    fn distance_options(&self) -> DistanceOptions {
        DistanceOptions {
            include_bias: self.bias_in_distance,
        }
    }

    fn position_options(&self) -> PositionOptions {
        PositionOptions {
            include_residual_interior: self.include_residual_interior,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeStep {
    pub m: usize,
    pub n: usize,
    pub distance: f64,
}

/// Outcome of merging at one position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeRecord {
    /// The position before merging.
    pub position: MergeablePosition,
    /// Original feature indices represented by each remaining feature.
    pub clusters: Vec<Vec<usize>>,
    pub counts: Vec<usize>,
    /// Merges in order, with indices as they were at the time of the merge.
    pub merge_log: Vec<MergeStep>,
}

impl MergeRecord {
    fn singletons(position: &MergeablePosition) -> Self {
        MergeRecord {
            position: position.clone(),
            clusters: (0..position.dim).map(|i| vec![i]).collect(),
            counts: vec![1; position.dim],
            merge_log: Vec::new(),
        }
    }

    pub fn producer(&self) -> usize {
        self.position.producer
    }

    pub fn original_dim(&self) -> usize {
        self.position.dim
    }

    pub fn final_dim(&self) -> usize {
        self.clusters.len()
    }

    pub fn merges(&self) -> usize {
        self.merge_log.len()
    }

    /// Clusters with at least two members.
    pub fn merged_clusters(&self) -> impl Iterator<Item = &[usize]> {
        self.clusters.iter().filter(|c| c.len() > 1).map(Vec::as_slice)
    }

    fn absorb(&mut self, keep: usize, removed: usize, distance: f64) {
        let absorbed = self.clusters.remove(removed);
        self.clusters[keep].extend(absorbed);
        self.clusters[keep].sort_unstable();
        let count = self.counts.remove(removed);
        self.counts[keep] += count;
        self.merge_log.push(MergeStep {
            m: keep,
            n: removed,
            distance,
        });
    }
}

/// Merge features `m` and `n` at `position`. The merged feature takes index
/// `min(m, n)`; higher indices shift down by one. Returns the new network and
/// the updated per-feature counts.
pub fn merge_pair(
    net: &NetworkGraph,
    position: &MergeablePosition,
    m: usize,
    n: usize,
    counts: &[usize],
) -> Result<(NetworkGraph, Vec<usize>)> {
    check_position(net, position)?;
    let dim = position.dim;
    if m == n || m >= dim || n >= dim {
        return Err(Error::Dimension(format!(
            "cannot merge features {m} and {n} of {dim}"
        )));
    }
    if counts.len() != dim || counts.contains(&0) {
        return Err(Error::Validation(format!(
            "counts {counts:?} invalid for {dim} features"
        )));
    }
    let merged = merge_unchecked(net, position, m, n, counts)?;
    let (lo, hi) = (m.min(n), m.max(n));
    let mut counts = counts.to_vec();
    counts[lo] += counts[hi];
    counts.remove(hi);
    Ok((merged, counts))
}

fn merge_unchecked(
    net: &NetworkGraph,
    position: &MergeablePosition,
    m: usize,
    n: usize,
    counts: &[usize],
) -> Result<NetworkGraph> {
    let dim = position.dim;
    let new_dim = dim - 1;
    let (lo, hi) = (m.min(n), m.max(n));
    let old_index = |f: usize| if f < hi { f } else { f + 1 };

    let mut layers = net.layers().to_vec();
    let mut weights = net.weights().clone();

    let spec = &net.layers()[position.producer];
    let w = net.weight(position.producer).expect("producer weight");
    let row_len = w.row_len();
    let mut data = Vec::with_capacity(new_dim * row_len);
    for f in 0..new_dim {
        if f == lo {
            data.extend(w.row(m).iter().zip(w.row(n)).map(|(a, b)| a + b));
        } else {
            data.extend_from_slice(w.row(old_index(f)));
        }
    }
    let mut shape = w.shape().to_vec();
    shape[0] = new_dim;
    weights.insert(spec.weight_key(), Tensor::new(shape, data)?);
    if let Some(b) = net.bias(position.producer) {
        let b = b.data();
        let data = (0..new_dim)
            .map(|f| if f == lo { b[m] + b[n] } else { b[old_index(f)] })
            .collect();
        weights.insert(spec.bias_key(), Tensor::new(vec![new_dim], data)?);
    }
    layers[position.producer].kind = resize_producer(&spec.kind, new_dim);

    let (count_m, count_n) = (counts[m] as f64, counts[n] as f64);
    for consumer in &position.consumers {
        let cw = net.weight(consumer.layer).expect("consumer weight");
        let inner = cw.numel() / (cw.dim0() * dim);
        let merged = remap_consumer(cw, dim, new_dim, |row, f, dst| {
            if f == lo {
                let (a, b) = (&row[m * inner..(m + 1) * inner], &row[n * inner..(n + 1) * inner]);
                for (k, d) in dst.iter_mut().enumerate() {
                    *d = (count_m * a[k] + count_n * b[k]) / (count_m + count_n);
                }
            } else {
                let j = old_index(f);
                dst.copy_from_slice(&row[j * inner..(j + 1) * inner]);
            }
        });
        let cspec = &net.layers()[consumer.layer];
        weights.insert(cspec.weight_key(), merged);
        layers[consumer.layer].kind = resize_consumer(&cspec.kind, consumer.block, new_dim);
    }
    net.rebuild(layers, weights)
}

/// Merge greedily at one position. A position with a single feature is
/// returned unchanged with an empty record.
pub fn ifm_position(
    net: &NetworkGraph,
    position: &MergeablePosition,
    config: &IfmConfig,
) -> Result<(NetworkGraph, MergeRecord)> {
    config.validate()?;
    run_position(net, position, config, &mut Vec::new())
}

fn run_position(
    net: &NetworkGraph,
    position: &MergeablePosition,
    config: &IfmConfig,
    timings: &mut Vec<f64>,
) -> Result<(NetworkGraph, MergeRecord)> {
    check_position(net, position)?;
    let options = config.distance_options();
    let mut record = MergeRecord::singletons(position);
    let mut net = net.clone();
    let mut pos = position.clone();
    let mut matrix: Option<DistanceMatrix> = None;

    while pos.dim > 1 {
        if config.max_merges.is_some_and(|cap| record.merges() >= cap) {
            break;
        }
        let start = Instant::now();
        let dm = match (config.recompute, matrix.take()) {
            (Recompute::Incremental, Some(dm)) => dm,
            _ => DistanceMatrix::from_vectors(pos.clone(), &FeatureVectors::extract(&net, &pos, options)),
        };
        let (m, n, min) = dm.argmin().expect("at least two features");
        let max = dm.max_off_diagonal().expect("at least two features");
        if min > config.beta * max {
            timings.push(start.elapsed().as_secs_f64());
            break;
        }
        net = merge_unchecked(&net, &pos, m, n, &record.counts)?;
        record.absorb(m, n, min);
        pos.dim -= 1;
        if config.recompute == Recompute::Incremental {
            let mut dm = dm;
            let fv = FeatureVectors::extract(&net, &pos, options);
            dm.update_after_merge(pos.clone(), &fv, m, n);
            matrix = Some(dm);
        }
        timings.push(start.elapsed().as_secs_f64());
    }
    Ok((net, record))
}

/// Result of a full merging run.
#[derive(Debug, Clone)]
pub struct IfmRun {
    pub network: NetworkGraph,
    pub records: Vec<MergeRecord>,
    /// Wall time of every iteration (distance refresh, stopping check and
    /// merge), across all positions.
    pub iteration_seconds: Vec<f64>,
}

/// Merge at every selected position in ascending layer order; each position
/// sees the adjustments made by earlier ones.
pub fn ifm(net: &NetworkGraph, config: &IfmConfig) -> Result<(NetworkGraph, Vec<MergeRecord>)> {
    let run = run_ifm(net, config)?;
    Ok((run.network, run.records))
}

pub fn run_ifm(net: &NetworkGraph, config: &IfmConfig) -> Result<IfmRun> {
    config.validate()?;
    let available: Vec<usize> = enumerate_positions_with(net, config.position_options())?
        .into_iter()
        .map(|p| p.producer)
        .collect();
    let producers = match &config.positions {
        PositionSelection::All => available,
        PositionSelection::Layers(layers) => {
            let mut chosen = layers.clone();
            chosen.sort_unstable();
            chosen.dedup();
            if let Some(bad) = chosen.iter().find(|l| !available.contains(l)) {
                return Err(Error::Structural(format!(
                    "layer {bad} is not a mergeable position"
                )));
            }
            chosen
        }
    };

    let mut current = net.clone();
    let mut records = Vec::with_capacity(producers.len());
    let mut timings = Vec::new();
    for producer in producers {
        let position = position_at(&current, producer)?;
        let (next, record) = run_position(&current, &position, config, &mut timings)?;
        current = next;
        records.push(record);
    }
    Ok(IfmRun {
        network: current,
        records,
        iteration_seconds: timings,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityEntry {
    pub layer: usize,
    pub name: String,
    pub original: usize,
    pub remaining: usize,
}

/// Remaining feature count per position after merging at tolerance `beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityProfile {
    pub beta: f64,
    pub entries: Vec<ComplexityEntry>,
}

impl ComplexityProfile {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,name,original,remaining\n");
        for e in &self.entries {
            let _ = writeln!(out, "{},{},{},{}", e.layer, e.name, e.original, e.remaining);
        }
        out
    }
}

pub fn complexity_profile(net: &NetworkGraph, config: &IfmConfig) -> Result<ComplexityProfile> {
    let (_, records) = ifm(net, config)?;
    Ok(profile_from_records(net, config.beta, &records))
}

pub fn profile_from_records(net: &NetworkGraph, beta: f64, records: &[MergeRecord]) -> ComplexityProfile {
    ComplexityProfile {
        beta,
        entries: records
            .iter()
            .map(|r| ComplexityEntry {
                layer: r.producer(),
                name: net.layer(r.producer()).name.clone(),
                original: r.original_dim(),
                remaining: r.final_dim(),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub beta: f64,
    pub params: usize,
    pub param_fraction: f64,
    pub accuracy: f64,
    pub loss: f64,
    pub merges: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSearch {
    pub baseline: Metrics,
    pub baseline_params: usize,
    pub retention: f64,
    pub rows: Vec<GridRow>,
    /// Largest β whose accuracy is at least `retention` times the baseline.
    pub best_beta: Option<f64>,
}

impl GridSearch {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("beta,params,param_fraction,accuracy,loss,merges\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.beta, r.params, r.param_fraction, r.accuracy, r.loss, r.merges
            );
        }
        out
    }

    pub fn best_row(&self) -> Option<&GridRow> {
        let beta = self.best_beta?;
        self.rows.iter().find(|r| r.beta == beta)
    }
}

/// Run merging at every β of `betas` (evaluated concurrently) and pick the
/// largest β that keeps `retention` of the unmerged accuracy. Settings other
/// than β come from `base`.
pub fn beta_grid_search(
    net: &NetworkGraph,
    betas: &[f64],
    dataset: &LabeledDataset,
    retention: f64,
    base: &IfmConfig,
) -> Result<GridSearch> {
    if betas.is_empty() {
        return Err(Error::Validation("beta grid is empty".into()));
    }
    let baseline = evaluate(net, dataset)?;
    let baseline_params = net.param_count();
    let rows: Vec<GridRow> = betas
        .par_iter()
        .map(|&beta| {
            let config = IfmConfig { beta, ..base.clone() };
            let (merged, records) = ifm(net, &config)?;
            let metrics = evaluate(&merged, dataset)?;
            Ok(GridRow {
                beta,
                params: merged.param_count(),
                param_fraction: merged.param_count() as f64 / baseline_params as f64,
                accuracy: metrics.accuracy,
                loss: metrics.loss,
                merges: records.iter().map(MergeRecord::merges).sum(),
            })
        })
        .collect::<Result<_>>()?;
    let threshold = retention * baseline.accuracy;
    let best_beta = rows
        .iter()
        .filter(|r| r.accuracy >= threshold)
        .map(|r| r.beta)
        .reduce(f64::max);
    Ok(GridSearch {
        baseline,
        baseline_params,
        retention,
        rows,
        best_beta,
    })
}
