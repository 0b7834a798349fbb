//! Equivalence checks: swap permutations over merged clusters, interpolation
//! curves between a network and its permuted copy, and numeric linear mode
//! connectivity (loss barrier) and layerwise feature connectivity residuals.

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ifm::MergeRecord;
use crate::inference::{evaluate, layer_features, LabeledDataset, Metrics};
use crate::netcore::{apply_permutation, interpolate_params, NetworkGraph, Permutation};

/// `0, 0.1, ..., 1`.
pub fn default_alphas() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpolationCurve {
    pub alphas: Vec<f64>,
    pub metrics: Vec<Metrics>,
}

impl InterpolationCurve {
    /// Largest accuracy shortfall relative to the best endpoint.
    pub fn max_accuracy_drop(&self) -> f64 {
        let (Some(first), Some(last)) = (self.metrics.first(), self.metrics.last()) else {
            return 0.0;
        };
        let reference = first.accuracy.max(last.accuracy);
        self.metrics
            .iter()
            .map(|m| reference - m.accuracy)
            .fold(0.0, f64::max)
    }

    pub fn accuracy_at(&self, alpha: f64) -> Option<f64> {
        self.alphas
            .iter()
            .position(|&a| a == alpha)
            .map(|i| self.metrics[i].accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha,accuracy,loss\n");
        for (a, m) in self.alphas.iter().zip(&self.metrics) {
            out.push_str(&format!("{a},{},{}\n", m.accuracy, m.loss));
        }
        out
    }
}

fn check_records(records: &[MergeRecord]) -> Result<()> {
    let mut producers = BTreeSet::new();
    for record in records {
        if !producers.insert(record.producer()) {
            return Err(Error::Validation(format!(
                "two records for the position after layer {}",
                record.producer()
            )));
        }
        let mut seen = vec![false; record.original_dim()];
        for &i in record.clusters.iter().flatten() {
            if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Validation(format!(
                    "clusters at layer {} do not partition {} features",
                    record.producer(),
                    record.original_dim()
                )));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Validation(format!(
                "clusters at layer {} do not cover all {} features",
                record.producer(),
                record.original_dim()
            )));
        }
    }
    Ok(())
}

/// Cyclically shift the members of every merged cluster, relative to the
/// network the records were computed on. Feature `c[k]` of the permuted
/// network is feature `c[k + 1]` of the original, for each cluster `c` in
/// ascending order. Positions without merges are left out.
pub fn build_swap_permutation(records: &[MergeRecord]) -> Result<Permutation> {
    check_records(records)?;
    let mut perm = Permutation::identity();
    for record in records {
        if record.merges() == 0 {
            continue;
        }
        let mut map: Vec<usize> = (0..record.original_dim()).collect();
        for cluster in record.merged_clusters() {
            let mut members = cluster.to_vec();
            members.sort_unstable();
            for (k, &i) in members.iter().enumerate() {
                map[i] = members[(k + 1) % members.len()];
            }
        }
        perm.insert(record.producer(), map)?;
    }
    Ok(perm)
}

/// At every position, move as many indices as [`build_swap_permutation`]
/// does, choosing them uniformly at random and cycling them in a random
/// order so that each one moves.
pub fn random_swap_permutation(records: &[MergeRecord], seed: u64) -> Result<Permutation> {
    check_records(records)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm = Permutation::identity();
    for record in records {
        let count: usize = record.merged_clusters().map(<[usize]>::len).sum();
        if count == 0 {
            continue;
        }
        let dim = record.original_dim();
        let mut chosen = index::sample(&mut rng, dim, count).into_vec();
        chosen.shuffle(&mut rng);
        let mut map: Vec<usize> = (0..dim).collect();
        for (k, &i) in chosen.iter().enumerate() {
            map[i] = chosen[(k + 1) % count];
        }
        perm.insert(record.producer(), map)?;
    }
    Ok(perm)
}

/// Like [`random_swap_permutation`], but at each position the draw is
/// repeated (from the same seeded stream) until no feature is sent to another
/// member of its own cluster.
pub fn random_swap_avoiding_clusters(records: &[MergeRecord], seed: u64) -> Result<Permutation> {
    const ATTEMPTS: usize = 100_000;
    check_records(records)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut perm = Permutation::identity();
    for record in records {
        let count: usize = record.merged_clusters().map(<[usize]>::len).sum();
        if count == 0 {
            continue;
        }
        let dim = record.original_dim();
        let owner = cluster_owner(record);
        let map = (0..ATTEMPTS)
            .map(|_| {
                let mut chosen = index::sample(&mut rng, dim, count).into_vec();
                chosen.shuffle(&mut rng);
                let mut map: Vec<usize> = (0..dim).collect();
                for (k, &i) in chosen.iter().enumerate() {
                    map[i] = chosen[(k + 1) % count];
                }
                map
            })
            .find(|map| map.iter().enumerate().all(|(i, &j)| i == j || owner[i] != owner[j]))
            .ok_or_else(|| {
                Error::Validation(format!(
                    "no swap at layer {} avoids its clusters after {ATTEMPTS} draws",
                    record.producer()
                ))
            })?;
        perm.insert(record.producer(), map)?;
    }
    Ok(perm)
}

fn cluster_owner(record: &MergeRecord) -> Vec<usize> {
    let mut owner = vec![usize::MAX; record.original_dim()];
    for (c, cluster) in record.clusters.iter().enumerate() {
        for &i in cluster {
            owner[i] = c;
        }
    }
    owner
}

/// Whether `perm` sends some feature to another member of its own cluster.
/// A random swap for which this is false never exchanges equivalent features.
pub fn swaps_within_clusters(perm: &Permutation, records: &[MergeRecord]) -> bool {
    records.iter().any(|record| {
        let Some(map) = perm.get(record.producer()) else {
            return false;
        };
        let owner = cluster_owner(record);
        map.iter()
            .enumerate()
            .any(|(i, &j)| i != j && owner.get(i) == owner.get(j))
    })
}

fn check_alphas(alphas: &[f64]) -> Result<()> {
    if alphas.is_empty() {
        return Err(Error::Validation("no interpolation points".into()));
    }
    if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Validation(format!("alpha {a} outside [0, 1]")));
    }
    if alphas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Validation("alphas must be strictly increasing".into()));
    }
    Ok(())
}

/// Metrics of `alpha * net_a + (1 - alpha) * net_b` for each `alpha`.
pub fn interpolate_metrics(
    net_a: &NetworkGraph,
    net_b: &NetworkGraph,
    dataset: &LabeledDataset,
    alphas: &[f64],
) -> Result<InterpolationCurve> {
    check_alphas(alphas)?;
    if dataset.is_empty() {
        return Err(Error::Validation("cannot interpolate on an empty dataset".into()));
    }
    let metrics = alphas
        .par_iter()
        .map(|&alpha| evaluate(&interpolate_params(net_a, net_b, alpha)?, dataset))
        .collect::<Result<Vec<_>>>()?;
    Ok(InterpolationCurve {
        alphas: alphas.to_vec(),
        metrics,
    })
}

/// Accuracy and loss along the segment between `net` (at `alpha = 1`) and
/// its permuted copy (at `alpha = 0`).
pub fn interpolation_curve(
    net: &NetworkGraph,
    perm: &Permutation,
    dataset: &LabeledDataset,
    alphas: &[f64],
) -> Result<InterpolationCurve> {
    let permuted = apply_permutation(net, perm)?;
    interpolate_metrics(net, &permuted, dataset, alphas)
}

/// Largest excess of the interpolated loss over the worse endpoint.
pub fn lmc_barrier(
    net_a: &NetworkGraph,
    net_b: &NetworkGraph,
    dataset: &LabeledDataset,
    alphas: &[f64],
) -> Result<f64> {
    let curve = interpolate_metrics(net_a, net_b, dataset, alphas)?;
    let endpoint = evaluate(net_a, dataset)?.loss.max(evaluate(net_b, dataset)?.loss);
    Ok(curve
        .metrics
        .iter()
        .map(|m| m.loss - endpoint)
        .fold(f64::NEG_INFINITY, f64::max))
}

/// Largest relative gap, over samples and `alphas`, between the output of
/// layer `layer` of the interpolated network and the interpolation of the
/// two networks' outputs at that layer (per-sample Euclidean norms).
pub fn llfc_residual(
    net_a: &NetworkGraph,
    net_b: &NetworkGraph,
    dataset: &LabeledDataset,
    layer: usize,
    alphas: &[f64],
) -> Result<f64> {
    check_alphas(alphas)?;
    if !net_a.same_structure(net_b) {
        return Err(Error::Structural("networks differ in architecture".into()));
    }
    let inputs = dataset.inputs();
    let za = layer_features(net_a, inputs, layer)?.values;
    let zb = layer_features(net_b, inputs, layer)?.values;
    let residuals = alphas
        .par_iter()
        .map(|&alpha| {
            let mixed = interpolate_params(net_a, net_b, alpha)?;
            let z = layer_features(&mixed, inputs, layer)?.values;
            let worst = (0..z.dim0())
                .map(|i| {
                    let (mut diff, mut norm) = (0.0, 0.0);
                    for ((&zi, &ai), &bi) in z.row(i).iter().zip(za.row(i)).zip(zb.row(i)) {
                        let target = alpha * ai + (1.0 - alpha) * bi;
                        diff += (zi - target) * (zi - target);
                        norm += target * target;
                    }
                    diff.sqrt() / (norm.sqrt() + 1e-12)
                })
                .fold(0.0, f64::max);
            Ok(worst)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(residuals.into_iter().fold(0.0, f64::max))
}
