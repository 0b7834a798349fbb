//! Pairwise feature weight distances.
//!
//! The distance between features `m` and `n` at a position is
//! `|row_m - row_n|^2 + |col_m - col_n|^2`, where `row` is the producer's
//! weight row (plus bias, by default) and `col` the concatenated consumer
//! column blocks. Each squared norm is accumulated left to right in `f64`,
//! then the two are added.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{check_position, consumer_inner, MergeablePosition, NetworkGraph};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DistanceOptions {
    /// Append the producer bias to each feature's row vector.
    pub include_bias: bool,
}

impl Default for DistanceOptions {
    fn default() -> Self {
        DistanceOptions { include_bias: true }
    }
}

/// Row and column vectors of every feature at one position, packed densely.
#[derive(Debug, Clone)]
pub(crate) struct FeatureVectors {
    rows: Vec<f64>,
    row_len: usize,
    cols: Vec<f64>,
    col_len: usize,
}

impl FeatureVectors {
    pub(crate) fn extract(net: &NetworkGraph, position: &MergeablePosition, options: DistanceOptions) -> Self {
        let dim = position.dim;
        let w = net.weight(position.producer).expect("producer weight");
        let bias = net.bias(position.producer).filter(|_| options.include_bias);
        let row_len = w.row_len() + usize::from(bias.is_some());
        let mut rows = Vec::with_capacity(dim * row_len);
        for m in 0..dim {
            rows.extend_from_slice(w.row(m));
            if let Some(b) = bias {
                rows.push(b.data()[m]);
            }
        }

        let consumers: Vec<_> = position
            .consumers
            .iter()
            .map(|c| {
                let cw = net.weight(c.layer).expect("consumer weight");
                (cw, consumer_inner(cw, dim))
            })
            .collect();
        let col_len: usize = consumers.iter().map(|(cw, inner)| cw.dim0() * inner).sum();
        let mut cols = Vec::with_capacity(dim * col_len);
        for m in 0..dim {
            for (cw, inner) in &consumers {
                for o in 0..cw.dim0() {
                    cols.extend_from_slice(&cw.row(o)[m * inner..(m + 1) * inner]);
                }
            }
        }
        FeatureVectors {
            rows,
            row_len,
            cols,
            col_len,
        }
    }

    pub(crate) fn dim(&self) -> usize {
        if self.row_len == 0 {
            0
        } else {
            self.rows.len() / self.row_len
        }
    }

    pub(crate) fn row(&self, m: usize) -> &[f64] {
        &self.rows[m * self.row_len..(m + 1) * self.row_len]
    }

    pub(crate) fn col(&self, m: usize) -> &[f64] {
        &self.cols[m * self.col_len..(m + 1) * self.col_len]
    }

    pub(crate) fn distance(&self, m: usize, n: usize) -> f64 {
        squared_distance(self.row(m), self.row(n)) + squared_distance(self.col(m), self.col(n))
    }
}

#[inline]
fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| {
        let d = x - y;
        acc + d * d
    })
}

/// Row vector (producer weights, then bias) and column vector (consumer
/// blocks) of feature `m`.
pub fn feature_vectors(
    net: &NetworkGraph,
    position: &MergeablePosition,
    m: usize,
    options: DistanceOptions,
) -> Result<(Vec<f64>, Vec<f64>)> {
    check_position(net, position)?;
    if m >= position.dim {
        return Err(Error::Dimension(format!(
            "feature {m} out of range for {} features",
            position.dim
        )));
    }
    let fv = FeatureVectors::extract(net, position, options);
    Ok((fv.row(m).to_vec(), fv.col(m).to_vec()))
}

/// Symmetric matrix of feature distances at one position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    pub position: MergeablePosition,
    dim: usize,
    values: Vec<f64>,
}

/// Summary over off-diagonal entries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl DistanceMatrix {
    pub(crate) fn from_vectors(position: MergeablePosition, fv: &FeatureVectors) -> Self {
        let dim = fv.dim();
        let upper: Vec<Vec<f64>> = (0..dim)
            .into_par_iter()
            .map(|m| ((m + 1)..dim).map(|n| fv.distance(m, n)).collect())
            .collect();
        let mut values = vec![0.0; dim * dim];
        for (m, row) in upper.into_iter().enumerate() {
            for (k, d) in row.into_iter().enumerate() {
                let n = m + 1 + k;
                values[m * dim + n] = d;
                values[n * dim + m] = d;
            }
        }
        DistanceMatrix { position, dim, values }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.values[m * self.dim + n]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Smallest off-diagonal entry as `(m, n, d)` with `m < n`; ties resolve to
    /// the lexicographically smallest pair.
    pub fn argmin(&self) -> Option<(usize, usize, f64)> {
        let mut best: Option<(usize, usize, f64)> = None;
        for m in 0..self.dim {
            for n in (m + 1)..self.dim {
                let d = self.get(m, n);
                if best.is_none_or(|(_, _, b)| d < b) {
                    best = Some((m, n, d));
                }
            }
        }
        best
    }

    pub fn max_off_diagonal(&self) -> Option<f64> {
        (0..self.dim)
            .flat_map(|m| ((m + 1)..self.dim).map(move |n| (m, n)))
            .map(|(m, n)| self.get(m, n))
            .reduce(f64::max)
    }

    pub fn stats(&self) -> Option<DistanceStats> {
        let (min_pair, max) = (self.argmin()?, self.max_off_diagonal()?);
        let pairs = self.dim * (self.dim - 1) / 2;
        let mut sum = 0.0;
        for m in 0..self.dim {
            for n in (m + 1)..self.dim {
                sum += self.get(m, n);
            }
        }
        Some(DistanceStats {
            min: min_pair.2,
            max,
            mean: sum / pairs as f64,
        })
    }

    /// Drop feature `removed` and refresh the row and column of `refreshed`
    /// (an index after removal) from `fv`, which must describe the network the
    /// matrix now refers to.
    pub(crate) fn update_after_merge(
        &mut self,
        position: MergeablePosition,
        fv: &FeatureVectors,
        refreshed: usize,
        removed: usize,
    ) {
        let old = self.dim;
        let dim = old - 1;
        let mut values = Vec::with_capacity(dim * dim);
        for m in (0..old).filter(|&m| m != removed) {
            for n in (0..old).filter(|&n| n != removed) {
                values.push(self.values[m * old + n]);
            }
        }
        for n in 0..dim {
            let d = if n == refreshed {
                0.0
            } else if refreshed < n {
                fv.distance(refreshed, n)
            } else {
                fv.distance(n, refreshed)
            };
            values[refreshed * dim + n] = d;
            values[n * dim + refreshed] = d;
        }
        self.dim = dim;
        self.values = values;
        self.position = position;
    }

    /// Full matrix as CSV, one row per feature.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for m in 0..self.dim {
            let row: Vec<String> = (0..self.dim).map(|n| format!("{:e}", self.get(m, n))).collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }
}

/// Distance matrix at `position`.
pub fn distance_matrix(
    net: &NetworkGraph,
    position: &MergeablePosition,
    options: DistanceOptions,
) -> Result<DistanceMatrix> {
    check_position(net, position)?;
    let fv = FeatureVectors::extract(net, position, options);
    Ok(DistanceMatrix::from_vectors(position.clone(), &fv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::{enumerate_mergeable_positions, LayerKind, LayerSpec};
    use crate::tensor::{Precision, Tensor};
    use std::collections::BTreeMap;

    fn two_layer(w1: Vec<f64>, b1: Option<Vec<f64>>, w2: Vec<f64>, hidden: usize, outputs: usize) -> NetworkGraph {
        let inputs = w1.len() / hidden;
        let mut w = BTreeMap::new();
        w.insert("fc1.weight".into(), Tensor::new(vec![hidden, inputs], w1).unwrap());
        if let Some(b) = &b1 {
            w.insert("fc1.bias".into(), Tensor::new(vec![hidden], b.clone()).unwrap());
        }
        w.insert("fc2.weight".into(), Tensor::new(vec![outputs, hidden], w2).unwrap());
        NetworkGraph::new(
            vec![inputs],
            vec![
                LayerSpec::linear("fc1", inputs, hidden, b1.is_some()),
                LayerSpec::relu("r"),
                LayerSpec::linear("fc2", hidden, outputs, false),
            ],
            w,
            Precision::F64,
        )
        .unwrap()
    }

    #[test]
    fn identity_rows_single_output() {
        let net = two_layer(vec![1., 0., 0., 1.], None, vec![1., 1.], 2, 1);
        let pos = &enumerate_mergeable_positions(&net).unwrap()[0];
        let d = distance_matrix(&net, pos, DistanceOptions::default()).unwrap();
        assert_eq!(d.get(0, 1), 2.0);
        assert_eq!(d.get(1, 0), 2.0);
        assert_eq!(d.get(0, 0), 0.0);
    }

    #[test]
    fn row_vector_includes_bias() {
        let net = two_layer(vec![1., 0., 0., 1.], Some(vec![0.5, -0.5]), vec![1., 1.], 2, 1);
        let pos = &enumerate_mergeable_positions(&net).unwrap()[0];
        let (row, col) = feature_vectors(&net, pos, 0, DistanceOptions::default()).unwrap();
        assert_eq!(row, vec![1.0, 0.0, 0.5]);
        assert_eq!(col, vec![1.0]);
        let (row, _) = feature_vectors(&net, pos, 0, DistanceOptions { include_bias: false }).unwrap();
        assert_eq!(row, vec![1.0, 0.0]);
        assert!(feature_vectors(&net, pos, 2, DistanceOptions::default()).is_err());
    }

    #[test]
    fn duplicate_feature_has_zero_distance() {
        let net = two_layer(vec![1., 2., 1., 2., 0., 1.], Some(vec![0.1, 0.1, 0.3]), vec![3., 3., 1.], 3, 1);
        let pos = &enumerate_mergeable_positions(&net).unwrap()[0];
        let d = distance_matrix(&net, pos, DistanceOptions::default()).unwrap();
        assert_eq!(d.get(0, 1), 0.0);
        assert_eq!(d.argmin().unwrap(), (0, 1, 0.0));
    }

    #[test]
    fn conv_feature_lengths() {
        let layers = vec![
            LayerSpec::conv2d("c1", 3, 4, 3, 1, 1, true),
            LayerSpec::relu("r"),
            LayerSpec::new("pool", LayerKind::MaxPool2d { kernel: 2, stride: 2 }),
            LayerSpec::new("flat", LayerKind::Flatten),
            LayerSpec::linear("fc", 16, 8, true),
        ];
        let mut w = BTreeMap::new();
        w.insert("c1.weight".into(), Tensor::zeros(vec![4, 3, 3, 3]));
        w.insert("c1.bias".into(), Tensor::zeros(vec![4]));
        w.insert("fc.weight".into(), Tensor::zeros(vec![8, 16]));
        w.insert("fc.bias".into(), Tensor::zeros(vec![8]));
        let net = NetworkGraph::new(vec![3, 4, 4], layers, w, Precision::F32).unwrap();
        let pos = &enumerate_mergeable_positions(&net).unwrap()[0];
        let (row, col) = feature_vectors(&net, pos, 1, DistanceOptions::default()).unwrap();
        assert_eq!(row.len(), 27 + 1);
        assert_eq!(col.len(), 32);
    }

    #[test]
    fn argmin_prefers_lexicographic_pair() {
        let net = two_layer(vec![0., 0., 0.], None, vec![0., 0., 0.], 3, 1);
        let pos = &enumerate_mergeable_positions(&net).unwrap()[0];
        let d = distance_matrix(&net, pos, DistanceOptions::default()).unwrap();
        assert_eq!(d.argmin().unwrap(), (0, 1, 0.0));
        let s = d.stats().unwrap();
        assert_eq!((s.min, s.max, s.mean), (0.0, 0.0, 0.0));
    }

    #[test]
    fn stale_position_rejected() {
        let net = two_layer(vec![1., 0., 0., 1.], None, vec![1., 1.], 2, 1);
        let mut pos = enumerate_mergeable_positions(&net).unwrap()[0].clone();
        pos.dim = 3;
        assert!(distance_matrix(&net, &pos, DistanceOptions::default()).is_err());
    }
}
