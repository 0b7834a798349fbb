use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::graph::NetworkGraph;
use crate::netcore::position::{position_at, remap_consumer};

/// Per-position feature relabeling.
///
/// For the position produced by layer `l`, `map[i] = j` means feature `i` of
/// the permuted network is feature `j` of the original: producer rows become
/// `P W` and consumer columns `W P^T`. Positions absent from the map are left
/// untouched.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    maps: BTreeMap<usize, Vec<usize>>,
}

impl Permutation {
    pub fn identity() -> Self {
        Permutation::default()
    }

    /// Set the map at the position produced by `producer`.
    pub fn insert(&mut self, producer: usize, map: Vec<usize>) -> Result<()> {
        check_bijection(&map)?;
        self.maps.insert(producer, map);
        Ok(())
    }

    pub fn with(mut self, producer: usize, map: Vec<usize>) -> Result<Self> {
        self.insert(producer, map)?;
        Ok(self)
    }

    pub fn get(&self, producer: usize) -> Option<&[usize]> {
        self.maps.get(&producer).map(Vec::as_slice)
    }

    pub fn positions(&self) -> impl Iterator<Item = (usize, &[usize])> {
        self.maps.iter().map(|(&p, m)| (p, m.as_slice()))
    }

    pub fn is_identity(&self) -> bool {
        self.maps
            .values()
            .all(|m| m.iter().enumerate().all(|(i, &j)| i == j))
    }

    /// Number of indices moved across all positions.
    pub fn moved(&self) -> usize {
        self.maps
            .values()
            .map(|m| m.iter().enumerate().filter(|(i, j)| i != *j).count())
            .sum()
    }

    pub fn inverse(&self) -> Self {
        let maps = self
            .maps
            .iter()
            .map(|(&p, m)| {
                let mut inv = vec![0; m.len()];
                for (i, &j) in m.iter().enumerate() {
                    inv[j] = i;
                }
                (p, inv)
            })
            .collect();
        Permutation { maps }
    }

    /// The permutation equivalent to applying `self` and then `next`.
    pub fn then(&self, next: &Permutation) -> Result<Self> {
        let mut maps = self.maps.clone();
        for (&p, second) in &next.maps {
            match maps.get_mut(&p) {
                Some(first) => {
                    if first.len() != second.len() {
                        return Err(Error::Dimension(format!(
                            "cannot compose maps of length {} and {} at layer {p}",
                            first.len(),
                            second.len()
                        )));
                    }
                    *first = second.iter().map(|&i| first[i]).collect();
                }
                None => {
                    maps.insert(p, second.clone());
                }
            }
        }
        Ok(Permutation { maps })
    }
}

fn check_bijection(map: &[usize]) -> Result<()> {
    let mut seen = vec![false; map.len()];
    for &j in map {
        if j >= map.len() || std::mem::replace(&mut seen[j], true) {
            return Err(Error::Validation(format!("{map:?} is not a bijection")));
        }
    }
    Ok(())
}

/// Relabel features at every position named by `perm`. The result computes
/// the same function as `net` up to floating-point reassociation.
pub fn apply_permutation(net: &NetworkGraph, perm: &Permutation) -> Result<NetworkGraph> {
    let mut weights = net.weights().clone();
    for (producer, map) in perm.positions() {
        if producer >= net.num_layers() {
            return Err(Error::Dimension(format!("no layer {producer}")));
        }
        let position = position_at(net, producer)?;
        if map.len() != position.dim {
            return Err(Error::Dimension(format!(
                "permutation of length {} at layer {producer} with {} features",
                map.len(),
                position.dim
            )));
        }
        // a layer can be the consumer of one position and the producer of the
        // next, so always start from the weights permuted so far
        let spec = &net.layers()[producer];
        let w = weights[&spec.weight_key()].select_rows(map);
        weights.insert(spec.weight_key(), w);
        if let Some(b) = weights.get(&spec.bias_key()) {
            let b = b.select_rows(map);
            weights.insert(spec.bias_key(), b);
        }
        for consumer in &position.consumers {
            let cspec = &net.layers()[consumer.layer];
            let cw = &weights[&cspec.weight_key()];
            let inner = cw.numel() / (cw.dim0() * position.dim);
            let permuted = remap_consumer(cw, position.dim, position.dim, |row, f, dst| {
                let j = map[f];
                dst.copy_from_slice(&row[j * inner..(j + 1) * inner]);
            });
            weights.insert(cspec.weight_key(), permuted);
        }
    }
    net.rebuild(net.layers().to_vec(), weights)
}
