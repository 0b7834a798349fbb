use std::collections::{BTreeMap, HashSet};

use crate::error::{Error, Result};
use crate::netcore::{position_at, remap_consumer, resize_consumer, resize_producer, NetworkGraph};
use crate::tensor::Tensor;

/// Widest position [`plant_duplicates`] will produce unless told otherwise.
pub const DEFAULT_MAX_WIDTH: usize = 4096;

/// Append exact copies of features at the position produced by `producer`.
///
/// For each `(src, count)`, `count` copies of feature `src` are appended
/// (in the order given) with identical producer rows and biases; every
/// consumer block of `src` is divided by `count + 1` and shared by the
/// original and its copies, so the network computes the same function.
pub fn plant_duplicates(
    net: &NetworkGraph,
    producer: usize,
    pairs: &[(usize, usize)],
    max_width: usize,
) -> Result<NetworkGraph> {
    let position = position_at(net, producer)?;
    let dim = position.dim;
    let mut seen = HashSet::new();
    for &(src, _) in pairs {
        if src >= dim {
            return Err(Error::Dimension(format!("feature {src} out of range for {dim}")));
        }
        if !seen.insert(src) {
            return Err(Error::Validation(format!("feature {src} planted twice")));
        }
    }
    let added: usize = pairs.iter().map(|&(_, c)| c).sum();
    let new_dim = dim + added;
    if new_dim > max_width {
        return Err(Error::Dimension(format!(
            "planting widens layer {producer} to {new_dim}, beyond the limit of {max_width}"
        )));
    }
    if added == 0 {
        return Ok(net.clone());
    }

    // source[f]: original feature behind new feature f
    let mut source: Vec<usize> = (0..dim).collect();
    let mut share = vec![1.0; dim];
    for &(src, count) in pairs {
        source.extend(std::iter::repeat_n(src, count));
        share[src] = (count + 1) as f64;
    }

    let mut layers = net.layers().to_vec();
    let mut weights: BTreeMap<String, Tensor> = net.weights().clone();
    let spec = &net.layers()[producer];
    let w = net.weight(producer).expect("producer weight");
    weights.insert(spec.weight_key(), w.select_rows(&source));
    if let Some(b) = net.bias(producer) {
        weights.insert(spec.bias_key(), b.select_rows(&source));
    }
    layers[producer].kind = resize_producer(&spec.kind, new_dim);

    for consumer in &position.consumers {
        let cw = net.weight(consumer.layer).expect("consumer weight");
        let inner = cw.numel() / (cw.dim0() * dim);
        let planted = remap_consumer(cw, dim, new_dim, |row, f, dst| {
            let j = source[f];
            for (d, v) in dst.iter_mut().zip(&row[j * inner..(j + 1) * inner]) {
                *d = v / share[j];
            }
        });
        let cspec = &net.layers()[consumer.layer];
        weights.insert(cspec.weight_key(), planted);
        layers[consumer.layer].kind = resize_consumer(&cspec.kind, consumer.block, new_dim);
    }
    net.rebuild(layers, weights)
}
