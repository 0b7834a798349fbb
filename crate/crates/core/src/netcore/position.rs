//! Mergeable positions: places where one parametric layer produces features
//! that are read by downstream parametric layers, with activations, pooling
//! and flattening in between ignored.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::graph::NetworkGraph;
use crate::netcore::layer::LayerKind;
use crate::tensor::Tensor;

/// One downstream parametric layer reading the features of a position.
///
/// Feature `m` owns the input columns `[m * block, (m + 1) * block)` of a
/// linear consumer (`block > 1` after flattening a feature map), or input
/// channel `m` of a conv consumer (`block == 1`).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsumerBlock {
    pub layer: usize,
    pub block: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeablePosition {
    /// Index of the parametric layer producing the features.
    pub producer: usize,
    pub consumers: Vec<ConsumerBlock>,
    /// Current number of features.
    pub dim: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PositionOptions {
    /// Also return positions strictly inside a residual block. Positions whose
    /// features reach a residual add are never returned.
    pub include_residual_interior: bool,
}

/// Every mergeable position of `net` in ascending producer order, using the
/// default options (no residual interiors).
pub fn enumerate_mergeable_positions(net: &NetworkGraph) -> Result<Vec<MergeablePosition>> {
    enumerate_positions_with(net, PositionOptions::default())
}

pub fn enumerate_positions_with(
    net: &NetworkGraph,
    options: PositionOptions,
) -> Result<Vec<MergeablePosition>> {
    let layers = net.layers();
    let residuals: Vec<(usize, usize)> = layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| match l.kind {
            LayerKind::ResidualAdd { source } => Some((source, i)),
            _ => None,
        })
        .collect();
    for &(source, add) in &residuals {
        if source >= add {
            return Err(Error::Structural(format!(
                "residual at layer {add} has dangling source {source}"
            )));
        }
    }

    let mut positions = Vec::new();
    'producers: for producer in net.parametric_layers() {
        let dim = layers[producer].kind.out_features().expect("parametric");
        let mut consumer = None;
        for (idx, layer) in layers.iter().enumerate().skip(producer + 1) {
            match layer.kind {
                LayerKind::ResidualAdd { .. } => continue 'producers,
                LayerKind::Linear { .. } | LayerKind::Conv2d { .. } => {
                    consumer = Some(idx);
                    break;
                }
                _ => {}
            }
        }
        // The final parametric layer emits logits and has no consumer.
        let Some(consumer) = consumer else { continue };

        // Features tapped by a skip connection live on the residual stream.
        if residuals
            .iter()
            .any(|&(source, _)| (producer..consumer).contains(&source))
        {
            continue;
        }
        let interior = residuals
            .iter()
            .any(|&(source, add)| source < producer && add > producer);
        if interior && !options.include_residual_interior {
            continue;
        }

        let block = match layers[consumer].kind {
            LayerKind::Linear { in_dim, .. } => {
                if in_dim % dim != 0 {
                    return Err(Error::Dimension(format!(
                        "layer {consumer} reads {in_dim} columns, not a multiple of {dim} features"
                    )));
                }
                in_dim / dim
            }
            LayerKind::Conv2d { in_ch, .. } => {
                if in_ch != dim {
                    return Err(Error::Dimension(format!(
                        "layer {consumer} reads {in_ch} channels, producer emits {dim}"
                    )));
                }
                1
            }
            _ => unreachable!(),
        };
        positions.push(MergeablePosition {
            producer,
            consumers: vec![ConsumerBlock {
                layer: consumer,
                block,
            }],
            dim,
        });
    }
    Ok(positions)
}

/// Find the position produced by layer `producer`, residual interiors included.
pub fn position_at(net: &NetworkGraph, producer: usize) -> Result<MergeablePosition> {
    enumerate_positions_with(
        net,
        PositionOptions {
            include_residual_interior: true,
        },
    )?
    .into_iter()
    .find(|p| p.producer == producer)
    .ok_or_else(|| Error::Structural(format!("layer {producer} is not a mergeable position")))
}

/// Check that `position` still describes `net`.
pub(crate) fn check_position(net: &NetworkGraph, position: &MergeablePosition) -> Result<()> {
    let current = position_at(net, position.producer)?;
    if current != *position {
        return Err(Error::Structural(format!(
            "position at layer {} does not match the network (dim {} vs {})",
            position.producer, position.dim, current.dim
        )));
    }
    Ok(())
}

/// Number of values per (output row, feature) in a consumer weight.
pub(crate) fn consumer_inner(weight: &Tensor, dim: usize) -> usize {
    weight.numel() / (weight.dim0() * dim)
}

/// Rebuild a consumer weight viewed as `[out, dim, inner]` into
/// `[out, new_dim, inner]`. `fill(row, new_feature, dst)` writes the block of
/// `new_feature` given the full old input row.
pub(crate) fn remap_consumer(
    weight: &Tensor,
    dim: usize,
    new_dim: usize,
    mut fill: impl FnMut(&[f64], usize, &mut [f64]),
) -> Tensor {
    let out = weight.dim0();
    let inner = consumer_inner(weight, dim);
    let mut data = vec![0.0; out * new_dim * inner];
    for o in 0..out {
        let src = weight.row(o);
        let dst = &mut data[o * new_dim * inner..(o + 1) * new_dim * inner];
        for (f, block) in dst.chunks_mut(inner).enumerate() {
            fill(src, f, block);
        }
    }
    let mut shape = weight.shape().to_vec();
    if shape.len() == 2 {
        shape[1] = new_dim * inner;
    } else {
        shape[1] = new_dim;
    }
    Tensor::new(shape, data).expect("remapped consumer shape is consistent")
}

/// Layer kind with the producer's output count replaced.
pub(crate) fn resize_producer(kind: &LayerKind, new_dim: usize) -> LayerKind {
    let mut kind = kind.clone();
    match &mut kind {
        LayerKind::Linear { out_dim, .. } => *out_dim = new_dim,
        LayerKind::Conv2d { out_ch, .. } => *out_ch = new_dim,
        _ => unreachable!("producer must be parametric"),
    }
    kind
}

/// Layer kind with the consumer's input count adjusted for `new_dim` features.
pub(crate) fn resize_consumer(kind: &LayerKind, block: usize, new_dim: usize) -> LayerKind {
    let mut kind = kind.clone();
    match &mut kind {
        LayerKind::Linear { in_dim, .. } => *in_dim = new_dim * block,
        LayerKind::Conv2d { in_ch, .. } => *in_ch = new_dim,
        _ => unreachable!("consumer must be parametric"),
    }
    kind
}
