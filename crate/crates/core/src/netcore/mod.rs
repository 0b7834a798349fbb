//! Network data model: layers, parameter tensors, mergeable positions and
//! permutation algebra.

mod graph;
mod layer;
mod permutation;
mod position;

pub use graph::NetworkGraph;
pub use layer::{LayerKind, LayerSpec};
pub use permutation::{apply_permutation, Permutation};
pub use position::{
    enumerate_mergeable_positions, enumerate_positions_with, position_at, ConsumerBlock,
    MergeablePosition, PositionOptions,
};
pub(crate) use position::{check_position, consumer_inner, remap_consumer, resize_consumer, resize_producer};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parameters `alpha * a + (1 - alpha) * b`, tensor by tensor.
///
/// `alpha == 1` returns `a` and `alpha == 0` returns `b` bit-for-bit.
pub fn interpolate_params(a: &NetworkGraph, b: &NetworkGraph, alpha: f64) -> Result<NetworkGraph> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Validation(format!("alpha {alpha} outside [0, 1]")));
    }
    if !a.same_structure(b) || a.precision() != b.precision() {
        return Err(Error::Structural("cannot interpolate networks of different structure".into()));
    }
    if alpha == 1.0 {
        return Ok(a.clone());
    }
    if alpha == 0.0 {
        return Ok(b.clone());
    }
    let weights = a
        .weights()
        .iter()
        .zip(b.weights().values())
        .map(|((key, ta), tb)| {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| alpha * x + (1.0 - alpha) * y)
                .collect();
            let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
            (key.clone(), t)
        })
        .collect();
    a.rebuild(a.layers().to_vec(), weights)
}
