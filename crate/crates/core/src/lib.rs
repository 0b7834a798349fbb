//! Feature-complexity measurement for feedforward networks.
//!
//! Functionally equivalent features are found by weight matching and merged
//! greedily, layer by layer, without retraining. The crate also carries the
//! tooling needed to study the result: a forward-pass engine, permutation and
//! interpolation checks, a small MLP trainer, synthetic datasets and a
//! single-file archive format.

pub mod archive;
pub mod cli;
pub mod connectivity;
pub mod error;
pub mod ifm;
pub mod inference;
pub mod matching;
pub mod netcore;
pub mod tensor;
pub mod toytrain;

pub use error::{Error, Result};
pub use inference::{evaluate, forward, layer_features, LabeledDataset, Metrics};
pub use netcore::{
    apply_permutation, enumerate_mergeable_positions, interpolate_params, LayerKind, LayerSpec,
    MergeablePosition, NetworkGraph, Permutation,
};
pub use tensor::{Precision, Tensor};
