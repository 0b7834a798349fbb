use std::collections::{BTreeMap, HashSet};

use crate::error::{Error, Result};
use crate::netcore::layer::{LayerKind, LayerSpec};
use crate::tensor::{Precision, Tensor};

/// A feedforward network: ordered layers plus their parameter tensors.
///
/// Construction validates the whole graph (shape chaining, parameter shapes,
/// residual sources, finiteness) and rounds every parameter to the declared
/// precision. After that the value is never mutated; operations return new
/// networks.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkGraph {
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    weights: BTreeMap<String, Tensor>,
    precision: Precision,
    feature_shapes: Vec<Vec<usize>>,
}

impl NetworkGraph {
    pub fn new(
        input_shape: Vec<usize>,
        layers: Vec<LayerSpec>,
        mut weights: BTreeMap<String, Tensor>,
        precision: Precision,
    ) -> Result<Self> {
        if input_shape.is_empty() || input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Dimension(format!("invalid input shape {input_shape:?}")));
        }
        let mut names = HashSet::new();
        for layer in &layers {
            if !names.insert(layer.name.as_str()) {
                return Err(Error::Structural(format!("duplicate layer name `{}`", layer.name)));
            }
        }

        let mut feature_shapes: Vec<Vec<usize>> = Vec::with_capacity(layers.len());
        let mut expected_keys = HashSet::new();
        for (idx, layer) in layers.iter().enumerate() {
            let input = feature_shapes.last().unwrap_or(&input_shape);
            let out = layer.kind.output_shape(input).map_err(|e| match e {
                Error::Dimension(msg) => Error::Dimension(format!("layer `{}`: {msg}", layer.name)),
                other => other,
            })?;
            if let LayerKind::ResidualAdd { source } = layer.kind {
                if source >= idx {
                    return Err(Error::Structural(format!(
                        "residual `{}` references layer {source}, which is not before it",
                        layer.name
                    )));
                }
                if feature_shapes[source] != *input {
                    return Err(Error::Dimension(format!(
                        "residual `{}` adds shape {:?} to {:?}",
                        layer.name, feature_shapes[source], input
                    )));
                }
            }
            if let Some(wshape) = layer.kind.weight_shape() {
                let key = layer.weight_key();
                check_param(&weights, &key, &wshape)?;
                expected_keys.insert(key);
                if layer.kind.has_bias() {
                    let key = layer.bias_key();
                    check_param(&weights, &key, &[wshape[0]])?;
                    expected_keys.insert(key);
                }
            }
            feature_shapes.push(out);
        }
        if let Some(extra) = weights.keys().find(|k| !expected_keys.contains(k.as_str())) {
            return Err(Error::Structural(format!("tensor `{extra}` belongs to no layer")));
        }
        for (key, t) in weights.iter_mut() {
            if !t.is_finite() {
                return Err(Error::Validation(format!("tensor `{key}` has non-finite values")));
            }
            t.round_to(precision);
        }

        Ok(NetworkGraph {
            input_shape,
            layers,
            weights,
            precision,
            feature_shapes,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn layer(&self, idx: usize) -> &LayerSpec {
        &self.layers[idx]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    /// Output shape of every layer (batch axis excluded).
    pub fn feature_shapes(&self) -> &[Vec<usize>] {
        &self.feature_shapes
    }

    pub fn output_shape(&self) -> &[usize] {
        self.feature_shapes.last().unwrap_or(&self.input_shape)
    }

    pub fn weight(&self, layer: usize) -> Option<&Tensor> {
        self.weights.get(&self.layers[layer].weight_key())
    }

    pub fn bias(&self, layer: usize) -> Option<&Tensor> {
        if self.layers[layer].kind.has_bias() {
            self.weights.get(&self.layers[layer].bias_key())
        } else {
            None
        }
    }

    pub fn parametric_layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.kind.is_parametric())
            .map(|(i, _)| i)
    }

    pub fn param_count(&self) -> usize {
        self.weights.values().map(Tensor::numel).sum()
    }

    /// Same topology with a different storage precision.
    pub fn with_precision(&self, precision: Precision) -> Result<Self> {
        NetworkGraph::new(
            self.input_shape.clone(),
            self.layers.clone(),
            self.weights.clone(),
            precision,
        )
    }

    /// Rebuild with modified parts; revalidates everything.
    pub(crate) fn rebuild(
        &self,
        layers: Vec<LayerSpec>,
        weights: BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        NetworkGraph::new(self.input_shape.clone(), layers, weights, self.precision)
    }

    /// Input shape, layers, parameters and precision, for building a modified copy.
    pub fn into_parts(self) -> (Vec<usize>, Vec<LayerSpec>, BTreeMap<String, Tensor>, Precision) {
        (self.input_shape, self.layers, self.weights, self.precision)
    }

    /// True when both networks have the same layers and parameter shapes.
    pub fn same_structure(&self, other: &NetworkGraph) -> bool {
        self.input_shape == other.input_shape
            && self.layers == other.layers
            && self.weights.len() == other.weights.len()
            && self
                .weights
                .iter()
                .zip(&other.weights)
                .all(|((ka, a), (kb, b))| ka == kb && a.shape() == b.shape())
    }
}

fn check_param(weights: &BTreeMap<String, Tensor>, key: &str, shape: &[usize]) -> Result<()> {
    match weights.get(key) {
        None => Err(Error::Structural(format!("missing tensor `{key}`"))),
        Some(t) if t.shape() != shape => Err(Error::Dimension(format!(
            "tensor `{key}` has shape {:?}, layer expects {shape:?}",
            t.shape()
        ))),
        Some(_) => Ok(()),
    }
}
