//! Deterministic forward pass and evaluation.
//!
//! Every sample is computed independently with a fixed accumulation order, so
//! batched and per-sample results are identical and do not depend on the
//! number of worker threads.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{LayerKind, NetworkGraph};
use crate::tensor::Tensor;

/// Inputs `[N, ...]` with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    inputs: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.shape().is_empty() {
            return Err(Error::Dimension("dataset inputs need a leading sample axis".into()));
        }
        if inputs.dim0() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} input rows but {} labels",
                inputs.dim0(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Validation(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        if !inputs.is_finite() {
            return Err(Error::Validation("dataset inputs contain non-finite values".into()));
        }
        Ok(LabeledDataset {
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn inputs(&self) -> &Tensor {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Shape of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.inputs.shape()[1..]
    }
}

/// Intermediate output of layer `layer` for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub layer: usize,
    pub values: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub loss: f64,
}

fn check_batch(net: &NetworkGraph, batch: &Tensor) -> Result<()> {
    if batch.shape().len() != net.input_shape().len() + 1 || &batch.shape()[1..] != net.input_shape() {
        return Err(Error::Dimension(format!(
            "batch shape {:?} does not match network input {:?}",
            batch.shape(),
            net.input_shape()
        )));
    }
    Ok(())
}

fn stack(rows: Vec<Vec<f64>>, sample_shape: &[usize]) -> Tensor {
    let n = rows.len();
    let mut shape = vec![n];
    shape.extend_from_slice(sample_shape);
    Tensor::new(shape, rows.concat()).expect("stacked rows match shape")
}

/// Logits for every sample of `batch` (`[N, ...input_shape]`).
pub fn forward(net: &NetworkGraph, batch: &Tensor) -> Result<Tensor> {
    check_batch(net, batch)?;
    let last = net.num_layers();
    let rows: Vec<Vec<f64>> = (0..batch.dim0())
        .into_par_iter()
        .map(|i| run_layers(net, batch.row(i), None, 0, last))
        .collect::<Result<_>>()?;
    Ok(stack(rows, net.output_shape()))
}

/// Output of layer `layer` (0-based) for every sample.
pub fn layer_features(net: &NetworkGraph, batch: &Tensor, layer: usize) -> Result<FeatureMap> {
    if layer >= net.num_layers() {
        return Err(Error::Dimension(format!(
            "layer {layer} out of range for a {}-layer network",
            net.num_layers()
        )));
    }
    check_batch(net, batch)?;
    let rows: Vec<Vec<f64>> = (0..batch.dim0())
        .into_par_iter()
        .map(|i| run_layers(net, batch.row(i), None, 0, layer + 1))
        .collect::<Result<_>>()?;
    Ok(FeatureMap {
        layer,
        values: stack(rows, &net.feature_shapes()[layer]),
    })
}

/// Continue a forward pass from the output of layer `layer`.
///
/// Residual adds after `layer` may only reference `layer` itself or later.
pub fn forward_from(net: &NetworkGraph, layer: usize, features: &Tensor) -> Result<Tensor> {
    if layer >= net.num_layers() {
        return Err(Error::Dimension(format!("layer {layer} out of range")));
    }
    let expected = &net.feature_shapes()[layer];
    if &features.shape()[1..] != expected.as_slice() {
        return Err(Error::Dimension(format!(
            "features {:?} do not match layer {layer} output {expected:?}",
            features.shape()
        )));
    }
    for l in &net.layers()[layer + 1..] {
        if let LayerKind::ResidualAdd { source } = l.kind {
            if source < layer {
                return Err(Error::Unsupported(format!(
                    "residual `{}` reads layer {source}, before the split point",
                    l.name
                )));
            }
        }
    }
    let last = net.num_layers();
    let rows: Vec<Vec<f64>> = (0..features.dim0())
        .into_par_iter()
        .map(|i| run_layers(net, features.row(i), Some(layer), layer + 1, last))
        .collect::<Result<_>>()?;
    Ok(stack(rows, net.output_shape()))
}

/// Accuracy (argmax, ties to the lowest class) and mean cross-entropy.
pub fn evaluate(net: &NetworkGraph, dataset: &LabeledDataset) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(Error::Validation("cannot evaluate on an empty dataset".into()));
    }
    let logits = forward(net, dataset.inputs())?;
    let classes = logits.row_len();
    if classes != dataset.num_classes() {
        return Err(Error::Dimension(format!(
            "network emits {classes} logits, dataset has {} classes",
            dataset.num_classes()
        )));
    }
    Ok(metrics_from_logits(&logits, dataset.labels()))
}

pub fn metrics_from_logits(logits: &Tensor, labels: &[usize]) -> Metrics {
    let mut correct = 0usize;
    let mut loss = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        if argmax(row) == label {
            correct += 1;
        }
        loss += log_sum_exp(row) - row[label];
    }
    let n = labels.len() as f64;
    Metrics {
        accuracy: correct as f64 / n,
        loss: loss / n,
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Largest per-sample deviation `max|a - b| / (max|b| + 1e-12)` over a batch.
pub fn max_relative_deviation(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "compared tensors differ in shape");
    (0..a.dim0())
        .map(|i| {
            let (ra, rb) = (a.row(i), b.row(i));
            let diff = ra
                .iter()
                .zip(rb)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            let scale = rb.iter().map(|y| y.abs()).fold(0.0, f64::max);
            diff / (scale + 1e-12)
        })
        .fold(0.0, f64::max)
}

/// Run layers `start..end` on one sample. `input` is the network input when
/// `input_layer` is `None`, otherwise the output of layer `input_layer`.
fn run_layers(
    net: &NetworkGraph,
    input: &[f64],
    input_layer: Option<usize>,
    start: usize,
    end: usize,
) -> Result<Vec<f64>> {
    let shapes = net.feature_shapes();
    let mut outputs: Vec<Option<Vec<f64>>> = vec![None; net.num_layers()];
    if let Some(l) = input_layer {
        outputs[l] = Some(input.to_vec());
    }
    let mut current = input.to_vec();
    for idx in start..end {
        let in_shape = if idx == 0 {
            net.input_shape()
        } else {
            shapes[idx - 1].as_slice()
        };
        let next = match net.layer(idx).kind {
            LayerKind::Linear { in_dim, out_dim, .. } => linear(
                net.weight(idx).expect("weight").data(),
                net.bias(idx).map(Tensor::data),
                &current,
                in_dim,
                out_dim,
            ),
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel_h,
                kernel_w,
                stride,
                padding,
                ..
            } => conv2d(
                net.weight(idx).expect("weight").data(),
                net.bias(idx).map(Tensor::data),
                &current,
                ConvGeometry {
                    in_ch,
                    out_ch,
                    height: in_shape[1],
                    width: in_shape[2],
                    kernel_h,
                    kernel_w,
                    stride,
                    padding,
                },
            ),
            LayerKind::Relu => current.iter().map(|&v| v.max(0.0)).collect(),
            LayerKind::MaxPool2d { kernel, stride } => {
                pool(&current, in_shape, &shapes[idx], kernel, stride, PoolOp::Max)
            }
            LayerKind::AvgPool2d { kernel, stride } => {
                pool(&current, in_shape, &shapes[idx], kernel, stride, PoolOp::Mean)
            }
            LayerKind::GlobalAvgPool => {
                let plane = in_shape[1] * in_shape[2];
                current
                    .chunks(plane)
                    .map(|c| c.iter().sum::<f64>() / plane as f64)
                    .collect()
            }
            LayerKind::Flatten => current,
            LayerKind::ResidualAdd { source } => {
                let skip = outputs[source].as_ref().ok_or_else(|| {
                    Error::Unsupported(format!("residual source {source} was not computed"))
                })?;
                current.iter().zip(skip).map(|(a, b)| a + b).collect()
            }
        };
        outputs[idx] = Some(next.clone());
        current = next;
    }
    Ok(current)
}

fn linear(w: &[f64], b: Option<&[f64]>, x: &[f64], in_dim: usize, out_dim: usize) -> Vec<f64> {
    (0..out_dim)
        .map(|o| {
            let row = &w[o * in_dim..(o + 1) * in_dim];
            let acc: f64 = row.iter().zip(x).fold(0.0, |acc, (w, x)| acc + w * x);
            acc + b.map_or(0.0, |b| b[o])
        })
        .collect()
}

struct ConvGeometry {
    in_ch: usize,
    out_ch: usize,
    height: usize,
    width: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    padding: usize,
}

/// im2col followed by a row-major GEMM; out-of-bounds taps read zero.
fn conv2d(w: &[f64], b: Option<&[f64]>, x: &[f64], g: ConvGeometry) -> Vec<f64> {
    let oh = (g.height + 2 * g.padding - g.kernel_h) / g.stride + 1;
    let ow = (g.width + 2 * g.padding - g.kernel_w) / g.stride + 1;
    let patch = g.in_ch * g.kernel_h * g.kernel_w;
    let pixels = oh * ow;
    // cols[p * patch + k]: one contiguous patch per output pixel
    let mut cols = vec![0.0; pixels * patch];
    for oy in 0..oh {
        for ox in 0..ow {
            let base = (oy * ow + ox) * patch;
            for c in 0..g.in_ch {
                for ky in 0..g.kernel_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel_w {
                        let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let k = (c * g.kernel_h + ky) * g.kernel_w + kx;
                        cols[base + k] = x[(c * g.height + iy as usize) * g.width + ix as usize];
                    }
                }
            }
        }
    }
    let mut out = vec![0.0; g.out_ch * pixels];
    for o in 0..g.out_ch {
        let filter = &w[o * patch..(o + 1) * patch];
        let bias = b.map_or(0.0, |b| b[o]);
        for p in 0..pixels {
            let col = &cols[p * patch..(p + 1) * patch];
            let acc = filter.iter().zip(col).fold(0.0, |acc, (w, x)| acc + w * x);
            out[o * pixels + p] = acc + bias;
        }
    }
    out
}

#[derive(Clone, Copy)]
enum PoolOp {
    Max,
    Mean,
}

fn pool(x: &[f64], in_shape: &[usize], out_shape: &[usize], kernel: usize, stride: usize, op: PoolOp) -> Vec<f64> {
    let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[1], out_shape[2]);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let window = (0..kernel).flat_map(|ky| {
                    (0..kernel).map(move |kx| plane[(oy * stride + ky) * w + ox * stride + kx])
                });
                out.push(match op {
                    PoolOp::Max => window.fold(f64::NEG_INFINITY, f64::max),
                    PoolOp::Mean => window.sum::<f64>() / (kernel * kernel) as f64,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcore::LayerSpec;
    use crate::tensor::Precision;
    use std::collections::BTreeMap;

    fn net_from(input: Vec<usize>, layers: Vec<LayerSpec>, tensors: Vec<(&str, Tensor)>) -> NetworkGraph {
        let w: BTreeMap<String, Tensor> = tensors.into_iter().map(|(k, t)| (k.to_string(), t)).collect();
        NetworkGraph::new(input, layers, w, Precision::F64).unwrap()
    }

    #[test]
    fn identity_linear_passes_through() {
        let net = net_from(
            vec![3],
            vec![LayerSpec::linear("fc", 3, 3, true)],
            vec![
                ("fc.weight", Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap()),
                ("fc.bias", Tensor::zeros(vec![3])),
            ],
        );
        let x = Tensor::new(vec![2, 3], vec![1.5, -2.0, 0.25, 3.0, 4.0, -5.0]).unwrap();
        assert_eq!(forward(&net, &x).unwrap(), x);
    }

    #[test]
    fn one_by_one_conv_scales() {
        let net = net_from(
            vec![1, 2, 2],
            vec![LayerSpec::conv2d("c", 1, 1, 1, 1, 0, false)],
            vec![("c.weight", Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap())],
        );
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(forward(&net, &x).unwrap().data(), &[2., 4., 6., 8.]);
    }

    #[test]
    fn padded_conv_matches_hand_sum() {
        // 3x3 all-ones kernel with zero padding counts in-bounds neighbours.
        let net = net_from(
            vec![1, 3, 3],
            vec![LayerSpec::conv2d("c", 1, 1, 3, 1, 1, false)],
            vec![("c.weight", Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap())],
        );
        let x = Tensor::new(vec![1, 1, 3, 3], vec![1.0; 9]).unwrap();
        assert_eq!(
            forward(&net, &x).unwrap().data(),
            &[4., 6., 4., 6., 9., 6., 4., 6., 4.]
        );
    }

    #[test]
    fn pooling_ops() {
        let layers = vec![LayerSpec::new("p", LayerKind::MaxPool2d { kernel: 2, stride: 2 })];
        let net = net_from(vec![1, 2, 4], layers, vec![]);
        let x = Tensor::new(vec![1, 1, 2, 4], vec![1., 5., 2., 0., 3., 4., -1., -2.]).unwrap();
        assert_eq!(forward(&net, &x).unwrap().data(), &[5., 2.]);
        let layers = vec![LayerSpec::new("p", LayerKind::AvgPool2d { kernel: 2, stride: 2 })];
        let net = net_from(vec![1, 2, 4], layers, vec![]);
        assert_eq!(forward(&net, &x).unwrap().data(), &[3.25, -0.25]);
        let net = net_from(vec![1, 2, 4], vec![LayerSpec::new("g", LayerKind::GlobalAvgPool)], vec![]);
        assert_eq!(forward(&net, &x).unwrap().data(), &[1.5]);
    }

    #[test]
    fn residual_adds_source() {
        let net = net_from(
            vec![2],
            vec![
                LayerSpec::linear("a", 2, 2, false),
                LayerSpec::linear("b", 2, 2, false),
                LayerSpec::new("add", LayerKind::ResidualAdd { source: 0 }),
            ],
            vec![
                ("a.weight", Tensor::new(vec![2, 2], vec![1., 0., 0., 1.]).unwrap()),
                ("b.weight", Tensor::new(vec![2, 2], vec![2., 0., 0., 2.]).unwrap()),
            ],
        );
        let x = Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
        assert_eq!(forward(&net, &x).unwrap().data(), &[3.0, -3.0]);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn uniform_logits_give_ln_classes() {
        let logits = Tensor::zeros(vec![20, 10]);
        let labels: Vec<usize> = (0..20).map(|i| i % 10).collect();
        let m = metrics_from_logits(&logits, &labels);
        assert!((m.loss - 10f64.ln()).abs() < 1e-6);
        assert_eq!(m.accuracy, 0.1);
    }

    #[test]
    fn one_hot_logits_are_fully_accurate() {
        let labels = vec![2, 0, 1, 1];
        let logits = Tensor::from_fn(vec![4, 3], |k| if k % 3 == labels[k / 3] { 5.0 } else { 0.0 });
        assert_eq!(metrics_from_logits(&logits, &labels).accuracy, 1.0);
    }

    #[test]
    fn empty_dataset_refused() {
        let net = net_from(
            vec![2],
            vec![LayerSpec::linear("fc", 2, 2, false)],
            vec![("fc.weight", Tensor::zeros(vec![2, 2]))],
        );
        let ds = LabeledDataset::new(Tensor::new(vec![0, 2], vec![]).unwrap(), vec![], 2).unwrap();
        assert!(matches!(evaluate(&net, &ds), Err(Error::Validation(_))));
    }

    #[test]
    fn batch_shape_checked() {
        let net = net_from(
            vec![2],
            vec![LayerSpec::linear("fc", 2, 2, false)],
            vec![("fc.weight", Tensor::zeros(vec![2, 2]))],
        );
        assert!(forward(&net, &Tensor::zeros(vec![1, 3])).is_err());
        assert!(layer_features(&net, &Tensor::zeros(vec![1, 2]), 1).is_err());
    }

    #[test]
    fn label_range_validated() {
        let err = LabeledDataset::new(Tensor::zeros(vec![2, 1]), vec![0, 3], 3).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
    }
}
