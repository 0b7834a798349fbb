#![allow(dead_code)]

use std::collections::BTreeMap;

use featmerge::{LayerKind, LayerSpec, NetworkGraph, Precision, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Fully connected ReLU network with Gaussian weights.
pub fn random_mlp(rng: &mut ChaCha8Rng, widths: &[usize], bias: bool, precision: Precision) -> NetworkGraph {
    let mut layers = Vec::new();
    let mut weights = BTreeMap::new();
    let last = widths.len() - 2;
    for (i, pair) in widths.windows(2).enumerate() {
        let name = format!("fc{}", i + 1);
        let spec = LayerSpec::linear(&name, pair[0], pair[1], bias);
        let scale = 1.0 / (pair[0] as f64).sqrt();
        weights.insert(spec.weight_key(), gaussian(rng, vec![pair[1], pair[0]], scale));
        if bias {
            weights.insert(spec.bias_key(), gaussian(rng, vec![pair[1]], 0.1));
        }
        layers.push(spec);
        if i < last {
            layers.push(LayerSpec::relu(&format!("relu{}", i + 1)));
        }
    }
    NetworkGraph::new(vec![widths[0]], layers, weights, precision).unwrap()
}

/// Small VGG-style network on `[3, 8, 8]` inputs:
/// conv-relu-pool, conv-relu, flatten, linear-relu, linear.
pub fn random_cnn(rng: &mut ChaCha8Rng, c1: usize, c2: usize, hidden: usize, classes: usize) -> NetworkGraph {
    let layers = vec![
        LayerSpec::conv2d("conv1", 3, c1, 3, 1, 1, true),
        LayerSpec::relu("relu1"),
        LayerSpec::new("pool1", LayerKind::MaxPool2d { kernel: 2, stride: 2 }),
        LayerSpec::conv2d("conv2", c1, c2, 3, 1, 1, true),
        LayerSpec::relu("relu2"),
        LayerSpec::new("flatten", LayerKind::Flatten),
        LayerSpec::linear("fc1", c2 * 16, hidden, true),
        LayerSpec::relu("relu3"),
        LayerSpec::linear("fc2", hidden, classes, true),
    ];
    let mut weights = BTreeMap::new();
    weights.insert("conv1.weight".into(), gaussian(rng, vec![c1, 3, 3, 3], 0.3));
    weights.insert("conv1.bias".into(), gaussian(rng, vec![c1], 0.1));
    weights.insert("conv2.weight".into(), gaussian(rng, vec![c2, c1, 3, 3], 0.2));
    weights.insert("conv2.bias".into(), gaussian(rng, vec![c2], 0.1));
    weights.insert("fc1.weight".into(), gaussian(rng, vec![hidden, c2 * 16], 0.1));
    weights.insert("fc1.bias".into(), gaussian(rng, vec![hidden], 0.1));
    weights.insert("fc2.weight".into(), gaussian(rng, vec![classes, hidden], 0.3));
    weights.insert("fc2.bias".into(), gaussian(rng, vec![classes], 0.1));
    NetworkGraph::new(vec![3, 8, 8], layers, weights, Precision::F64).unwrap()
}

pub fn random_batch(rng: &mut ChaCha8Rng, n: usize, sample_shape: &[usize]) -> Tensor {
    let mut shape = vec![n];
    shape.extend_from_slice(sample_shape);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Pairwise distance by a plain double loop over raw weight storage: producer
/// row then bias, then for each consumer (in order) each output row's block.
pub fn naive_distance_matrix(
    net: &NetworkGraph,
    producer: usize,
    consumers: &[(usize, usize)],
    include_bias: bool,
) -> Vec<Vec<f64>> {
    let w = net.weight(producer).unwrap();
    let dim = w.shape()[0];
    let row_len = w.numel() / dim;
    let bias = if include_bias { net.bias(producer) } else { None };
    let mut out = vec![vec![0.0; dim]; dim];
    for m in 0..dim {
        for n in 0..dim {
            if m == n {
                continue;
            }
            let mut rows = 0.0;
            for k in 0..row_len {
                let d = w.data()[m * row_len + k] - w.data()[n * row_len + k];
                rows += d * d;
            }
            if let Some(b) = bias {
                let d = b.data()[m] - b.data()[n];
                rows += d * d;
            }
            let mut cols = 0.0;
            for &(layer, inner) in consumers {
                let cw = net.weight(layer).unwrap();
                let outs = cw.shape()[0];
                let stride = cw.numel() / outs;
                for o in 0..outs {
                    for k in 0..inner {
                        let d = cw.data()[o * stride + m * inner + k] - cw.data()[o * stride + n * inner + k];
                        cols += d * d;
                    }
                }
            }
            out[m][n] = rows + cols;
        }
    }
    out
}

/// Forward pass of a bias-carrying ReLU MLP written out with nested loops.
pub fn mlp_forward_oracle(net: &NetworkGraph, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let linear: Vec<usize> = net.parametric_layers().collect();
    for (pos, &l) in linear.iter().enumerate() {
        let w = net.weight(l).unwrap();
        let (outs, ins) = (w.shape()[0], w.shape()[1]);
        let mut next = vec![0.0; outs];
        for (o, slot) in next.iter_mut().enumerate() {
            let mut acc = net.bias(l).map_or(0.0, |b| b.data()[o]);
            for i in 0..ins {
                acc += w.data()[o * ins + i] * h[i];
            }
            *slot = if pos + 1 < linear.len() { acc.max(0.0) } else { acc };
        }
        h = next;
    }
    h
}

/// Direct (non-im2col) zero-padded convolution of one `[C, H, W]` sample.
pub fn conv_oracle(
    input: &[f64],
    shape: [usize; 3],
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    padding: usize,
) -> (Vec<f64>, [usize; 3]) {
    let [c, h, w] = shape;
    let [oc, ic, kh, kw] = [weight.shape()[0], weight.shape()[1], weight.shape()[2], weight.shape()[3]];
    assert_eq!(ic, c);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; oc * oh * ow];
    for o in 0..oc {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = bias.map_or(0.0, |b| b.data()[o]);
                for i in 0..ic {
                    for dy in 0..kh {
                        for dx in 0..kw {
                            let iy = (y * stride + dy) as isize - padding as isize;
                            let ix = (x * stride + dx) as isize - padding as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            let v = input[i * h * w + iy as usize * w + ix as usize];
                            acc += weight.data()[((o * ic + i) * kh + dy) * kw + dx] * v;
                        }
                    }
                }
                out[(o * oh + y) * ow + x] = acc;
            }
        }
    }
    (out, [oc, oh, ow])
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
