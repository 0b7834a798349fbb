use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{log_sum_exp, LabeledDataset};
use crate::netcore::{LayerKind, LayerSpec, NetworkGraph};
use crate::tensor::{Precision, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate is multiplied by `lr_decay`.
    pub milestones: Vec<usize>,
    pub lr_decay: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: vec![32, 32],
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            milestones: Vec::new(),
            lr_decay: 0.1,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.batch_size > 0
            && self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.lr_decay > 0.0
            && self.hidden.iter().all(|&h| h > 0);
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid training config {self:?}")))
        }
    }

    fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = self.milestones.iter().filter(|&&m| m <= epoch).count();
        self.learning_rate * self.lr_decay.powi(decays as i32)
    }
}

/// A `Linear -> ReLU -> ... -> Linear` network with weights drawn uniformly
/// from `±1/sqrt(fan_in)`.
pub fn init_mlp(
    input_dim: usize,
    hidden: &[usize],
    classes: usize,
    seed: u64,
    precision: Precision,
) -> Result<NetworkGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    init_with_rng(input_dim, hidden, classes, &mut rng, precision)
}

fn init_with_rng(
    input_dim: usize,
    hidden: &[usize],
    classes: usize,
    rng: &mut ChaCha8Rng,
    precision: Precision,
) -> Result<NetworkGraph> {
    let dims: Vec<usize> = std::iter::once(input_dim)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(classes))
        .collect();
    let mut layers = Vec::new();
    let mut weights = BTreeMap::new();
    for (i, pair) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let spec = LayerSpec::linear(format!("fc{}", i + 1), fan_in, fan_out, true);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = Tensor::from_fn(vec![fan_out, fan_in], |_| rng.random_range(-bound..bound));
        let b = Tensor::from_fn(vec![fan_out], |_| rng.random_range(-bound..bound));
        weights.insert(spec.weight_key(), w);
        weights.insert(spec.bias_key(), b);
        layers.push(spec);
        if i + 2 < dims.len() {
            layers.push(LayerSpec::relu(format!("relu{}", i + 1)));
        }
    }
    NetworkGraph::new(vec![input_dim], layers, weights, precision)
}

/// Dense layer in a flat working representation.
#[derive(Debug, Clone)]
struct Dense {
    weight_key: String,
    bias_key: Option<String>,
    inputs: usize,
    outputs: usize,
    w: Vec<f64>,
    b: Option<Vec<f64>>,
    relu: bool,
}

#[derive(Debug, Clone)]
struct Mlp {
    layers: Vec<Dense>,
}

struct Grads {
    w: Vec<Vec<f64>>,
    b: Vec<Option<Vec<f64>>>,
}

impl Mlp {
    /// Accepts `Linear (ReLU)? Linear (ReLU)? ...`; the last layer must be linear.
    fn from_network(net: &NetworkGraph) -> Result<Self> {
        let mut layers: Vec<Dense> = Vec::new();
        for (idx, spec) in net.layers().iter().enumerate() {
            match spec.kind {
                LayerKind::Linear { in_dim, out_dim, bias } => layers.push(Dense {
                    weight_key: spec.weight_key(),
                    bias_key: bias.then(|| spec.bias_key()),
                    inputs: in_dim,
                    outputs: out_dim,
                    w: net.weight(idx).expect("weight").data().to_vec(),
                    b: net.bias(idx).map(|b| b.data().to_vec()),
                    relu: false,
                }),
                LayerKind::Relu => match layers.last_mut() {
                    Some(last) if !last.relu => last.relu = true,
                    _ => {
                        return Err(Error::Unsupported(format!(
                            "ReLU `{}` must directly follow a linear layer",
                            spec.name
                        )))
                    }
                },
                _ => {
                    return Err(Error::Unsupported(format!(
                        "the trainer handles Linear/ReLU networks only, found `{}`",
                        spec.name
                    )))
                }
            }
        }
        match layers.last() {
            Some(last) if !last.relu => Ok(Mlp { layers }),
            _ => Err(Error::Unsupported("network must end with a linear layer".into())),
        }
    }

    fn into_network(self, template: &NetworkGraph) -> Result<NetworkGraph> {
        let mut weights = BTreeMap::new();
        for layer in self.layers {
            weights.insert(layer.weight_key, Tensor::new(vec![layer.outputs, layer.inputs], layer.w)?);
            if let (Some(key), Some(b)) = (layer.bias_key, layer.b) {
                weights.insert(key, Tensor::new(vec![layer.outputs], b)?);
            }
        }
        NetworkGraph::new(
            template.input_shape().to_vec(),
            template.layers().to_vec(),
            weights,
            template.precision(),
        )
    }

    /// Mean cross-entropy over the batch and its gradient.
    fn loss_and_grads(&self, x: &[f64], labels: &[usize]) -> (f64, Grads) {
        let batch = labels.len();
        // activations[0] is the input; activations[l + 1] is layer l's output
        // after its activation.
        let mut activations: Vec<Vec<f64>> = vec![x.to_vec()];
        for layer in &self.layers {
            let input = activations.last().expect("input");
            let mut out = vec![0.0; batch * layer.outputs];
            for s in 0..batch {
                let xs = &input[s * layer.inputs..(s + 1) * layer.inputs];
                for o in 0..layer.outputs {
                    let row = &layer.w[o * layer.inputs..(o + 1) * layer.inputs];
                    let mut acc = row.iter().zip(xs).fold(0.0, |acc, (w, x)| acc + w * x);
                    if let Some(b) = &layer.b {
                        acc += b[o];
                    }
                    out[s * layer.outputs + o] = if layer.relu { acc.max(0.0) } else { acc };
                }
            }
            activations.push(out);
        }

        let classes = self.layers.last().expect("layers").outputs;
        let logits = activations.last().expect("logits");
        let mut loss = 0.0;
        let mut delta = vec![0.0; batch * classes];
        for (s, &label) in labels.iter().enumerate() {
            let row = &logits[s * classes..(s + 1) * classes];
            let lse = log_sum_exp(row);
            loss += lse - row[label];
            for c in 0..classes {
                let p = (row[c] - lse).exp();
                delta[s * classes + c] = (p - f64::from(u8::from(c == label))) / batch as f64;
            }
        }

        let mut gw = vec![Vec::new(); self.layers.len()];
        let mut gb = vec![None; self.layers.len()];
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let input = &activations[l];
            let mut dw = vec![0.0; layer.outputs * layer.inputs];
            for s in 0..batch {
                let xs = &input[s * layer.inputs..(s + 1) * layer.inputs];
                for o in 0..layer.outputs {
                    let d = delta[s * layer.outputs + o];
                    if d != 0.0 {
                        for (g, x) in dw[o * layer.inputs..(o + 1) * layer.inputs].iter_mut().zip(xs) {
                            *g += d * x;
                        }
                    }
                }
            }
            gw[l] = dw;
            if layer.b.is_some() {
                let mut db = vec![0.0; layer.outputs];
                for s in 0..batch {
                    for o in 0..layer.outputs {
                        db[o] += delta[s * layer.outputs + o];
                    }
                }
                gb[l] = Some(db);
            }
            if l == 0 {
                break;
            }
            // Back through this layer's weights, then the previous layer's ReLU.
            let prev_relu = self.layers[l - 1].relu;
            let mut next = vec![0.0; batch * layer.inputs];
            for s in 0..batch {
                let dst = &mut next[s * layer.inputs..(s + 1) * layer.inputs];
                for o in 0..layer.outputs {
                    let d = delta[s * layer.outputs + o];
                    if d != 0.0 {
                        let row = &layer.w[o * layer.inputs..(o + 1) * layer.inputs];
                        for (g, w) in dst.iter_mut().zip(row) {
                            *g += d * w;
                        }
                    }
                }
                if prev_relu {
                    for (g, a) in dst.iter_mut().zip(&input[s * layer.inputs..(s + 1) * layer.inputs]) {
                        if *a <= 0.0 {
                            *g = 0.0;
                        }
                    }
                }
            }
            delta = next;
        }
        (loss / batch as f64, Grads { w: gw, b: gb })
    }
}

/// Mean cross-entropy of `net` on a batch and the gradient with respect to
/// every parameter tensor, keyed like the network's weights.
pub fn loss_and_gradients(
    net: &NetworkGraph,
    inputs: &Tensor,
    labels: &[usize],
) -> Result<(f64, BTreeMap<String, Tensor>)> {
    let mlp = Mlp::from_network(net)?;
    if inputs.shape().len() != 2 || inputs.shape()[1] != mlp.layers[0].inputs || inputs.dim0() != labels.len() {
        return Err(Error::Dimension(format!(
            "inputs {:?} with {} labels do not fit the network",
            inputs.shape(),
            labels.len()
        )));
    }
    let classes = mlp.layers.last().expect("layers").outputs;
    if labels.iter().any(|&l| l >= classes) {
        return Err(Error::Validation("label out of range".into()));
    }
    let (loss, grads) = mlp.loss_and_grads(inputs.data(), labels);
    let mut out = BTreeMap::new();
    for ((layer, gw), gb) in mlp.layers.iter().zip(grads.w).zip(grads.b) {
        out.insert(layer.weight_key.clone(), Tensor::new(vec![layer.outputs, layer.inputs], gw)?);
        if let (Some(key), Some(gb)) = (&layer.bias_key, gb) {
            out.insert(key.clone(), Tensor::new(vec![layer.outputs], gb)?);
        }
    }
    Ok((loss, out))
}

/// Train an MLP with minibatch SGD (momentum, weight decay, step schedule).
///
/// Fully determined by `config.seed`: the same seed yields bit-identical
/// weights. Zero epochs returns the initialization.
pub fn train_mlp(config: &TrainConfig, dataset: &LabeledDataset) -> Result<NetworkGraph> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Validation("cannot train on an empty dataset".into()));
    }
    let &[input_dim] = dataset.sample_shape() else {
        return Err(Error::Unsupported(format!(
            "the trainer needs flat inputs, got samples of shape {:?}",
            dataset.sample_shape()
        )));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = init_with_rng(input_dim, &config.hidden, dataset.num_classes(), &mut rng, config.precision)?;
    if config.epochs == 0 {
        return Ok(init);
    }
    let mut mlp = Mlp::from_network(&init)?;
    let mut velocity_w: Vec<Vec<f64>> = mlp.layers.iter().map(|l| vec![0.0; l.w.len()]).collect();
    let mut velocity_b: Vec<Vec<f64>> = mlp
        .layers
        .iter()
        .map(|l| vec![0.0; l.b.as_ref().map_or(0, Vec::len)])
        .collect();

    let inputs = dataset.inputs().data();
    let labels = dataset.labels();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut batch_x = Vec::with_capacity(config.batch_size * input_dim);
    let mut batch_y = Vec::with_capacity(config.batch_size);
    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            batch_x.clear();
            batch_y.clear();
            for &i in chunk {
                batch_x.extend_from_slice(&inputs[i * input_dim..(i + 1) * input_dim]);
                batch_y.push(labels[i]);
            }
            let (_, grads) = mlp.loss_and_grads(&batch_x, &batch_y);
            for (l, layer) in mlp.layers.iter_mut().enumerate() {
                sgd_step(&mut layer.w, &grads.w[l], &mut velocity_w[l], lr, config);
                if let (Some(b), Some(gb)) = (layer.b.as_mut(), grads.b[l].as_ref()) {
                    sgd_step(b, gb, &mut velocity_b[l], lr, config);
                }
            }
        }
    }
    mlp.into_network(&init)
}

fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, config: &TrainConfig) {
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        let g = g + config.weight_decay * *p;
        *v = config.momentum * *v + g;
        *p -= lr * *v;
    }
}
