use std::f64::consts::TAU;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::LabeledDataset;
use crate::tensor::Tensor;

/// Two-class, two-dimensional toy problems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticKind {
    /// Unit disks centred at (-2, 0) and (2, 0).
    Blobs,
    /// Label is the XOR of the coordinate signs.
    XorGrid,
    /// Disk of radius 0.6 inside an annulus 1.0..1.4.
    Ring,
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(SyntheticKind::Blobs),
            "xor-grid" | "xor" => Ok(SyntheticKind::XorGrid),
            "ring" => Ok(SyntheticKind::Ring),
            other => Err(Error::Validation(format!("unknown dataset kind `{other}`"))),
        }
    }
}

/// `n` samples with labels alternating `0, 1, 0, ...`; Gaussian noise of
/// standard deviation `noise` is added to both coordinates. Values are
/// stored at `f32` precision.
pub fn make_synthetic_dataset(kind: SyntheticKind, n: usize, noise: f64, seed: u64) -> Result<LabeledDataset> {
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::Validation(format!("noise {noise} must be finite and non-negative")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (point, label) = match kind {
            SyntheticKind::Blobs => {
                let label = i % 2;
                let center = if label == 0 { -2.0 } else { 2.0 };
                let (x, y) = disk_point(&mut rng, 0.0, 1.0);
                ([center + x, y], label)
            }
            SyntheticKind::XorGrid => {
                let quadrant = i % 4;
                let sx = if quadrant & 1 == 0 { 1.0 } else { -1.0 };
                let sy = if quadrant & 2 == 0 { 1.0 } else { -1.0 };
                let x = sx * rng.random_range(0.1..1.0);
                let y = sy * rng.random_range(0.1..1.0);
                ([x, y], usize::from((sx > 0.0) != (sy > 0.0)))
            }
            SyntheticKind::Ring => {
                let label = i % 2;
                let (x, y) = if label == 0 {
                    disk_point(&mut rng, 0.0, 0.6)
                } else {
                    disk_point(&mut rng, 1.0, 1.4)
                };
                ([x, y], label)
            }
        };
        for v in point {
            let jitter: f64 = rng.sample(StandardNormal);
            data.push((v + noise * jitter) as f32 as f64);
        }
        labels.push(label);
    }
    LabeledDataset::new(Tensor::new(vec![n, 2], data)?, labels, 2)
}

/// Uniform (by area) point with radius in `[inner, outer]`.
fn disk_point(rng: &mut ChaCha8Rng, inner: f64, outer: f64) -> (f64, f64) {
    let u: f64 = rng.random();
    let r = (inner * inner + u * (outer * outer - inner * inner)).sqrt();
    let theta = rng.random::<f64>() * TAU;
    (r * theta.cos(), r * theta.sin())
}
