use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Layer operation. Parametric kinds own a `<name>.weight` tensor and, when
/// `bias` is set, a `<name>.bias` tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerKind {
    Linear {
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    },
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    },
    Relu,
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    AvgPool2d {
        kernel: usize,
        stride: usize,
    },
    GlobalAvgPool,
    Flatten,
    /// Adds the output of layer `source` to this layer's input.
    ResidualAdd {
        source: usize,
    },
}

impl LayerKind {
    pub fn is_parametric(&self) -> bool {
        matches!(self, LayerKind::Linear { .. } | LayerKind::Conv2d { .. })
    }

    pub fn has_bias(&self) -> bool {
        match self {
            LayerKind::Linear { bias, .. } | LayerKind::Conv2d { bias, .. } => *bias,
            _ => false,
        }
    }

    /// Output features (rows of the weight) of a parametric layer.
    pub fn out_features(&self) -> Option<usize> {
        match self {
            LayerKind::Linear { out_dim, .. } => Some(*out_dim),
            LayerKind::Conv2d { out_ch, .. } => Some(*out_ch),
            _ => None,
        }
    }

    /// Expected weight shape of a parametric layer.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match *self {
            LayerKind::Linear { in_dim, out_dim, .. } => Some(vec![out_dim, in_dim]),
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel_h,
                kernel_w,
                ..
            } => Some(vec![out_ch, in_ch, kernel_h, kernel_w]),
            _ => None,
        }
    }

    /// Shape of this layer's output given its input shape (batch axis excluded).
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let spatial = |name: &str| -> Result<(usize, usize, usize)> {
            match *input {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(Error::Dimension(format!(
                    "{name} expects a [C, H, W] input, got {input:?}"
                ))),
            }
        };
        match *self {
            LayerKind::Linear { in_dim, out_dim, .. } => {
                if input != [in_dim] {
                    return Err(Error::Dimension(format!(
                        "linear layer expects input [{in_dim}], got {input:?}"
                    )));
                }
                Ok(vec![out_dim])
            }
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel_h,
                kernel_w,
                stride,
                padding,
                ..
            } => {
                let (c, h, w) = spatial("conv2d")?;
                if c != in_ch {
                    return Err(Error::Dimension(format!(
                        "conv2d expects {in_ch} input channels, got {c}"
                    )));
                }
                if stride == 0 {
                    return Err(Error::Structural("conv2d stride must be positive".into()));
                }
                let oh = window_out(h + 2 * padding, kernel_h, stride)?;
                let ow = window_out(w + 2 * padding, kernel_w, stride)?;
                Ok(vec![out_ch, oh, ow])
            }
            LayerKind::Relu | LayerKind::ResidualAdd { .. } => Ok(input.to_vec()),
            LayerKind::MaxPool2d { kernel, stride } | LayerKind::AvgPool2d { kernel, stride } => {
                let (c, h, w) = spatial("pool")?;
                if stride == 0 || kernel == 0 {
                    return Err(Error::Structural("pool kernel and stride must be positive".into()));
                }
                Ok(vec![c, window_out(h, kernel, stride)?, window_out(w, kernel, stride)?])
            }
            LayerKind::GlobalAvgPool => {
                let (c, _, _) = spatial("global average pool")?;
                Ok(vec![c])
            }
            LayerKind::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

fn window_out(extent: usize, kernel: usize, stride: usize) -> Result<usize> {
    if kernel == 0 || extent < kernel {
        return Err(Error::Dimension(format!(
            "window of size {kernel} does not fit extent {extent}"
        )));
    }
    Ok((extent - kernel) / stride + 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerSpec {
            name: name.into(),
            kind,
        }
    }

    pub fn linear(name: impl Into<String>, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        Self::new(name, LayerKind::Linear { in_dim, out_dim, bias })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv2d(
        name: impl Into<String>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        Self::new(
            name,
            LayerKind::Conv2d {
                in_ch,
                out_ch,
                kernel_h: kernel,
                kernel_w: kernel,
                stride,
                padding,
                bias,
            },
        )
    }

    pub fn relu(name: impl Into<String>) -> Self {
        Self::new(name, LayerKind::Relu)
    }

    pub fn weight_key(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias_key(&self) -> String {
        format!("{}.bias", self.name)
    }
}
