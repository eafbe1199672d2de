use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One layer of a feed-forward architecture. Shapes below are per sample
/// (the batch dimension is implicit).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Cross-correlation (no kernel flip) over `(C, H, W)` input.
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    Flatten,
    FullyConnected {
        inputs: usize,
        outputs: usize,
    },
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            pad: 0,
        }
    }

    pub fn pool(size: usize) -> Self {
        LayerSpec::MaxPool { size, stride: size }
    }

    pub fn fc(inputs: usize, outputs: usize) -> Self {
        LayerSpec::FullyConnected { inputs, outputs }
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv2d { .. } | LayerSpec::FullyConnected { .. }
        )
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv2d { .. })
    }

    /// `(weight_shape, bias_len)` for parametric layers.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, usize)> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => Some((
                vec![out_channels, in_channels, kernel, kernel],
                out_channels,
            )),
            LayerSpec::FullyConnected { inputs, outputs } => Some((vec![outputs, inputs], outputs)),
            _ => None,
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .map(|(w, b)| w.iter().product::<usize>() + b)
            .unwrap_or(0)
    }

    /// Fan-in used by the He-style initializer.
    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            LayerSpec::FullyConnected { inputs, .. } => inputs,
            _ => 0,
        }
    }

    /// Output shape for a given input shape; `index` is only used for errors.
    pub fn output_shape(&self, index: usize, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |expected: Vec<usize>| Error::Shape {
            layer: index,
            expected,
            actual: input.to_vec(),
        };
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                if stride == 0 || kernel == 0 || out_channels == 0 {
                    return Err(Error::Architecture(format!(
                        "layer {index}: conv kernel, stride and channels must be positive"
                    )));
                }
                if input.len() != 3 || input[0] != in_channels {
                    return Err(bad(vec![in_channels, 0, 0]));
                }
                let (h, w) = (input[1] + 2 * pad, input[2] + 2 * pad);
                if h < kernel || w < kernel {
                    return Err(Error::Architecture(format!(
                        "layer {index}: kernel {kernel} larger than padded input {h}x{w}"
                    )));
                }
                Ok(vec![
                    out_channels,
                    (h - kernel) / stride + 1,
                    (w - kernel) / stride + 1,
                ])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool { size, stride } => {
                if size == 0 || stride == 0 {
                    return Err(Error::Architecture(format!(
                        "layer {index}: pool size and stride must be positive"
                    )));
                }
                if input.len() != 3 || input[1] < size || input[2] < size {
                    return Err(bad(vec![0, size, size]));
                }
                Ok(vec![
                    input[0],
                    (input[1] - size) / stride + 1,
                    (input[2] - size) / stride + 1,
                ])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::FullyConnected { inputs, outputs } => {
                if outputs == 0 {
                    return Err(Error::Architecture(format!(
                        "layer {index}: fully connected layer needs outputs"
                    )));
                }
                if input.len() != 1 || input[0] != inputs {
                    return Err(bad(vec![inputs]));
                }
                Ok(vec![outputs])
            }
        }
    }
}

/// Per-sample activation shapes, `layers.len() + 1` entries (input first).
pub fn infer_shapes(input: &[usize], layers: &[LayerSpec]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = Vec::with_capacity(layers.len() + 1);
    shapes.push(input.to_vec());
    for (i, layer) in layers.iter().enumerate() {
        let next = layer.output_shape(i, shapes.last().unwrap())?;
        shapes.push(next);
    }
    Ok(shapes)
}
