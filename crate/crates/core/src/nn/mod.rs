//! Layers, parameters, loss and optimizer.
//!
//! Activations are batched: a layer whose per-sample input is `(C, H, W)`
//! consumes `(N, C, H, W)`. Shape rules and MAC counts below are stated per
//! sample.

mod init;
mod layer;
mod loss;
pub(crate) mod ops;
mod params;
mod sgd;

pub use init::he_init;
pub use layer::{
    backward_layers, forward_layers, forward_layers_eval, layer_backward, layer_forward,
    layer_forward_eval, Grads, LayerCache,
};
pub use loss::{argmax, cross_entropy_loss, l2_penalty, softmax, softmax_cross_entropy_grad, LossConfig};
pub use params::{LayerParams, Param, ParamKind, ParamSet};
pub(crate) use params::layout;
pub use sgd::Sgd;

use crate::error::{Error, Result};

/// Batch-norm epsilon added to the variance.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous value in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel_h: usize,
        kernel_w: usize,
        stride: usize,
        padding: usize,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    /// `conv3x3 → [bn] → relu → conv3x3 → [bn]`, added to the input.
    ResidualBlock {
        channels: usize,
        batch_norm: bool,
    },
    /// Like [`LayerSpec::ResidualBlock`] but the first convolution has
    /// stride 2 and the skip path is a strided 1×1 convolution.
    ResidualBlockDown {
        in_channels: usize,
        out_channels: usize,
        batch_norm: bool,
    },
    GlobalAvgPool,
    FullyConnected {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel_h: kernel,
            kernel_w: kernel,
            stride,
            padding,
        }
    }

    pub fn fc(in_features: usize, out_features: usize) -> Self {
        LayerSpec::FullyConnected {
            in_features,
            out_features,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Relu => "relu",
            LayerSpec::ResidualBlock { .. } => "resblock",
            LayerSpec::ResidualBlockDown { .. } => "resblock_down",
            LayerSpec::GlobalAvgPool => "gap",
            LayerSpec::FullyConnected { .. } => "fc",
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                stride,
                padding,
            } => {
                let (h, w) = expect_chw(input, in_channels)?;
                let (ho, wo) = conv_out_hw(h, w, kernel_h, kernel_w, stride, padding)
                    .ok_or_else(|| Error::shape(format!("spatial dims >= kernel {kernel_h}x{kernel_w}"), input))?;
                Ok(vec![out_channels, ho, wo])
            }
            LayerSpec::BatchNorm { channels } => {
                if input.is_empty() || input[0] != channels {
                    return Err(Error::shape(format!("({channels}, ..)"), input));
                }
                Ok(input.to_vec())
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::ResidualBlock { channels, .. } => {
                let (h, w) = expect_chw(input, channels)?;
                Ok(vec![channels, h, w])
            }
            LayerSpec::ResidualBlockDown {
                in_channels,
                out_channels,
                ..
            } => {
                let (h, w) = expect_chw(input, in_channels)?;
                let (ho, wo) = conv_out_hw(h, w, 3, 3, 2, 1)
                    .ok_or_else(|| Error::shape("spatial dims >= 2", input))?;
                Ok(vec![out_channels, ho, wo])
            }
            LayerSpec::GlobalAvgPool => {
                if input.len() != 3 {
                    return Err(Error::shape("(C, H, W)", input));
                }
                Ok(vec![input[0]])
            }
            LayerSpec::FullyConnected {
                in_features,
                out_features,
            } => {
                if input != [in_features] {
                    return Err(Error::shape(format!("({in_features})"), input));
                }
                Ok(vec![out_features])
            }
        }
    }

    /// Multiply-accumulates for one sample. Only convolutions (including
    /// skip projections) and fully connected layers count.
    pub fn macs(&self, input: &[usize]) -> Result<u64> {
        let out = self.output_shape(input)?;
        let p = |dims: &[usize]| dims.iter().map(|&d| d as u128).product::<u128>();
        let total: u128 = match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel_h,
                kernel_w,
                ..
            } => p(&[out[1], out[2], out_channels, in_channels, kernel_h, kernel_w]),
            LayerSpec::ResidualBlock { channels, .. } => 2 * p(&[out[1], out[2], channels, channels, 9]),
            LayerSpec::ResidualBlockDown {
                in_channels,
                out_channels,
                ..
            } => {
                let hw = [out[1], out[2]];
                p(&[hw[0], hw[1], out_channels, in_channels, 9])
                    + p(&[hw[0], hw[1], out_channels, out_channels, 9])
                    + p(&[hw[0], hw[1], out_channels, in_channels])
            }
            LayerSpec::FullyConnected {
                in_features,
                out_features,
            } => p(&[in_features, out_features]),
            LayerSpec::BatchNorm { .. } | LayerSpec::Relu | LayerSpec::GlobalAvgPool => 0,
        };
        u64::try_from(total).map_err(|_| Error::InvalidSpec(format!("{} MAC count overflows u64", self.name())))
    }

    /// Checks a batched input against this layer and returns the batched
    /// output shape.
    pub fn batched_output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let Some((&n, sample)) = input.split_first() else {
            return Err(Error::shape("batched input", input));
        };
        let mut out = vec![n];
        out.extend(self.output_shape(sample).map_err(|e| rebatch(e, n))?);
        Ok(out)
    }
}

/// Runs the shape rules over a chain of layers.
pub fn chain_output_shape(specs: &[LayerSpec], input: &[usize]) -> Result<Vec<usize>> {
    let mut shape = input.to_vec();
    for (i, spec) in specs.iter().enumerate() {
        shape = spec.output_shape(&shape).map_err(|e| e.at_layer(i))?;
    }
    Ok(shape)
}

pub(crate) fn conv_out_hw(
    h: usize,
    w: usize,
    kernel_h: usize,
    kernel_w: usize,
    stride: usize,
    padding: usize,
) -> Option<(usize, usize)> {
    if stride == 0 || h + 2 * padding < kernel_h || w + 2 * padding < kernel_w {
        return None;
    }
    Some((
        (h + 2 * padding - kernel_h) / stride + 1,
        (w + 2 * padding - kernel_w) / stride + 1,
    ))
}

fn expect_chw(input: &[usize], channels: usize) -> Result<(usize, usize)> {
    match *input {
        [c, h, w] if c == channels && h > 0 && w > 0 => Ok((h, w)),
        _ => Err(Error::shape(format!("({channels}, H, W)"), input)),
    }
}

fn rebatch(e: Error, n: usize) -> Error {
    match e {
        Error::Shape {
            layer,
            expected,
            actual,
        } => {
            let mut full = vec![n];
            full.extend(actual);
            Error::Shape {
                layer,
                expected: format!("(N, {})", expected.trim_start_matches('(').trim_end_matches(')')),
                actual: full,
            }
        }
        other => other,
    }
}
