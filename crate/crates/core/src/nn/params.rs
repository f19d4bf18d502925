use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::LayerSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    /// Batch-norm scale (gamma).
    Scale,
    /// Batch-norm shift (beta).
    Shift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Whether the L2 penalty applies.
    pub fn decays(self) -> bool {
        self == ParamKind::Weight
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T = f32> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Parameters of one layer, sorted by name.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct LayerParams<T = f32> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> LayerParams<T> {
    /// Builds the layer's parameters; `init` receives each slot of the
    /// canonical layout.
    pub fn from_layout(spec: &LayerSpec, mut init: impl FnMut(&str, ParamKind, &[usize]) -> Tensor<T>) -> Self {
        let params = layout(spec)
            .into_iter()
            .map(|(name, kind, shape)| {
                let value = init(&name, kind, &shape);
                Param { name, kind, value }
            })
            .collect();
        LayerParams { params }
    }

    /// Wraps explicit tensors after checking them against the layout.
    pub fn from_tensors(spec: &LayerSpec, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let slots = layout(spec);
        if slots.len() != tensors.len() {
            return Err(Error::Misaligned(format!(
                "{} expects {} tensors, got {}",
                spec.name(),
                slots.len(),
                tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(slots.len());
        for ((name, kind, shape), value) in slots.into_iter().zip(tensors) {
            if value.shape() != shape.as_slice() {
                return Err(Error::Misaligned(format!(
                    "{} `{name}` expects shape {shape:?}, got {:?}",
                    spec.name(),
                    value.shape()
                )));
            }
            params.push(Param { name, kind, value });
        }
        Ok(LayerParams { params })
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .iter()
            .find(|p| p.name == name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .iter_mut()
            .find(|p| p.name == name)
            .map(|p| &mut p.value)
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }
}

/// Parameters for a sequence of layers, aligned index-for-index.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet<T = f32> {
    pub layers: Vec<LayerParams<T>>,
}

impl<T: Scalar> ParamSet<T> {
    /// All tensors in canonical order: layer index, then parameter name.
    pub fn tensors(&self) -> impl Iterator<Item = &Param<T>> {
        self.layers.iter().flat_map(|l| l.iter())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.iter_mut())
    }

    pub fn num_trainable(&self) -> usize {
        self.tensors()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.len())
            .sum()
    }
}

/// Canonical `(name, kind, shape)` slots of a layer, sorted by name.
pub(crate) fn layout(spec: &LayerSpec) -> Vec<(String, ParamKind, Vec<usize>)> {
    let mut out = Vec::new();
    match *spec {
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            ..
        } => conv_slots(&mut out, "", in_channels, out_channels, kernel_h, kernel_w),
        LayerSpec::BatchNorm { channels } => bn_slots(&mut out, "", channels),
        LayerSpec::FullyConnected {
            in_features,
            out_features,
        } => {
            out.push(("bias".into(), ParamKind::Bias, vec![out_features]));
            out.push(("weight".into(), ParamKind::Weight, vec![out_features, in_features]));
        }
        LayerSpec::ResidualBlock { channels, batch_norm } => {
            if batch_norm {
                bn_slots(&mut out, "bn1.", channels);
                bn_slots(&mut out, "bn2.", channels);
            }
            conv_slots(&mut out, "conv1.", channels, channels, 3, 3);
            conv_slots(&mut out, "conv2.", channels, channels, 3, 3);
        }
        LayerSpec::ResidualBlockDown {
            in_channels,
            out_channels,
            batch_norm,
        } => {
            if batch_norm {
                bn_slots(&mut out, "bn1.", out_channels);
                bn_slots(&mut out, "bn2.", out_channels);
            }
            conv_slots(&mut out, "conv1.", in_channels, out_channels, 3, 3);
            conv_slots(&mut out, "conv2.", out_channels, out_channels, 3, 3);
            conv_slots(&mut out, "skip.", in_channels, out_channels, 1, 1);
        }
        LayerSpec::Relu | LayerSpec::GlobalAvgPool => {}
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

fn conv_slots(
    out: &mut Vec<(String, ParamKind, Vec<usize>)>,
    prefix: &str,
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
) {
    out.push((format!("{prefix}bias"), ParamKind::Bias, vec![cout]));
    out.push((format!("{prefix}weight"), ParamKind::Weight, vec![cout, cin, kh, kw]));
}

fn bn_slots(out: &mut Vec<(String, ParamKind, Vec<usize>)>, prefix: &str, channels: usize) {
    out.push((format!("{prefix}beta"), ParamKind::Shift, vec![channels]));
    out.push((format!("{prefix}gamma"), ParamKind::Scale, vec![channels]));
    out.push((format!("{prefix}running_mean"), ParamKind::RunningMean, vec![channels]));
    out.push((format!("{prefix}running_var"), ParamKind::RunningVar, vec![channels]));
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_alphabetical() {
        let spec = LayerSpec::ResidualBlockDown {
            in_channels: 4,
            out_channels: 8,
            batch_norm: true,
        };
        let names: Vec<_> = layout(&spec).into_iter().map(|s| s.0).collect();
        let mut sorted = names.clone();
        sorted.sort();
        assert_eq!(names, sorted);
        assert_eq!(names.first().unwrap(), "bn1.beta");
        assert_eq!(names.last().unwrap(), "skip.weight");
        assert_eq!(names.len(), 14);
    }

    #[test]
    fn from_tensors_checks_shapes() {
        let spec = LayerSpec::fc(64, 10);
        let ok = vec![Tensor::<f32>::zeros(vec![10]), Tensor::zeros(vec![10, 64])];
        assert!(LayerParams::from_tensors(&spec, ok).is_ok());
        let bad = vec![Tensor::<f32>::zeros(vec![10]), Tensor::zeros(vec![100, 64])];
        assert!(matches!(LayerParams::from_tensors(&spec, bad), Err(Error::Misaligned(_))));
    }
}
