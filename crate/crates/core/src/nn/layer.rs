use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::ops::{self, BnTrainCache, ConvGeom};
use super::{conv_out_hw, LayerParams, LayerSpec, Mode, BN_MOMENTUM};

/// Trainable-parameter gradients of one layer, in canonical name order.
pub type Grads<T = f32> = Vec<(String, Tensor<T>)>;

/// State saved by a forward pass for the matching backward pass.
#[derive(Clone, Debug)]
pub struct LayerCache<T = f32>(Cache<T>);

impl<T> LayerCache<T> {
    pub fn is_train(&self) -> bool {
        !matches!(self.0, Cache::Eval)
    }
}

#[derive(Clone, Debug)]
enum Cache<T> {
    Eval,
    Conv { input: Tensor<T> },
    BatchNorm(BnTrainCache<T>),
    Relu { input: Tensor<T> },
    Residual(Box<ResidualCache<T>>),
    Gap { input_shape: Vec<usize> },
    Fc { input: Tensor<T> },
}

#[derive(Clone, Debug)]
struct ResidualCache<T> {
    input: Tensor<T>,
    bn1: Option<BnTrainCache<T>>,
    pre_relu: Tensor<T>,
    mid: Tensor<T>,
    bn2: Option<BnTrainCache<T>>,
}

type StatUpdates<T> = Vec<(String, Tensor<T>)>;

/// Forward pass of one layer. In [`Mode::Train`] batch norm uses batch
/// statistics and updates its running statistics in `params`.
pub fn layer_forward<T: Scalar>(
    spec: &LayerSpec,
    params: &mut LayerParams<T>,
    input: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, LayerCache<T>)> {
    let (out, cache, updates) = forward_impl(spec, params, input, mode == Mode::Train)?;
    for (name, value) in updates {
        *params.get_mut(&name)? = value;
    }
    Ok((out, LayerCache(cache)))
}

/// Eval-mode forward pass over shared parameters.
pub fn layer_forward_eval<T: Scalar>(spec: &LayerSpec, params: &LayerParams<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(forward_impl(spec, params, input, false)?.0)
}

/// Backward pass of one layer: returns the input gradient and the
/// gradients of the layer's trainable parameters.
pub fn layer_backward<T: Scalar>(
    spec: &LayerSpec,
    params: &LayerParams<T>,
    cache: Option<&LayerCache<T>>,
    output_grad: &Tensor<T>,
) -> Result<(Tensor<T>, Grads<T>)> {
    let cache = &cache.ok_or(Error::MissingCache)?.0;
    if matches!(cache, Cache::Eval) {
        return Err(Error::EvalCache);
    }
    let mut grads = BTreeMap::new();
    let dx = match (spec, cache) {
        (LayerSpec::Conv2d { .. }, Cache::Conv { input }) => {
            check_grad(spec, input.shape(), output_grad)?;
            conv_backward(spec, params, "", input, output_grad, &mut grads)?
        }
        (LayerSpec::BatchNorm { .. }, Cache::BatchNorm(bn)) => {
            check_same(bn.xhat.shape(), output_grad)?;
            bn_backward(params, "", bn, output_grad, &mut grads)?
        }
        (LayerSpec::Relu, Cache::Relu { input }) => {
            check_same(input.shape(), output_grad)?;
            ops::relu_backward(input, output_grad)
        }
        (LayerSpec::GlobalAvgPool, Cache::Gap { input_shape }) => {
            check_grad(spec, input_shape, output_grad)?;
            ops::global_avg_pool_backward(input_shape, output_grad)
        }
        (LayerSpec::FullyConnected { .. }, Cache::Fc { input }) => {
            check_grad(spec, input.shape(), output_grad)?;
            let (dx, dw, db) = ops::fc_backward(input, params.get("weight")?, output_grad);
            grads.insert("bias".to_string(), db);
            grads.insert("weight".to_string(), dw);
            dx
        }
        (LayerSpec::ResidualBlock { .. } | LayerSpec::ResidualBlockDown { .. }, Cache::Residual(rc)) => {
            check_grad(spec, rc.input.shape(), output_grad)?;
            residual_backward(spec, params, rc, output_grad, &mut grads)?
        }
        _ => return Err(Error::CacheMismatch(spec.name())),
    };
    Ok((dx, grads.into_iter().collect()))
}

/// Forward through a chain of layers, wrapping shape errors with the index
/// of the offending layer.
pub fn forward_layers<T: Scalar>(
    specs: &[LayerSpec],
    params: &mut [LayerParams<T>],
    input: &Tensor<T>,
    mode: Mode,
) -> Result<(Tensor<T>, Vec<LayerCache<T>>)> {
    let mut caches = Vec::with_capacity(specs.len());
    let mut x = input.clone();
    for (i, (spec, p)) in specs.iter().zip(params.iter_mut()).enumerate() {
        let (y, c) = layer_forward(spec, p, &x, mode).map_err(|e| e.at_layer(i))?;
        caches.push(c);
        x = y;
    }
    Ok((x, caches))
}

pub fn forward_layers_eval<T: Scalar>(specs: &[LayerSpec], params: &[LayerParams<T>], input: &Tensor<T>) -> Result<Tensor<T>> {
    let mut x = input.clone();
    for (i, (spec, p)) in specs.iter().zip(params).enumerate() {
        x = layer_forward_eval(spec, p, &x).map_err(|e| e.at_layer(i))?;
    }
    Ok(x)
}

/// Backward through a chain; returns the input gradient and per-layer
/// parameter gradients aligned with `specs`.
pub fn backward_layers<T: Scalar>(
    specs: &[LayerSpec],
    params: &[LayerParams<T>],
    caches: &[LayerCache<T>],
    output_grad: &Tensor<T>,
) -> Result<(Tensor<T>, Vec<Grads<T>>)> {
    if caches.len() != specs.len() {
        return Err(Error::MissingCache);
    }
    let mut grads: Vec<Grads<T>> = vec![Vec::new(); specs.len()];
    let mut g = output_grad.clone();
    for i in (0..specs.len()).rev() {
        let (dx, pg) = layer_backward(&specs[i], &params[i], Some(&caches[i]), &g).map_err(|e| e.at_layer(i))?;
        grads[i] = pg;
        g = dx;
    }
    Ok((g, grads))
}

fn check_grad<T: Scalar>(spec: &LayerSpec, input_shape: &[usize], dy: &Tensor<T>) -> Result<()> {
    let expected = spec.batched_output_shape(input_shape)?;
    check_same(&expected, dy)
}

fn check_same<T: Scalar>(expected: &[usize], dy: &Tensor<T>) -> Result<()> {
    if dy.shape() != expected {
        return Err(Error::shape(format!("output gradient {expected:?}"), dy.shape()));
    }
    Ok(())
}

fn forward_impl<T: Scalar>(
    spec: &LayerSpec,
    params: &LayerParams<T>,
    x: &Tensor<T>,
    train: bool,
) -> Result<(Tensor<T>, Cache<T>, StatUpdates<T>)> {
    spec.batched_output_shape(x.shape())?;
    let mut updates = Vec::new();
    let wrap = |c: Cache<T>| if train { c } else { Cache::Eval };
    let (y, cache) = match *spec {
        LayerSpec::Conv2d { .. } => {
            let y = conv_forward(spec, params, "", x)?;
            (y, wrap(Cache::Conv { input: x.clone() }))
        }
        LayerSpec::BatchNorm { .. } => {
            let (y, c) = bn_forward(params, "", x, train, &mut updates)?;
            (y, c.map(Cache::BatchNorm).unwrap_or(Cache::Eval))
        }
        LayerSpec::Relu => (ops::relu(x), wrap(Cache::Relu { input: x.clone() })),
        LayerSpec::GlobalAvgPool => (
            ops::global_avg_pool(x),
            wrap(Cache::Gap {
                input_shape: x.shape().to_vec(),
            }),
        ),
        LayerSpec::FullyConnected { .. } => {
            let y = ops::fc_forward(x, params.get("weight")?, params.get("bias")?);
            (y, wrap(Cache::Fc { input: x.clone() }))
        }
        LayerSpec::ResidualBlock { channels, batch_norm } => {
            residual_forward(params, x, channels, channels, 1, batch_norm, train, &mut updates)?
        }
        LayerSpec::ResidualBlockDown {
            in_channels,
            out_channels,
            batch_norm,
        } => residual_forward(params, x, in_channels, out_channels, 2, batch_norm, train, &mut updates)?,
    };
    Ok((y, cache, updates))
}

fn geom(spec: &LayerSpec, input: &[usize]) -> Result<ConvGeom> {
    let LayerSpec::Conv2d {
        in_channels,
        out_channels,
        kernel_h,
        kernel_w,
        stride,
        padding,
    } = *spec
    else {
        unreachable!("geom called on {}", spec.name())
    };
    let (h, w) = (input[2], input[3]);
    let (ho, wo) = conv_out_hw(h, w, kernel_h, kernel_w, stride, padding)
        .ok_or_else(|| Error::shape(format!("spatial dims >= kernel {kernel_h}x{kernel_w}"), input))?;
    Ok(ConvGeom {
        cin: in_channels,
        h,
        w,
        cout: out_channels,
        kh: kernel_h,
        kw: kernel_w,
        stride,
        pad: padding,
        ho,
        wo,
    })
}

fn conv_forward<T: Scalar>(spec: &LayerSpec, params: &LayerParams<T>, prefix: &str, x: &Tensor<T>) -> Result<Tensor<T>> {
    let g = geom(spec, x.shape())?;
    let w = params.get(&format!("{prefix}weight"))?;
    let b = params.get(&format!("{prefix}bias"))?;
    Ok(ops::conv2d_forward(&g, x, w, b))
}

fn conv_backward<T: Scalar>(
    spec: &LayerSpec,
    params: &LayerParams<T>,
    prefix: &str,
    x: &Tensor<T>,
    dy: &Tensor<T>,
    grads: &mut BTreeMap<String, Tensor<T>>,
) -> Result<Tensor<T>> {
    let g = geom(spec, x.shape())?;
    let (dx, dw, db) = ops::conv2d_backward(&g, x, params.get(&format!("{prefix}weight"))?, dy);
    grads.insert(format!("{prefix}bias"), db);
    grads.insert(format!("{prefix}weight"), dw);
    Ok(dx)
}

fn bn_forward<T: Scalar>(
    params: &LayerParams<T>,
    prefix: &str,
    x: &Tensor<T>,
    train: bool,
    updates: &mut StatUpdates<T>,
) -> Result<(Tensor<T>, Option<BnTrainCache<T>>)> {
    let gamma = params.get(&format!("{prefix}gamma"))?;
    let beta = params.get(&format!("{prefix}beta"))?;
    let rm_name = format!("{prefix}running_mean");
    let rv_name = format!("{prefix}running_var");
    let rm = params.get(&rm_name)?;
    let rv = params.get(&rv_name)?;
    if !train {
        return Ok((ops::batchnorm_eval(x, gamma, beta, rm, rv), None));
    }
    let (y, cache, mean, var) = ops::batchnorm_train(x, gamma, beta);
    let keep = T::from_f64(BN_MOMENTUM);
    let take = T::from_f64(1.0 - BN_MOMENTUM);
    let blend = |old: &Tensor<T>, batch: &[T]| {
        Tensor::from_fn(old.shape().to_vec(), |i| keep * old.data()[i] + take * batch[i])
    };
    updates.push((rm_name, blend(rm, &mean)));
    updates.push((rv_name, blend(rv, &var)));
    Ok((y, Some(cache)))
}

fn bn_backward<T: Scalar>(
    params: &LayerParams<T>,
    prefix: &str,
    cache: &BnTrainCache<T>,
    dy: &Tensor<T>,
    grads: &mut BTreeMap<String, Tensor<T>>,
) -> Result<Tensor<T>> {
    let (dx, dgamma, dbeta) = ops::batchnorm_backward(cache, params.get(&format!("{prefix}gamma"))?, dy);
    grads.insert(format!("{prefix}beta"), dbeta);
    grads.insert(format!("{prefix}gamma"), dgamma);
    Ok(dx)
}

fn block_convs(cin: usize, cout: usize, stride: usize) -> (LayerSpec, LayerSpec, LayerSpec) {
    (
        LayerSpec::conv(cin, cout, 3, stride, 1),
        LayerSpec::conv(cout, cout, 3, 1, 1),
        LayerSpec::conv(cin, cout, 1, stride, 0),
    )
}

#[allow(clippy::too_many_arguments)]
fn residual_forward<T: Scalar>(
    params: &LayerParams<T>,
    x: &Tensor<T>,
    cin: usize,
    cout: usize,
    stride: usize,
    batch_norm: bool,
    train: bool,
    updates: &mut StatUpdates<T>,
) -> Result<(Tensor<T>, Cache<T>)> {
    let (c1, c2, skip) = block_convs(cin, cout, stride);
    let h = conv_forward(&c1, params, "conv1.", x)?;
    let (pre_relu, bn1) = if batch_norm {
        bn_forward(params, "bn1.", &h, train, updates)?
    } else {
        (h, None)
    };
    let mid = ops::relu(&pre_relu);
    let h = conv_forward(&c2, params, "conv2.", &mid)?;
    let (mut y, bn2) = if batch_norm {
        bn_forward(params, "bn2.", &h, train, updates)?
    } else {
        (h, None)
    };
    if stride == 1 {
        y.add_assign(x)?;
    } else {
        y.add_assign(&conv_forward(&skip, params, "skip.", x)?)?;
    }
    let cache = if train {
        Cache::Residual(Box::new(ResidualCache {
            input: x.clone(),
            bn1,
            pre_relu,
            mid,
            bn2,
        }))
    } else {
        Cache::Eval
    };
    Ok((y, cache))
}

fn residual_backward<T: Scalar>(
    spec: &LayerSpec,
    params: &LayerParams<T>,
    rc: &ResidualCache<T>,
    dy: &Tensor<T>,
    grads: &mut BTreeMap<String, Tensor<T>>,
) -> Result<Tensor<T>> {
    let (cin, cout, stride) = match *spec {
        LayerSpec::ResidualBlock { channels, .. } => (channels, channels, 1),
        LayerSpec::ResidualBlockDown {
            in_channels,
            out_channels,
            ..
        } => (in_channels, out_channels, 2),
        _ => unreachable!(),
    };
    let (c1, c2, skip) = block_convs(cin, cout, stride);
    let g = match &rc.bn2 {
        Some(bn) => bn_backward(params, "bn2.", bn, dy, grads)?,
        None => dy.clone(),
    };
    let g = conv_backward(&c2, params, "conv2.", &rc.mid, &g, grads)?;
    let g = ops::relu_backward(&rc.pre_relu, &g);
    let g = match &rc.bn1 {
        Some(bn) => bn_backward(params, "bn1.", bn, &g, grads)?,
        None => g,
    };
    let mut dx = conv_backward(&c1, params, "conv1.", &rc.input, &g, grads)?;
    if stride == 1 {
        dx.add_assign(dy)?;
    } else {
        dx.add_assign(&conv_backward(&skip, params, "skip.", &rc.input, dy, grads)?)?;
    }
    Ok(dx)
}
