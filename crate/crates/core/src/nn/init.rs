use rand_distr::{Distribution, Normal};

use crate::rng::rng_from;
use crate::tensor::{Scalar, Tensor};

use super::{LayerParams, LayerSpec, ParamKind, ParamSet};

/// He-normal initialization: weights ~ N(0, √(2/k)) with `k` the fan-in of
/// a neuron; biases and shifts 0, scales 1, running mean 0, running var 1.
///
/// Draws happen in canonical parameter order, so a seed fully determines
/// the result.
pub fn he_init<T: Scalar>(specs: &[LayerSpec], seed: u64) -> ParamSet<T> {
    let mut rng = rng_from(seed, &[]);
    let layers = specs
        .iter()
        .map(|spec| {
            LayerParams::from_layout(spec, |_, kind, shape| match kind {
                ParamKind::Weight => {
                    let fan_in: usize = shape[1..].iter().product();
                    let normal = Normal::new(0.0, he_std(fan_in)).expect("finite std");
                    Tensor::from_fn(shape.to_vec(), |_| T::from_f64(normal.sample(&mut rng)))
                }
                ParamKind::Scale | ParamKind::RunningVar => Tensor::full(shape.to_vec(), T::one()),
                ParamKind::Bias | ParamKind::Shift | ParamKind::RunningMean => Tensor::zeros(shape.to_vec()),
            })
        })
        .collect();
    ParamSet { layers }
}

pub fn he_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}
