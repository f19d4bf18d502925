use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::{Grads, LayerParams};

/// SGD with heavy-ball momentum: `v ← μ·v + g`, `w ← w − lr·v`.
///
/// Momentum buffers are keyed by position in the update sequence, so the
/// same parameter list must be passed on every step.
#[derive(Clone, Debug)]
pub struct Sgd<T = f32> {
    pub momentum: f64,
    buffers: Vec<Tensor<T>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {momentum}")));
        }
        Ok(Sgd {
            momentum,
            buffers: Vec::new(),
        })
    }

    /// Applies one update. `l2` adds the gradient `2·l2·w` of the weight
    /// penalty to weight tensors.
    pub fn step<'a>(
        &mut self,
        layers: impl IntoIterator<Item = (&'a mut LayerParams<T>, &'a Grads<T>)>,
        learning_rate: f64,
        l2: f64,
    ) -> Result<()> {
        let lr = T::from_f64(learning_rate);
        let mu = T::from_f64(self.momentum);
        let decay = T::from_f64(2.0 * l2);
        let mut slot = 0;
        for (params, grads) in layers {
            let mut grads = grads.iter();
            for p in params.iter_mut().filter(|p| p.kind.trainable()) {
                let Some((name, g)) = grads.next() else {
                    return Err(Error::MissingParam(format!("gradient for `{}`", p.name)));
                };
                if *name != p.name || g.shape() != p.value.shape() {
                    return Err(Error::shape(format!("gradient for `{}` {:?}", p.name, p.value.shape()), g.shape()));
                }
                if self.buffers.len() == slot {
                    self.buffers.push(Tensor::zeros(g.shape().to_vec()));
                }
                let buf = &mut self.buffers[slot];
                if buf.shape() != g.shape() {
                    return Err(Error::shape(format!("momentum buffer {:?}", buf.shape()), g.shape()));
                }
                let wd = if p.kind.decays() { decay } else { T::zero() };
                for ((w, v), &gv) in p.value.data_mut().iter_mut().zip(buf.data_mut()).zip(g.data()) {
                    *v = mu * *v + gv + wd * *w;
                    *w = *w - lr * *v;
                }
                slot += 1;
            }
            if let Some((name, _)) = grads.next() {
                return Err(Error::MissingParam(format!("parameter for gradient `{name}`")));
            }
        }
        Ok(())
    }
}
