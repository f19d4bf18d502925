use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

use super::Param;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub l2_coefficient: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { l2_coefficient: 1e-4 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.l2_coefficient >= 0.0) {
            return Err(Error::Config(format!(
                "l2 coefficient must be >= 0, got {}",
                self.l2_coefficient
            )));
        }
        Ok(())
    }
}

/// Softmax of a logit vector, shifted by its maximum so `exp` cannot
/// overflow for finite input.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Index of the maximum; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Sum of squared entries over weight tensors (biases and batch-norm
/// parameters excluded).
pub fn l2_penalty<'a, T: Scalar>(params: impl IntoIterator<Item = &'a Param<T>>) -> f64 {
    params
        .into_iter()
        .filter(|p| p.kind.decays())
        .flat_map(|p| p.value.data())
        .map(|v| {
            let v = v.to_f64().unwrap_or(f64::NAN);
            v * v
        })
        .sum()
}

/// `-ln s[label] + l2 · Σ w²` over the weights in scope.
pub fn cross_entropy_loss<'a, T: Scalar>(
    probs: &[T],
    label: usize,
    params_in_scope: impl IntoIterator<Item = &'a Param<T>>,
    cfg: &LossConfig,
) -> Result<f64> {
    if label >= probs.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: probs.len(),
        });
    }
    let p = probs[label].to_f64().unwrap_or(f64::NAN);
    Ok(-p.ln() + cfg.l2_coefficient * l2_penalty(params_in_scope))
}

/// Mean cross-entropy over a batch of logits `(N, n_c)` and the gradient of
/// that mean with respect to the logits. Also returns how many rows were
/// classified correctly.
pub fn softmax_cross_entropy_grad<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>, usize)> {
    let [n, classes] = *logits.shape() else {
        return Err(Error::shape("(N, n_c)", logits.shape()));
    };
    if labels.len() != n {
        return Err(Error::shape(format!("({} labels)", labels.len()), logits.shape()));
    }
    let inv_n = T::from_f64(1.0 / n as f64);
    let mut grad = Tensor::zeros(vec![n, classes]);
    let mut total = 0.0;
    let mut correct = 0;
    for (s, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange { label, classes });
        }
        let z = &logits.data()[s * classes..(s + 1) * classes];
        let probs = softmax(z);
        if argmax(&probs) == label {
            correct += 1;
        }
        total += -probs[label].to_f64().unwrap_or(f64::NAN).ln();
        let g = &mut grad.data_mut()[s * classes..(s + 1) * classes];
        for (c, (gv, &pv)) in g.iter_mut().zip(&probs).enumerate() {
            let target = if c == label { T::one() } else { T::zero() };
            *gv = (pv - target) * inv_n;
        }
    }
    Ok((total / n as f64, grad, correct))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamKind;

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0f64, 0.0]), vec![0.5, 0.5]);
        let s = softmax(&[0.0f64, 3f64.ln()]);
        assert!((s[0] - 0.25).abs() < 1e-12 && (s[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant() {
        let z = [0.3f64, -1.2, 2.5, 0.0];
        let shifted: Vec<f64> = z.iter().map(|v| v + 1000.0).collect();
        for (a, b) in softmax(&z).iter().zip(softmax(&shifted)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[0.1f32, 0.4, 0.4, 0.1]), 1);
        assert_eq!(argmax(&[0.25f32; 4]), 0);
    }

    #[test]
    fn cross_entropy_examples() {
        let cfg0 = LossConfig { l2_coefficient: 0.0 };
        let none: [&Param<f64>; 0] = [];
        assert_eq!(cross_entropy_loss(&[0.0f64, 1.0], 1, none, &cfg0).unwrap(), 0.0);
        let uniform = [0.1f64; 10];
        let l = cross_entropy_loss(&uniform, 3, none, &cfg0).unwrap();
        assert!((l - 2.302585).abs() < 1e-6);

        let w = Param {
            name: "weight".into(),
            kind: ParamKind::Weight,
            value: Tensor::new(vec![1], vec![3.0f64]).unwrap(),
        };
        let b = Param {
            name: "bias".into(),
            kind: ParamKind::Bias,
            value: Tensor::new(vec![1], vec![100.0f64]).unwrap(),
        };
        let l = cross_entropy_loss(&[1.0f64, 0.0], 0, [&w, &b], &LossConfig::default()).unwrap();
        assert!((l - 9e-4).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let none: [&Param<f32>; 0] = [];
        assert!(matches!(
            cross_entropy_loss(&[0.5f32, 0.5], 2, none, &LossConfig::default()),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn logit_gradient_matches_finite_difference() {
        let logits = Tensor::new(vec![2, 3], vec![0.2f64, -0.4, 1.1, 0.0, 0.5, -0.3]).unwrap();
        let labels = [2, 0];
        let (_, grad, _) = softmax_cross_entropy_grad(&logits, &labels).unwrap();
        let h = 1e-6;
        for k in 0..6 {
            let mut plus = logits.clone();
            plus.data_mut()[k] += h;
            let mut minus = logits.clone();
            minus.data_mut()[k] -= h;
            let fd = (softmax_cross_entropy_grad(&plus, &labels).unwrap().0
                - softmax_cross_entropy_grad(&minus, &labels).unwrap().0)
                / (2.0 * h);
            assert!((fd - grad.data()[k]).abs() < 1e-8);
        }
    }
}
