use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{forward_layers_eval, he_init, ParamSet};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

use super::infer::ClassifierOutput;
use super::CascadeSpec;

/// A cascade: the shared trunk split into components, plus one branch
/// classifier per component.
#[derive(Clone, Debug, PartialEq)]
pub struct CascadeModel {
    pub spec: CascadeSpec,
    /// Parameters of each component's trunk segment.
    pub trunk: Vec<ParamSet>,
    /// Parameters of each branch classifier, including any convolution in
    /// the head.
    pub classifiers: Vec<ParamSet>,
}

/// Builds a He-initialized cascade. Trunk `m` draws from `(seed, 0, m)` and
/// classifier `m` from `(seed, 1, m)`.
pub fn build_cascade(spec: CascadeSpec, seed: u64) -> Result<CascadeModel> {
    spec.validate()?;
    let trunk = spec
        .components
        .iter()
        .enumerate()
        .map(|(m, c)| he_init(&c.trunk, derive_seed(seed, &[0, m as u64])))
        .collect();
    let classifiers = spec
        .components
        .iter()
        .enumerate()
        .map(|(m, c)| he_init(&c.classifier, derive_seed(seed, &[1, m as u64])))
        .collect();
    Ok(CascadeModel {
        spec,
        trunk,
        classifiers,
    })
}

impl CascadeModel {
    pub fn num_components(&self) -> usize {
        self.spec.components.len()
    }

    pub fn num_classes(&self) -> usize {
        self.spec.num_classes
    }

    fn check_component(&self, m: usize) -> Result<()> {
        if m >= self.num_components() {
            return Err(Error::ComponentOutOfRange {
                index: m,
                count: self.num_components(),
            });
        }
        Ok(())
    }

    /// Eval-mode trunk segment `m` on a batch `(N, C, H, W)`.
    pub fn trunk_forward(&self, m: usize, features: &Tensor) -> Result<Tensor> {
        self.check_component(m)?;
        forward_layers_eval(&self.spec.components[m].trunk, &self.trunk[m].layers, features)
    }

    /// Eval-mode logits `(N, n_c)` of classifier `m` on trunk output `m`.
    pub fn classifier_logits(&self, m: usize, features: &Tensor) -> Result<Tensor> {
        self.check_component(m)?;
        forward_layers_eval(&self.spec.components[m].classifier, &self.classifiers[m].layers, features)
    }

    /// Runs component `m` on the previous component's trunk output (or the
    /// standardized input for `m = 0`). Returns the trunk output that feeds
    /// component `m + 1` and one classifier output per sample.
    pub fn component_forward(&self, m: usize, features: &Tensor) -> Result<(Tensor, Vec<ClassifierOutput>)> {
        let out = self.trunk_forward(m, features)?;
        let logits = self.classifier_logits(m, &out)?;
        let n = logits.shape()[0];
        let outputs = (0..n).map(|i| ClassifierOutput::from_logits(logits.sample(i))).collect();
        Ok((out, outputs))
    }

    /// Outputs of every classifier for every sample of `images`, computed in
    /// chunks of `batch` (in parallel across chunks). `result[i][m]` belongs
    /// to sample `i`, component `m`.
    pub fn all_outputs(&self, images: &Tensor, batch: usize) -> Result<Vec<Vec<ClassifierOutput>>> {
        let n = self.check_input(images)?;
        let batch = batch.max(1);
        let chunks: Vec<(usize, usize)> = (0..n).step_by(batch).map(|s| (s, (s + batch).min(n))).collect();
        let parts: Vec<Vec<Vec<ClassifierOutput>>> = chunks
            .par_iter()
            .map(|&(s, e)| {
                let mut x = images.rows(s, e);
                let mut per_sample = vec![Vec::with_capacity(self.num_components()); e - s];
                for m in 0..self.num_components() {
                    let (next, outs) = self.component_forward(m, &x)?;
                    for (dst, o) in per_sample.iter_mut().zip(outs) {
                        dst.push(o);
                    }
                    x = next;
                }
                Ok(per_sample)
            })
            .collect::<Result<_>>()?;
        Ok(parts.into_iter().flatten().collect())
    }

    /// Checks a batch `(N, C, H, W)` against the input shape and returns `N`.
    pub fn check_input(&self, images: &Tensor) -> Result<usize> {
        match images.shape() {
            [n, rest @ ..] if rest == self.spec.input_shape => Ok(*n),
            other => {
                let [c, h, w] = self.spec.input_shape;
                Err(Error::shape(format!("(N, {c}, {h}, {w})"), other))
            }
        }
    }

    /// SHA-256 over the trunk parameters, running statistics included.
    pub fn trunk_digest(&self) -> [u8; 32] {
        digest(self.trunk.iter())
    }

    pub fn classifier_digest(&self, m: usize) -> [u8; 32] {
        digest(std::iter::once(&self.classifiers[m]))
    }

    /// SHA-256 over every parameter of the model.
    pub fn digest(&self) -> [u8; 32] {
        digest(self.trunk.iter().chain(&self.classifiers))
    }
}

fn digest<'a>(sets: impl Iterator<Item = &'a ParamSet>) -> [u8; 32] {
    let mut h = Sha256::new();
    for set in sets {
        for p in set.tensors() {
            h.update(p.name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
    }
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::{ComponentSpec, Preset};
    use crate::nn::LayerSpec;

    #[test]
    fn build_is_deterministic() {
        let spec = Preset::Mini.spec([1, 12, 12], 10);
        let a = build_cascade(spec.clone(), 5).unwrap();
        let b = build_cascade(spec.clone(), 5).unwrap();
        let c = build_cascade(spec, 6).unwrap();
        assert_eq!(a.digest(), b.digest());
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn zero_classifier_gives_uniform_output() {
        let spec = Preset::Mini.spec([1, 8, 8], 4);
        let mut model = build_cascade(spec, 1).unwrap();
        for p in model.classifiers[0].tensors_mut() {
            if p.name == "weight" && p.value.rank() == 2 {
                p.value.data_mut().fill(0.0);
            }
        }
        let x = Tensor::from_fn(vec![1, 1, 8, 8], |i| (i as f32 * 0.37).sin());
        let (_, outs) = model.component_forward(0, &x).unwrap();
        assert_eq!(outs[0].class, 0);
        assert!((outs[0].confidence - 0.25).abs() < 1e-7);
    }

    #[test]
    fn micro_model_matches_hand_computation() {
        // conv 1x1 (w=2, b=0.5) -> gap -> fc 1->2 (w=[1,-1], b=[0,1])
        let spec = CascadeSpec {
            input_shape: [1, 2, 2],
            num_classes: 2,
            blocks_per_module: 0,
            components: vec![ComponentSpec {
                trunk: vec![LayerSpec::conv(1, 1, 1, 1, 0)],
                classifier: vec![LayerSpec::GlobalAvgPool, LayerSpec::fc(1, 2)],
            }],
        };
        let mut model = build_cascade(spec, 0).unwrap();
        *model.trunk[0].layers[0].get_mut("weight").unwrap() = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        *model.trunk[0].layers[0].get_mut("bias").unwrap() = Tensor::new(vec![1], vec![0.5]).unwrap();
        *model.classifiers[0].layers[1].get_mut("weight").unwrap() = Tensor::new(vec![2, 1], vec![1.0, -1.0]).unwrap();
        *model.classifiers[0].layers[1].get_mut("bias").unwrap() = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // conv: [2.5, 4.5, 6.5, 8.5], mean 5.5, logits [5.5, -4.5]
        let (_, outs) = model.component_forward(0, &x).unwrap();
        assert_eq!(outs[0].logits, vec![5.5, -4.5]);
        assert_eq!(outs[0].class, 0);
    }

    #[test]
    fn component_out_of_range() {
        let model = build_cascade(Preset::Mini.spec([1, 8, 8], 3), 0).unwrap();
        let x = Tensor::zeros(vec![1, 1, 8, 8]);
        assert!(matches!(
            model.component_forward(3, &x),
            Err(Error::ComponentOutOfRange { index: 3, count: 3 })
        ));
    }
}
