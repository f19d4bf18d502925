use std::fmt;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::{argmax, softmax};
use crate::tensor::Tensor;

use super::{CascadeModel, MacTable};

/// Per-component exit threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Threshold {
    Value(f64),
    /// Never exit at this component. Distinct from `1.0`, which a confidence
    /// can reach.
    Disabled,
}

impl Threshold {
    /// `confidence >= threshold`.
    pub fn accepts(self, confidence: f32) -> bool {
        match self {
            Threshold::Value(t) => f64::from(confidence) >= t,
            Threshold::Disabled => false,
        }
    }

    /// Componentwise order with `Disabled` above every value.
    pub fn le(self, other: Threshold) -> bool {
        match (self, other) {
            (_, Threshold::Disabled) => true,
            (Threshold::Disabled, Threshold::Value(_)) => false,
            (Threshold::Value(a), Threshold::Value(b)) => a <= b,
        }
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Threshold::Value(v) => write!(f, "{v}"),
            Threshold::Disabled => f.write_str("DISABLED"),
        }
    }
}

/// Thresholds for every component; the last one is always `0`.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdVector(Vec<Threshold>);

impl ThresholdVector {
    pub fn new(thresholds: Vec<Threshold>) -> Result<Self> {
        let Some(last) = thresholds.last() else {
            return Err(Error::InvalidThresholds("no thresholds given".into()));
        };
        if *last != Threshold::Value(0.0) {
            return Err(Error::InvalidThresholds(format!("last threshold must be 0, got {last}")));
        }
        for (m, t) in thresholds.iter().enumerate() {
            if let Threshold::Value(v) = t {
                if !(0.0..=1.0).contains(v) {
                    return Err(Error::InvalidThresholds(format!("threshold {m} = {v} outside [0, 1]")));
                }
            }
        }
        Ok(ThresholdVector(thresholds))
    }

    /// Every component accepts any input: always exit at component 0.
    pub fn zeros(n: usize) -> Self {
        ThresholdVector(vec![Threshold::Value(0.0); n.max(1)])
    }

    /// Every branch disabled: always run the full network.
    pub fn disabled(n: usize) -> Self {
        let mut v = vec![Threshold::Disabled; n.max(1)];
        *v.last_mut().unwrap() = Threshold::Value(0.0);
        ThresholdVector(v)
    }

    pub fn as_slice(&self) -> &[Threshold] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Componentwise `self <= other`.
    pub fn le(&self, other: &ThresholdVector) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(a, b)| a.le(*b))
    }
}

/// One classifier's verdict on one input.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierOutput {
    pub logits: Vec<f32>,
    pub probs: Vec<f32>,
    pub class: usize,
    /// Maximum softmax probability.
    pub confidence: f32,
}

impl ClassifierOutput {
    /// The softmax runs in f64: differences of f32 logits are exact there,
    /// and the rounded probabilities sum to 1 within a few f32 ulps.
    pub fn from_logits(logits: &[f32]) -> Self {
        let wide: Vec<f64> = logits.iter().map(|&z| f64::from(z)).collect();
        let wide = softmax(&wide);
        let class = argmax(&wide);
        let probs: Vec<f32> = wide.iter().map(|&p| p as f32).collect();
        ClassifierOutput {
            logits: logits.to_vec(),
            confidence: probs[class],
            probs,
            class,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceTrace {
    pub predicted_class: usize,
    pub exit_component: usize,
    pub confidence: f32,
    pub macs_used: u64,
    /// Outputs of components `0..=exit_component`.
    pub outputs: Vec<ClassifierOutput>,
}

/// Yields classifier outputs for one input, component by component.
/// [`run_cascade`] asks for components in increasing order and stops at the
/// first exit.
pub trait ComponentSource {
    fn num_components(&self) -> usize;
    fn output(&mut self, m: usize) -> Result<ClassifierOutput>;
}

/// Runs a model on one input, computing each trunk segment only when asked
/// and reusing the previous segment's output.
pub struct ModelRunner<'a> {
    model: &'a CascadeModel,
    features: Tensor,
    next: usize,
}

impl<'a> ModelRunner<'a> {
    /// `input` is one standardized sample `(C, H, W)` or a batch of one.
    pub fn new(model: &'a CascadeModel, input: &Tensor) -> Result<Self> {
        let features = if input.rank() == 3 {
            let mut shape = vec![1];
            shape.extend_from_slice(input.shape());
            input.clone().reshape(shape)?
        } else {
            input.clone()
        };
        if model.check_input(&features)? != 1 {
            return Err(Error::shape("a single sample", input.shape()));
        }
        Ok(ModelRunner {
            model,
            features,
            next: 0,
        })
    }
}

impl ComponentSource for ModelRunner<'_> {
    fn num_components(&self) -> usize {
        self.model.num_components()
    }

    fn output(&mut self, m: usize) -> Result<ClassifierOutput> {
        if m != self.next {
            return Err(Error::Config(format!("component {m} requested, expected {}", self.next)));
        }
        let (features, mut outs) = self.model.component_forward(m, &self.features)?;
        self.features = features;
        self.next += 1;
        Ok(outs.remove(0))
    }
}

/// Replays outputs recorded earlier, e.g. by [`CascadeModel::all_outputs`].
pub struct RecordedOutputs<'a>(pub &'a [ClassifierOutput]);

impl ComponentSource for RecordedOutputs<'_> {
    fn num_components(&self) -> usize {
        self.0.len()
    }

    fn output(&mut self, m: usize) -> Result<ClassifierOutput> {
        self.0.get(m).cloned().ok_or(Error::ComponentOutOfRange {
            index: m,
            count: self.0.len(),
        })
    }
}

/// Early-exit inference: evaluates components in order and returns at the
/// first one whose confidence reaches its threshold.
pub fn run_cascade(thresholds: &ThresholdVector, source: &mut impl ComponentSource, macs: &MacTable) -> Result<InferenceTrace> {
    let n = source.num_components();
    if thresholds.len() != n || macs.num_components() != n {
        return Err(Error::InvalidThresholds(format!(
            "{} thresholds for {n} components",
            thresholds.len()
        )));
    }
    let mut outputs = Vec::with_capacity(n);
    for (m, t) in thresholds.as_slice().iter().enumerate() {
        let out = source.output(m)?;
        let exit = m + 1 == n || t.accepts(out.confidence);
        outputs.push(out);
        if exit {
            let last = outputs.last().unwrap();
            return Ok(InferenceTrace {
                predicted_class: last.class,
                exit_component: m,
                confidence: last.confidence,
                macs_used: macs.cumulative(m),
                outputs,
            });
        }
    }
    unreachable!("the last component always exits")
}

/// Early-exit inference of one standardized input `(C, H, W)`.
pub fn ci_infer(model: &CascadeModel, thresholds: &ThresholdVector, macs: &MacTable, input: &Tensor) -> Result<InferenceTrace> {
    run_cascade(thresholds, &mut ModelRunner::new(model, input)?, macs)
}

/// [`ci_infer`] over every sample of a batch `(N, C, H, W)`, in input order.
pub fn batch_infer(
    model: &CascadeModel,
    thresholds: &ThresholdVector,
    macs: &MacTable,
    inputs: &Tensor,
) -> Result<Vec<InferenceTrace>> {
    let n = model.check_input(inputs)?;
    (0..n)
        .into_par_iter()
        .map(|i| {
            ci_infer(model, thresholds, macs, &inputs.rows(i, i + 1))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::{build_cascade, Preset};

    fn out(conf: f32, class: usize) -> ClassifierOutput {
        ClassifierOutput {
            logits: vec![],
            probs: vec![],
            class,
            confidence: conf,
        }
    }

    fn table() -> MacTable {
        MacTable::new(&Preset::Mini.spec([1, 8, 8], 10)).unwrap()
    }

    #[test]
    fn threshold_vector_validation() {
        assert!(ThresholdVector::new(vec![]).is_err());
        assert!(ThresholdVector::new(vec![Threshold::Value(0.5)]).is_err());
        assert!(ThresholdVector::new(vec![Threshold::Value(1.5), Threshold::Value(0.0)]).is_err());
        assert!(ThresholdVector::new(vec![Threshold::Disabled]).is_err());
        assert!(ThresholdVector::new(vec![Threshold::Disabled, Threshold::Value(0.6), Threshold::Value(0.0)]).is_ok());
    }

    #[test]
    fn exit_at_first_accepting_component() {
        let macs = table();
        let rec = [out(0.62, 3), out(0.9, 4), out(0.5, 5)];
        let lo = ThresholdVector::new(vec![Threshold::Value(0.6), Threshold::Value(0.6), Threshold::Value(0.0)]).unwrap();
        let t = run_cascade(&lo, &mut RecordedOutputs(&rec), &macs).unwrap();
        assert_eq!((t.exit_component, t.predicted_class, t.macs_used), (0, 3, macs.cumulative(0)));
        let hi = ThresholdVector::new(vec![Threshold::Value(0.7), Threshold::Value(0.6), Threshold::Value(0.0)]).unwrap();
        let t2 = run_cascade(&hi, &mut RecordedOutputs(&rec), &macs).unwrap();
        assert_eq!((t2.exit_component, t2.predicted_class), (1, 4));
        assert!(t2.macs_used > t.macs_used);
    }

    #[test]
    fn equal_confidence_exits() {
        let macs = table();
        let rec = [out(1.0, 1), out(1.0, 2), out(1.0, 3)];
        let t = ThresholdVector::new(vec![Threshold::Value(1.0), Threshold::Value(1.0), Threshold::Value(0.0)]).unwrap();
        assert_eq!(run_cascade(&t, &mut RecordedOutputs(&rec), &macs).unwrap().exit_component, 0);
        let d = ThresholdVector::disabled(3);
        assert_eq!(run_cascade(&d, &mut RecordedOutputs(&rec), &macs).unwrap().exit_component, 2);
    }

    #[test]
    fn runner_matches_recorded_full_pass() {
        let model = build_cascade(Preset::Mini.spec([1, 8, 8], 10), 3).unwrap();
        let macs = MacTable::new(&model.spec).unwrap();
        let x = Tensor::from_fn(vec![4, 1, 8, 8], |i| ((i * 7919) % 13) as f32 / 6.0 - 1.0);
        let all = model.all_outputs(&x, 3).unwrap();
        let traces = batch_infer(&model, &ThresholdVector::disabled(3), &macs, &x).unwrap();
        for (rec, tr) in all.iter().zip(&traces) {
            assert_eq!(&tr.outputs, rec);
        }
        assert!(batch_infer(&model, &ThresholdVector::zeros(3), &macs, &Tensor::zeros(vec![0, 1, 8, 8]))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn single_component_cascade_is_plain_inference() {
        let mut spec = Preset::Mini.spec([1, 8, 8], 10);
        spec.components.truncate(1);
        let model = build_cascade(spec, 0).unwrap();
        let macs = MacTable::new(&model.spec).unwrap();
        let x = Tensor::from_fn(vec![1, 8, 8], |i| i as f32 / 64.0);
        let t = ci_infer(&model, &ThresholdVector::zeros(1), &macs, &x).unwrap();
        assert_eq!(t.exit_component, 0);
        assert_eq!(t.macs_used, macs.full_network());
    }
}
