//! Backtrack training: the whole trunk with the last classifier first, then
//! every earlier branch classifier alone on the frozen trunk.

use std::fmt;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;

use crate::cascade::CascadeModel;
use crate::data::{augment, Dataset};
use crate::error::{Error, Result};
use crate::nn::{
    backward_layers, forward_layers, forward_layers_eval, l2_penalty, softmax_cross_entropy_grad, Grads, Mode, Sgd,
};
use crate::rng::rng_from;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Epochs per branch classifier; the trunk phase runs `ceil(1.25·n)`.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// `(fraction of the phase's epochs, multiplier)` steps, fractions
    /// strictly increasing. Before the first step the multiplier is 1.
    pub schedule: Vec<(f64, f64)>,
    pub momentum: f64,
    pub l2: f64,
    pub seed: u64,
    pub augment: bool,
    /// Memory allowed for caching frozen-trunk features during branch
    /// phases; larger feature sets are recomputed per batch.
    pub feature_cache_bytes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 4,
            batch_size: 128,
            learning_rate: 0.1,
            schedule: vec![(0.5, 0.1), (0.75, 0.01)],
            momentum: 0.9,
            l2: 1e-4,
            seed: 0,
            augment: false,
            feature_cache_bytes: 1 << 30,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be >= 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be >= 1".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(self.l2 >= 0.0) {
            return bad(format!("l2 must be >= 0, got {}", self.l2));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        let mut prev = -1.0;
        for &(f, mult) in &self.schedule {
            if !(0.0..=1.0).contains(&f) || f <= prev {
                return bad(format!("schedule fractions must increase within [0, 1], got {f}"));
            }
            if !(mult > 0.0) {
                return bad(format!("schedule multipliers must be > 0, got {mult}"));
            }
            prev = f;
        }
        Ok(())
    }

    /// Learning rate for `epoch` (0-based) of a phase lasting `total` epochs.
    pub fn learning_rate_at(&self, epoch: usize, total: usize) -> f64 {
        let progress = epoch as f64 / total as f64;
        let mult = self
            .schedule
            .iter()
            .take_while(|(f, _)| *f <= progress)
            .last()
            .map_or(1.0, |&(_, m)| m);
        self.learning_rate * mult
    }
}

/// `ceil(1.25·n)`.
pub fn trunk_phase_epochs(epochs: usize) -> usize {
    (5 * epochs).div_ceil(4)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Trunk plus the last classifier.
    Trunk,
    /// Branch classifier `m` on the frozen trunk.
    Branch(usize),
}

impl Phase {
    fn tag(self) -> u64 {
        match self {
            Phase::Trunk => 0,
            Phase::Branch(m) => 1 + m as u64,
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Trunk => f.write_str("A"),
            Phase::Branch(m) => write!(f, "B:{m}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub phase: Phase,
    pub epoch: usize,
    /// Mean cross-entropy plus the L2 term of the parameters being trained.
    pub loss: f64,
    /// Training accuracy of the batches as they were seen.
    pub accuracy: f64,
}

impl fmt::Display for EpochStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "phase={} epoch={} loss={:.6} acc={:.6}",
            self.phase, self.epoch, self.loss, self.accuracy
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseReport {
    pub phase: Phase,
    pub epochs: Vec<EpochStats>,
    /// SHA-256 of every parameter outside the phase's scope, before and
    /// after the phase. Only recorded for branch phases.
    pub frozen_digest: Option<([u8; 32], [u8; 32])>,
}

impl PhaseReport {
    pub fn frozen_unchanged(&self) -> bool {
        self.frozen_digest.is_none_or(|(a, b)| a == b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub phases: Vec<PhaseReport>,
    /// Accuracy of every classifier on the evaluation set, when one was given.
    pub eval_accuracy: Option<Vec<f64>>,
    pub wall_clock: Duration,
}

impl TrainReport {
    pub fn epochs_per_phase(&self) -> Vec<usize> {
        self.phases.iter().map(|p| p.epochs.len()).collect()
    }
}

/// Trains `model` in place. `log` receives every finished epoch.
pub fn ci_bt_train(
    model: &mut CascadeModel,
    data: &Dataset,
    cfg: &TrainConfig,
    eval: Option<&Dataset>,
    mut log: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    cfg.validate()?;
    check_dataset(model, data)?;
    let start = Instant::now();
    let n = model.num_components();
    let mut phases = Vec::with_capacity(n);

    let total = trunk_phase_epochs(cfg.epochs);
    let mut sgd = Sgd::new(cfg.momentum)?;
    let mut epochs = Vec::with_capacity(total);
    for epoch in 0..total {
        let stats = train_epoch(model, Phase::Trunk, data, cfg, epoch, total, &mut sgd, None)?;
        log(&stats);
        epochs.push(stats);
    }
    phases.push(PhaseReport {
        phase: Phase::Trunk,
        epochs,
        frozen_digest: None,
    });

    for m in 0..n.saturating_sub(1) {
        let before = frozen_digest(model, m);
        let cached = cache_features(model, m, data, cfg)?;
        let mut sgd = Sgd::new(cfg.momentum)?;
        let mut epochs = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            let stats = train_epoch(model, Phase::Branch(m), data, cfg, epoch, cfg.epochs, &mut sgd, cached.as_ref())?;
            log(&stats);
            epochs.push(stats);
        }
        phases.push(PhaseReport {
            phase: Phase::Branch(m),
            epochs,
            frozen_digest: Some((before, frozen_digest(model, m))),
        });
    }

    let eval_accuracy = eval.map(|ds| component_accuracies(model, ds)).transpose()?;
    Ok(TrainReport {
        phases,
        eval_accuracy,
        wall_clock: start.elapsed(),
    })
}

fn check_dataset(model: &CascadeModel, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    model.check_input(&data.images)?;
    if let Some(&label) = data.labels.iter().find(|&&l| l >= model.num_classes()) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: model.num_classes(),
        });
    }
    Ok(())
}

/// Digest of the trunk and every classifier except `m`.
pub fn frozen_digest(model: &CascadeModel, m: usize) -> [u8; 32] {
    let mut others = model.clone();
    others.classifiers.remove(m);
    others.digest()
}

/// Trunk output of component `m` for every sample, in eval mode, when it
/// fits the cache budget and inputs are not augmented.
fn cache_features(model: &CascadeModel, m: usize, data: &Dataset, cfg: &TrainConfig) -> Result<Option<Tensor>> {
    if cfg.augment {
        return Ok(None);
    }
    let shapes = model.spec.validate()?;
    let per: usize = shapes[m].iter().product();
    if per.saturating_mul(data.len()).saturating_mul(4) > cfg.feature_cache_bytes {
        return Ok(None);
    }
    frozen_features(model, m, &data.images, cfg.batch_size).map(Some)
}

/// Eval-mode trunk output of component `m` for a batch of inputs.
pub fn frozen_features(model: &CascadeModel, m: usize, images: &Tensor, chunk: usize) -> Result<Tensor> {
    let n = model.check_input(images)?;
    let mut data = Vec::new();
    let mut shape = Vec::new();
    for s in (0..n).step_by(chunk.max(1)) {
        let mut x = images.rows(s, (s + chunk).min(n));
        for j in 0..=m {
            x = model.trunk_forward(j, &x)?;
        }
        shape = x.shape().to_vec();
        data.extend(x.into_data());
    }
    if shape.is_empty() {
        shape = vec![0];
    }
    shape[0] = n;
    Tensor::new(shape, data)
}

/// One shuffled pass over `data` for `phase`; the order depends only on
/// `(seed, phase, epoch)`.
#[allow(clippy::too_many_arguments)]
pub fn train_epoch(
    model: &mut CascadeModel,
    phase: Phase,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
    total_epochs: usize,
    sgd: &mut Sgd,
    cached: Option<&Tensor>,
) -> Result<EpochStats> {
    check_dataset(model, data)?;
    let n_comp = model.num_components();
    if let Phase::Branch(m) = phase {
        if m + 1 >= n_comp {
            return Err(Error::ComponentOutOfRange {
                index: m,
                count: n_comp.saturating_sub(1),
            });
        }
    }
    let lr = cfg.learning_rate_at(epoch, total_epochs);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng_from(cfg.seed, &[phase.tag(), epoch as u64]));
    let mut aug_rng = rng_from(cfg.seed, &[phase.tag(), epoch as u64, 1]);

    let (mut loss_sum, mut correct) = (0.0, 0usize);
    for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        let mut inputs = || {
            let mut x = data.images.gather(idx);
            if cfg.augment {
                augment(&mut x, &mut aug_rng);
            }
            x
        };
        let (loss, hits) = match phase {
            Phase::Trunk => trunk_step(model, inputs(), &labels, sgd, lr, cfg.l2)?,
            Phase::Branch(m) => {
                let features = match cached {
                    Some(f) => f.gather(idx),
                    None => {
                        let mut x = inputs();
                        for j in 0..=m {
                            x = model.trunk_forward(j, &x)?;
                        }
                        x
                    }
                };
                branch_step(model, m, &features, &labels, sgd, lr, cfg.l2)?
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                phase: phase.to_string(),
                epoch,
                batch: b,
                loss,
            });
        }
        loss_sum += loss * idx.len() as f64;
        correct += hits;
    }
    Ok(EpochStats {
        phase,
        epoch,
        loss: loss_sum / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
    })
}

fn trunk_step(model: &mut CascadeModel, x: Tensor, labels: &[usize], sgd: &mut Sgd, lr: f64, l2: f64) -> Result<(f64, usize)> {
    let n = model.num_components();
    let last = n - 1;
    let comps = &model.spec.components;
    let mut caches = Vec::with_capacity(n);
    let mut x = x;
    for (m, comp) in comps.iter().enumerate() {
        let (y, c) = forward_layers(&comp.trunk, &mut model.trunk[m].layers, &x, Mode::Train)?;
        caches.push(c);
        x = y;
    }
    let head = &comps[last].classifier;
    let (logits, head_cache) = forward_layers(head, &mut model.classifiers[last].layers, &x, Mode::Train)?;
    let (ce, grad, hits) = softmax_cross_entropy_grad(&logits, labels)?;
    let penalty = l2 * l2_penalty(model.trunk.iter().chain(&model.classifiers[last..]).flat_map(|s| s.tensors()));

    let (mut g, head_grads) = backward_layers(head, &model.classifiers[last].layers, &head_cache, &grad)?;
    let mut trunk_grads: Vec<Vec<Grads>> = vec![Vec::new(); n];
    for m in (0..n).rev() {
        let (dx, grads) = backward_layers(&comps[m].trunk, &model.trunk[m].layers, &caches[m], &g)?;
        trunk_grads[m] = grads;
        g = dx;
    }
    let trunk = model
        .trunk
        .iter_mut()
        .zip(&trunk_grads)
        .flat_map(|(set, grads)| set.layers.iter_mut().zip(grads));
    let head_layers = model.classifiers[last].layers.iter_mut().zip(&head_grads);
    sgd.step(trunk.chain(head_layers), lr, l2)?;
    Ok((ce + penalty, hits))
}

fn branch_step(
    model: &mut CascadeModel,
    m: usize,
    features: &Tensor,
    labels: &[usize],
    sgd: &mut Sgd,
    lr: f64,
    l2: f64,
) -> Result<(f64, usize)> {
    let head = &model.spec.components[m].classifier;
    let (logits, cache) = forward_layers(head, &mut model.classifiers[m].layers, features, Mode::Train)?;
    let (ce, grad, hits) = softmax_cross_entropy_grad(&logits, labels)?;
    let penalty = l2 * l2_penalty(model.classifiers[m].tensors());
    let (_, grads) = backward_layers(head, &model.classifiers[m].layers, &cache, &grad)?;
    sgd.step(model.classifiers[m].layers.iter_mut().zip(&grads), lr, l2)?;
    Ok((ce + penalty, hits))
}

/// Eval-mode accuracy of classifier `m`.
pub fn evaluate(model: &CascadeModel, m: usize, data: &Dataset) -> Result<f64> {
    if m >= model.num_components() {
        return Err(Error::ComponentOutOfRange {
            index: m,
            count: model.num_components(),
        });
    }
    if data.is_empty() {
        return Ok(0.0);
    }
    let features = frozen_features(model, m, &data.images, 256)?;
    let logits = forward_layers_eval(&model.spec.components[m].classifier, &model.classifiers[m].layers, &features)?;
    let correct = (0..data.len())
        .filter(|&i| crate::nn::argmax(logits.sample(i)) == data.labels[i])
        .count();
    Ok(correct as f64 / data.len() as f64)
}

/// Eval-mode accuracy of every classifier.
pub fn component_accuracies(model: &CascadeModel, data: &Dataset) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let outputs = model.all_outputs(&data.images, 256)?;
    Ok((0..model.num_components())
        .map(|m| {
            let hits = outputs.iter().zip(&data.labels).filter(|(o, &y)| o[m].class == y).count();
            hits as f64 / data.len() as f64
        })
        .collect())
}

/// Mean eval-mode cross-entropy of classifier `m` plus the L2 term of the
/// parameters `phase` trains.
pub fn evaluation_loss(model: &CascadeModel, phase: Phase, data: &Dataset, l2: f64) -> Result<f64> {
    let m = match phase {
        Phase::Trunk => model.num_components() - 1,
        Phase::Branch(m) => m,
    };
    let features = frozen_features(model, m, &data.images, 256)?;
    let logits = forward_layers_eval(&model.spec.components[m].classifier, &model.classifiers[m].layers, &features)?;
    let (ce, _, _) = softmax_cross_entropy_grad(&logits, &data.labels)?;
    let scope: Vec<_> = match phase {
        Phase::Trunk => model.trunk.iter().chain(&model.classifiers[m..]).flat_map(|s| s.tensors()).collect(),
        Phase::Branch(_) => model.classifiers[m].tensors().collect(),
    };
    Ok(ce + l2 * l2_penalty(scope))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::{build_cascade, ArchConfig, CascadeSpec, ComponentSpec, Preset};
    use crate::nn::LayerSpec;

    #[test]
    fn trunk_phase_epoch_rounding() {
        assert_eq!(trunk_phase_epochs(4), 5);
        assert_eq!(trunk_phase_epochs(160), 200);
        assert_eq!(trunk_phase_epochs(1), 2);
        assert_eq!(trunk_phase_epochs(5), 7);
    }

    #[test]
    fn schedule_steps() {
        let cfg = TrainConfig {
            learning_rate: 1.0,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..8).map(|e| cfg.learning_rate_at(e, 8)).collect();
        assert_eq!(lrs, vec![1.0, 1.0, 1.0, 1.0, 0.1, 0.1, 0.01, 0.01]);
    }

    #[test]
    fn config_validation() {
        let bad = [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
            TrainConfig { schedule: vec![(0.5, 0.1), (0.5, 0.01)], ..Default::default() },
            TrainConfig { schedule: vec![(0.5, 0.0)], ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    fn toy_separable(n: usize) -> Dataset {
        // Two classes separated by the sign of the mean pixel.
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = i % 2;
            let base = if label == 0 { -1.0 } else { 1.0 };
            for p in 0..16 {
                images.push(base + 0.3 * (((i * 31 + p * 7) % 13) as f32 / 13.0 - 0.5));
            }
            labels.push(label);
        }
        Dataset::new(Tensor::new(vec![n, 1, 4, 4], images).unwrap(), labels, 2, "toy").unwrap()
    }

    fn tiny_spec(batch_norm: bool) -> CascadeSpec {
        CascadeSpec::resnet(&ArchConfig {
            base_width: 4,
            blocks_per_module: 1,
            input_shape: [1, 4, 4],
            num_classes: 2,
            enhanced_classifiers: true,
            batch_norm,
        })
    }

    #[test]
    fn separable_toy_reaches_full_accuracy() {
        let spec = CascadeSpec {
            input_shape: [1, 4, 4],
            num_classes: 2,
            blocks_per_module: 0,
            components: vec![ComponentSpec {
                trunk: vec![LayerSpec::conv(1, 4, 3, 1, 1), LayerSpec::Relu],
                classifier: vec![LayerSpec::GlobalAvgPool, LayerSpec::fc(4, 2)],
            }],
        };
        let mut model = build_cascade(spec, 2).unwrap();
        let data = toy_separable(50);
        let cfg = TrainConfig {
            epochs: 16,
            batch_size: 10,
            learning_rate: 0.05,
            ..Default::default()
        };
        let report = ci_bt_train(&mut model, &data, &cfg, Some(&data), |_| {}).unwrap();
        assert_eq!(report.epochs_per_phase(), vec![20]);
        assert_eq!(report.eval_accuracy.unwrap(), vec![1.0]);
    }

    #[test]
    fn branch_phases_leave_everything_else_untouched() {
        let mut model = build_cascade(tiny_spec(true), 4).unwrap();
        let data = toy_separable(40);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..Default::default()
        };
        let mut lines = Vec::new();
        let report = ci_bt_train(&mut model, &data, &cfg, None, |s| lines.push(s.to_string())).unwrap();
        assert_eq!(report.epochs_per_phase(), vec![3, 2, 2]);
        assert!(report.phases.iter().all(PhaseReport::frozen_unchanged));
        assert!(report.phases[1].frozen_digest.is_some());
        assert!(lines[0].starts_with("phase=A epoch=0 loss="));
        assert!(lines[3].starts_with("phase=B:0 epoch=0 loss="));
        assert!(lines[6].starts_with("phase=B:1 epoch=1 loss="));
    }

    #[test]
    fn cached_features_match_recomputation() {
        let data = toy_separable(24);
        let base = build_cascade(tiny_spec(true), 9).unwrap();
        let run = |cache_bytes: usize| {
            let mut model = base.clone();
            let cfg = TrainConfig {
                epochs: 1,
                batch_size: 5,
                feature_cache_bytes: cache_bytes,
                ..Default::default()
            };
            ci_bt_train(&mut model, &data, &cfg, None, |_| {}).unwrap();
            model
        };
        assert_eq!(run(0), run(usize::MAX));
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut model = build_cascade(tiny_spec(false), 1).unwrap();
        let data = toy_separable(20);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            batch_size: 6,
            ..Default::default()
        };
        let before = model.clone();
        let mut sgd = Sgd::new(cfg.momentum).unwrap();
        let stats = train_epoch(&mut model, Phase::Trunk, &data, &cfg, 0, 5, &mut sgd, None).unwrap();
        assert_eq!(model, before);
        let eval = evaluation_loss(&model, Phase::Trunk, &data, cfg.l2).unwrap();
        assert!((stats.loss - eval).abs() < 1e-6, "{} vs {eval}", stats.loss);
        let mut sgd = Sgd::new(cfg.momentum).unwrap();
        let b = train_epoch(&mut model, Phase::Branch(0), &data, &cfg, 0, 4, &mut sgd, None).unwrap();
        let eval = evaluation_loss(&model, Phase::Branch(0), &data, cfg.l2).unwrap();
        assert!((b.loss - eval).abs() < 1e-6);
    }

    #[test]
    fn same_seed_phase_epoch_gives_same_loss() {
        let base = build_cascade(Preset::Mini.spec([1, 4, 4], 2), 0).unwrap();
        let data = toy_separable(16);
        let cfg = TrainConfig {
            batch_size: 4,
            ..Default::default()
        };
        let run = || {
            let mut model = base.clone();
            let mut sgd = Sgd::new(0.9).unwrap();
            train_epoch(&mut model, Phase::Trunk, &data, &cfg, 3, 5, &mut sgd, None).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut model = build_cascade(tiny_spec(false), 1).unwrap();
        let empty = toy_separable(4).subset(&[]);
        assert!(matches!(
            ci_bt_train(&mut model, &empty, &TrainConfig::default(), None, |_| {}),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn non_finite_loss_aborts_with_location() {
        let mut model = build_cascade(tiny_spec(false), 1).unwrap();
        for p in model.classifiers[2].tensors_mut() {
            p.value.data_mut().fill(f32::NAN);
        }
        let data = toy_separable(8);
        match ci_bt_train(&mut model, &data, &TrainConfig::default(), None, |_| {}) {
            Err(Error::NonFiniteLoss { phase, epoch: 0, batch: 0, .. }) => assert_eq!(phase, "A"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
