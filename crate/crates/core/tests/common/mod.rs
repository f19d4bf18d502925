//! Oracles shared by the integration tests.
#![allow(dead_code)]

use cscd_core::nn::{layer_backward, layer_forward, LayerParams, LayerSpec, Mode, ParamKind};
use cscd_core::Tensor;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type TestRng = ChaCha8Rng;

pub fn rng(seed: u64) -> TestRng {
    TestRng::seed_from_u64(seed)
}

/// Outcome of checking one layer instance.
#[derive(Debug, Default, Clone, Copy)]
pub struct GradCheck {
    pub checked: usize,
    /// Coordinates sitting on a ReLU kink, where the one-sided slopes
    /// disagree and no derivative exists.
    pub kinks: usize,
    pub max_rel_error: f64,
}

const STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-6;

fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

fn normal(rng: &mut TestRng) -> f64 {
    // Box-Muller keeps this file free of distribution crates.
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    let v: f64 = rng.gen();
    (-2.0 * u.ln()).sqrt() * (2.0 * std::f64::consts::PI * v).cos()
}

pub fn random_tensor(shape: Vec<usize>, rng: &mut TestRng) -> Tensor<f64> {
    let len = shape.iter().product();
    Tensor::new(shape, (0..len).map(|_| normal(rng)).collect()).unwrap()
}

fn random_params(spec: &LayerSpec, rng: &mut TestRng) -> LayerParams<f64> {
    LayerParams::from_layout(spec, |_, kind, shape| {
        let len: usize = shape.iter().product();
        let data = (0..len)
            .map(|_| match kind {
                ParamKind::Scale => 1.0 + 0.3 * normal(rng),
                ParamKind::RunningVar => 1.0,
                ParamKind::RunningMean => 0.0,
                _ => 0.5 * normal(rng),
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    })
}

/// Scalar objective `Σ r ⊙ f(x)` in train mode. Running statistics are
/// restored so every evaluation sees the same parameters.
fn objective(spec: &LayerSpec, params: &LayerParams<f64>, x: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    let mut p = params.clone();
    let (y, _) = layer_forward(spec, &mut p, x, Mode::Train).unwrap();
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn central(f: impl Fn(f64) -> f64, at: f64) -> (f64, Option<f64>) {
    let (lo, mid, hi) = (f(at - STEP), f(at), f(at + STEP));
    let centred = (hi - lo) / (2.0 * STEP);
    let (left, right) = ((mid - lo) / STEP, (hi - mid) / STEP);
    let kink = relative_error(left, right) > 1e-2 && (left - right).abs() > 1e-4;
    (centred, (!kink).then_some(centred))
}

/// Compares analytic input and parameter gradients with central finite
/// differences over every coordinate.
pub fn check_layer(spec: &LayerSpec, input_shape: Vec<usize>, rng: &mut TestRng) -> GradCheck {
    let params = random_params(spec, rng);
    let x = random_tensor(input_shape, rng);
    let out_shape = spec.batched_output_shape(x.shape()).unwrap();
    let r = random_tensor(out_shape, rng);

    let mut scratch = params.clone();
    let (_, cache) = layer_forward(spec, &mut scratch, &x, Mode::Train).unwrap();
    let (dx, grads) = layer_backward(spec, &params, Some(&cache), &r).unwrap();

    let mut report = GradCheck::default();
    let mut record = |analytic: f64, numeric: Option<f64>| match numeric {
        Some(n) => {
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(relative_error(analytic, n));
        }
        None => report.kinks += 1,
    };

    for i in 0..x.len() {
        let (_, numeric) = central(
            |v| {
                let mut xp = x.clone();
                xp.data_mut()[i] = v;
                objective(spec, &params, &xp, &r)
            },
            x.data()[i],
        );
        record(dx.data()[i], numeric);
    }
    for (name, grad) in &grads {
        for i in 0..grad.len() {
            let base = params.get(name).unwrap().data()[i];
            let (_, numeric) = central(
                |v| {
                    let mut p = params.clone();
                    p.get_mut(name).unwrap().data_mut()[i] = v;
                    objective(spec, &p, &x, &r)
                },
                base,
            );
            record(grad.data()[i], numeric);
        }
    }
    // Every trainable slot must have received a gradient.
    let trainable = params.iter().filter(|p| p.kind.trainable()).count();
    assert_eq!(grads.len(), trainable, "{} returned {} gradients", spec.name(), grads.len());
    report
}

/// One random instance of every layer variant: `(label, spec, batched input shape)`.
pub fn random_layer_cases(rng: &mut TestRng) -> Vec<(&'static str, LayerSpec, Vec<usize>)> {
    let mut cases = Vec::new();
    let n = rng.gen_range(1..=3);

    let (k, stride, pad): (usize, usize, usize) = (rng.gen_range(1..=3), rng.gen_range(1..=3), rng.gen_range(0..=2));
    let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=4));
    let h = rng.gen_range(k.saturating_sub(2 * pad).max(1)..=7);
    let w = rng.gen_range(k.saturating_sub(2 * pad).max(1)..=7);
    cases.push(("conv2d", LayerSpec::conv(cin, cout, k, stride, pad), vec![n, cin, h, w]));

    let c = rng.gen_range(1..=4);
    let bn_shape = if rng.gen_bool(0.5) {
        vec![rng.gen_range(2..=6), c]
    } else {
        vec![rng.gen_range(2..=3), c, rng.gen_range(1..=4), rng.gen_range(1..=4)]
    };
    cases.push(("batchnorm", LayerSpec::BatchNorm { channels: c }, bn_shape));

    cases.push(("relu", LayerSpec::Relu, vec![n, rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4)]));

    let c = rng.gen_range(1..=3);
    for (label, batch_norm) in [("resblock", false), ("resblock_bn", true)] {
        let n = if batch_norm { rng.gen_range(2..=3) } else { n };
        cases.push((
            label,
            LayerSpec::ResidualBlock { channels: c, batch_norm },
            vec![n, c, rng.gen_range(1..=5), rng.gen_range(1..=5)],
        ));
    }
    for (label, batch_norm) in [("resblock_down", false), ("resblock_down_bn", true)] {
        let (cin, cout) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
        let n = if batch_norm { rng.gen_range(2..=3) } else { n };
        cases.push((
            label,
            LayerSpec::ResidualBlockDown {
                in_channels: cin,
                out_channels: cout,
                batch_norm,
            },
            vec![n, cin, rng.gen_range(2..=6), rng.gen_range(2..=6)],
        ));
    }

    let c = rng.gen_range(1..=4);
    cases.push(("gap", LayerSpec::GlobalAvgPool, vec![n, c, rng.gen_range(1..=5), rng.gen_range(1..=5)]));

    let (fin, fout) = (rng.gen_range(1..=12), rng.gen_range(1..=6));
    cases.push(("fc", LayerSpec::fc(fin, fout), vec![n, fin]));
    cases
}

/// Brute-force threshold search straight from the definitions: for every
/// candidate in `{0} ∪ observed confidences`, recount the retained set.
pub fn brute_force_threshold(records: &[(f64, bool)], eps: f64) -> f64 {
    let alpha = |delta: f64| {
        let (mut kept, mut correct) = (0u64, 0u64);
        for &(c, ok) in records {
            if c >= delta {
                kept += 1;
                correct += u64::from(ok);
            }
        }
        if kept == 0 {
            0.0
        } else {
            correct as f64 / kept as f64
        }
    };
    let mut grid: Vec<f64> = records.iter().map(|r| r.0).collect();
    grid.push(0.0);
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    let best = grid.iter().map(|&d| alpha(d)).fold(f64::NEG_INFINITY, f64::max);
    *grid.iter().find(|&&d| alpha(d) >= best - eps).expect("the maximiser qualifies")
}

/// Random calibration records with a few deliberately repeated confidences.
pub fn random_records(rng: &mut TestRng, classes: usize) -> Vec<(f64, bool)> {
    let n = rng.gen_range(1..=10_000);
    let floor = 1.0 / classes as f64;
    let palette: Vec<f64> = (0..rng.gen_range(1..=50)).map(|_| rng.gen_range(floor..=1.0)).collect();
    let skill: f64 = rng.gen();
    (0..n)
        .map(|_| {
            let c = if rng.gen_bool(0.3) {
                palette[rng.gen_range(0..palette.len())]
            } else {
                rng.gen_range(floor..=1.0)
            };
            // Higher confidence is more often right, with noise.
            let noise: f64 = rng.gen();
            let ok = rng.gen_bool((skill * c + (1.0 - skill) * noise).clamp(0.0, 1.0));
            (c, ok)
        })
        .collect()
}

/// Closed-form MAC totals of the preset architecture: `(trunk, classifier)`
/// per component, for a `(c, s, s)` input with `s` divisible by 4.
pub fn preset_macs(in_channels: u64, side: u64, w0: u64, blocks: u64, classes: u64, enhanced: bool) -> Vec<(u64, u64)> {
    let conv3 = |hw: u64, cin: u64, cout: u64| hw * cin * cout * 9;
    let conv1 = |hw: u64, cin: u64, cout: u64| hw * cin * cout;
    let full = side * side;
    let half = (side / 2) * (side / 2);
    let quarter = (side / 4) * (side / 4);
    let head = |hw: u64, width: u64, last: bool| {
        if enhanced && !last {
            conv1(hw, width, 4 * w0) + 4 * w0 * classes
        } else {
            width * classes
        }
    };
    let t0 = conv3(full, in_channels, w0) + blocks * 2 * conv3(full, w0, w0);
    let down = |hw: u64, cin: u64, cout: u64| conv3(hw, cin, cout) + conv3(hw, cout, cout) + conv1(hw, cin, cout);
    let t1 = down(half, w0, 2 * w0) + (blocks - 1) * 2 * conv3(half, 2 * w0, 2 * w0);
    let t2 = down(quarter, 2 * w0, 4 * w0) + (blocks - 1) * 2 * conv3(quarter, 4 * w0, 4 * w0);
    vec![
        (t0, head(full, w0, false)),
        (t1, head(half, 2 * w0, false)),
        (t2, head(quarter, 4 * w0, true)),
    ]
}
