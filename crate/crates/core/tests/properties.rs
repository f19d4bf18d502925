//! Property tests over the public API.

mod common;

use common::brute_force_threshold;
use cscd_core::calibrate::CalibrationTable;
use cscd_core::cascade::{
    build_cascade, run_cascade, ClassifierOutput, MacTable, Preset, RecordedOutputs, Threshold, ThresholdVector,
};
use cscd_core::data::{encode_idx_images, encode_idx_labels, parse_idx_images, parse_idx_labels, IdxImages};
use cscd_core::nn::{chain_output_shape, layer_forward_eval, LayerParams, LayerSpec};
use cscd_core::persist::{decode_model, encode_model, format_thresholds, parse_thresholds};
use cscd_core::Tensor;
use proptest::prelude::*;

fn logits() -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-500.0f32..500.0, 2..40)
}

fn threshold() -> impl Strategy<Value = Threshold> {
    prop_oneof![
        1 => Just(Threshold::Disabled),
        4 => (0.0f64..=1.0).prop_map(Threshold::Value),
    ]
}

fn thresholds(n: usize) -> impl Strategy<Value = ThresholdVector> {
    prop::collection::vec(threshold(), n - 1).prop_map(|mut v| {
        v.push(Threshold::Value(0.0));
        ThresholdVector::new(v).unwrap()
    })
}

/// Componentwise maximum, so `a <= join(a, b)` always holds.
fn join(a: &ThresholdVector, b: &ThresholdVector) -> ThresholdVector {
    let v = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| if x.le(y) { y } else { x })
        .collect();
    ThresholdVector::new(v).unwrap()
}

fn recorded(n: usize) -> impl Strategy<Value = Vec<ClassifierOutput>> {
    prop::collection::vec(prop::collection::vec(-8.0f32..8.0, 3), n).prop_map(|ls| ls.iter().map(|l| ClassifierOutput::from_logits(l)).collect())
}

fn mini_macs() -> MacTable {
    MacTable::new(&Preset::Mini.spec([1, 12, 12], 3)).unwrap()
}

proptest! {
    #[test]
    fn softmax_is_a_distribution(z in logits()) {
        let out = ClassifierOutput::from_logits(&z);
        let sum: f64 = out.probs.iter().map(|&p| f64::from(p)).sum();
        prop_assert!((sum - 1.0).abs() <= 1e-6);
        prop_assert!(out.probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
        prop_assert!(out.confidence >= (1.0 / z.len() as f64) as f32);
        let top = z.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        prop_assert_eq!(z[out.class], top);
        prop_assert_eq!(z.iter().position(|&v| v == top), Some(out.class));
    }

    #[test]
    fn threshold_matches_brute_force(
        recs in prop::collection::vec((prop::sample::select(vec![0.1, 0.25, 0.5, 0.5, 0.75, 0.9, 1.0]), any::<bool>()), 1..200),
        eps in 0.0f64..0.5,
    ) {
        let table = CalibrationTable::from_records(recs.iter().copied()).unwrap();
        let got = table.threshold_for_epsilon(eps);
        prop_assert_eq!(got, brute_force_threshold(&recs, eps));
        prop_assert!(table.alpha(got) >= table.alpha_star() - eps);
        prop_assert!(table.threshold_for_epsilon(eps + 0.1) <= got);
    }

    #[test]
    fn support_counts_are_consistent(recs in prop::collection::vec((0.0f64..=1.0, any::<bool>()), 1..300), delta in 0.0f64..=1.0) {
        let table = CalibrationTable::from_records(recs.iter().copied()).unwrap();
        let (kept, correct) = table.support(delta);
        prop_assert!(correct <= kept);
        prop_assert_eq!(kept as usize, recs.iter().filter(|r| r.0 >= delta).count());
        prop_assert_eq!(correct as usize, recs.iter().filter(|r| r.0 >= delta && r.1).count());
        prop_assert_eq!(table.len(), recs.len());
    }

    #[test]
    fn raising_thresholds_never_exits_earlier(outs in recorded(3), a in thresholds(3), b in thresholds(3)) {
        let macs = mini_macs();
        let hi = join(&a, &b);
        prop_assert!(a.le(&hi));
        let lo_trace = run_cascade(&a, &mut RecordedOutputs(&outs), &macs).unwrap();
        let hi_trace = run_cascade(&hi, &mut RecordedOutputs(&outs), &macs).unwrap();
        prop_assert!(lo_trace.exit_component <= hi_trace.exit_component);
        prop_assert!(lo_trace.macs_used <= hi_trace.macs_used);
        prop_assert_eq!(lo_trace.macs_used, macs.cumulative(lo_trace.exit_component));
        prop_assert_eq!(lo_trace.outputs.len(), lo_trace.exit_component + 1);
    }

    #[test]
    fn conv_shape_rule_matches_forward(
        cin in 1usize..3, cout in 1usize..4, k in 1usize..4, stride in 1usize..4, pad in 0usize..3,
        h in 1usize..9, w in 1usize..9,
    ) {
        let spec = LayerSpec::conv(cin, cout, k, stride, pad);
        let rule = spec.output_shape(&[cin, h, w]);
        if h + 2 * pad < k || w + 2 * pad < k {
            prop_assert!(rule.is_err());
        } else {
            let rule = rule.unwrap();
            prop_assert_eq!(&rule, &vec![cout, (h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1]);
            let p = LayerParams::from_layout(&spec, |_, _, s| Tensor::<f32>::zeros(s.to_vec()));
            let y = layer_forward_eval(&spec, &p, &Tensor::zeros(vec![2, cin, h, w])).unwrap();
            prop_assert_eq!(&y.shape()[1..], &rule[..]);
        }
    }

    #[test]
    fn chain_shape_is_composition(side in 4usize..20, down in any::<bool>(), width in 1usize..5) {
        let mut specs = vec![LayerSpec::conv(1, width, 3, 1, 1), LayerSpec::Relu];
        if down {
            specs.push(LayerSpec::ResidualBlockDown { in_channels: width, out_channels: 2 * width, batch_norm: true });
        } else {
            specs.push(LayerSpec::ResidualBlock { channels: width, batch_norm: false });
        }
        specs.push(LayerSpec::GlobalAvgPool);
        let out = chain_output_shape(&specs, &[1, side, side]).unwrap();
        prop_assert_eq!(out, vec![if down { 2 * width } else { width }]);
    }

    #[test]
    fn idx_round_trip(count in 0usize..5, rows in 1usize..6, cols in 1usize..6, seed in any::<u8>()) {
        let pixels: Vec<u8> = (0..count * rows * cols).map(|i| (i as u8).wrapping_mul(31).wrapping_add(seed)).collect();
        let images = IdxImages { count, rows, cols, pixels };
        let bytes = encode_idx_images(&images);
        prop_assert_eq!(parse_idx_images(&bytes).unwrap(), images);
        let labels: Vec<u8> = (0..count as u8).map(|l| l % 10).collect();
        prop_assert_eq!(parse_idx_labels(&encode_idx_labels(&labels)).unwrap(), labels);
    }

    #[test]
    fn threshold_text_round_trip(t in thresholds(4)) {
        prop_assert_eq!(parse_thresholds(&format_thresholds(&t)).unwrap(), t);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn model_bytes_round_trip(seed in any::<u64>()) {
        let model = build_cascade(Preset::Mini.spec([1, 8, 8], 4), seed).unwrap();
        let bytes = encode_model(&model);
        let back = decode_model(&bytes).unwrap();
        prop_assert_eq!(encode_model(&back), bytes);
        prop_assert_eq!(back, model);
    }
}

#[test]
fn cumulative_macs_grow_and_end_at_the_full_network() {
    for preset in Preset::ALL {
        let macs = MacTable::new(&preset.spec([3, 32, 32], 10)).unwrap();
        let n = macs.num_components();
        for m in 1..n {
            assert!(macs.cumulative(m) > macs.cumulative(m - 1));
        }
        assert_eq!(macs.cumulative(n - 1), macs.full_network());
    }
}
