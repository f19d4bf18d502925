//! Cascade accuracy and cost reports, tolerance sweeps, retained-accuracy
//! curves and confidence histograms.

use std::fmt::Write as _;

use crate::calibrate::{build_tables, calibrate_tables, CalibrationTable};
use crate::cascade::{run_cascade, CascadeModel, ClassifierOutput, MacTable, RecordedOutputs, ThresholdVector};
use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct CascadeEvalReport {
    pub epsilon: Option<f64>,
    pub thresholds: ThresholdVector,
    pub samples: usize,
    pub accuracy: f64,
    /// Sum of `macs_used` over every trace.
    pub total_macs: u64,
    /// Mean `macs_used` per inference.
    pub expected_macs: f64,
    pub full_network_macs: u64,
    pub speedup: f64,
    pub exit_counts: Vec<usize>,
}

impl CascadeEvalReport {
    pub fn exit_fractions(&self) -> Vec<f64> {
        self.exit_counts.iter().map(|&c| c as f64 / self.samples as f64).collect()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        if let Some(e) = self.epsilon {
            let _ = writeln!(s, "epsilon {}", fmt_g9(e));
        }
        let t: Vec<String> = self.thresholds.as_slice().iter().map(|t| t.to_string()).collect();
        let _ = writeln!(s, "thresholds {}", t.join(" "));
        let _ = writeln!(s, "samples {}", self.samples);
        let _ = writeln!(s, "accuracy {}", fmt_g9(self.accuracy));
        let _ = writeln!(s, "expected_macs {}", fmt_g9(self.expected_macs));
        let _ = writeln!(s, "full_network_macs {}", self.full_network_macs);
        let _ = writeln!(s, "speedup {}", fmt_g9(self.speedup));
        let f: Vec<String> = self.exit_fractions().into_iter().map(fmt_g9).collect();
        let _ = writeln!(s, "exit_fractions {}", f.join(" "));
        s
    }
}

/// Runs early-exit inference over recorded outputs (`outputs[i][m]`).
pub fn evaluate_recorded(
    outputs: &[Vec<ClassifierOutput>],
    labels: &[usize],
    thresholds: &ThresholdVector,
    macs: &MacTable,
) -> Result<CascadeEvalReport> {
    if outputs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut exit_counts = vec![0; macs.num_components()];
    let (mut correct, mut total_macs) = (0usize, 0u64);
    for (o, &y) in outputs.iter().zip(labels) {
        let trace = run_cascade(thresholds, &mut RecordedOutputs(o), macs)?;
        correct += usize::from(trace.predicted_class == y);
        total_macs += trace.macs_used;
        exit_counts[trace.exit_component] += 1;
    }
    let n = outputs.len();
    let expected_macs = total_macs as f64 / n as f64;
    let full = macs.full_network();
    Ok(CascadeEvalReport {
        epsilon: None,
        thresholds: thresholds.clone(),
        samples: n,
        accuracy: correct as f64 / n as f64,
        total_macs,
        expected_macs,
        full_network_macs: full,
        speedup: full as f64 / expected_macs,
        exit_counts,
    })
}

pub fn evaluate_cascade(model: &CascadeModel, thresholds: &ThresholdVector, data: &Dataset) -> Result<CascadeEvalReport> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let macs = MacTable::new(&model.spec)?;
    let outputs = model.all_outputs(&data.images, 256)?;
    evaluate_recorded(&outputs, &data.labels, thresholds, &macs)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurvePoint {
    pub epsilon: f64,
    pub accuracy: f64,
    pub expected_macs: f64,
    pub speedup: f64,
}

/// Calibrates on `calib_tables` and evaluates on recorded test outputs for
/// every tolerance, in the given order.
pub fn sweep_recorded(
    calib_tables: &[CalibrationTable],
    test_outputs: &[Vec<ClassifierOutput>],
    test_labels: &[usize],
    epsilons: &[f64],
    macs: &MacTable,
) -> Result<Vec<(CurvePoint, CascadeEvalReport)>> {
    if epsilons.is_empty() {
        return Err(Error::Config("no epsilon values given".into()));
    }
    epsilons
        .iter()
        .map(|&eps| {
            let cal = calibrate_tables(calib_tables, macs.num_components(), eps)?;
            let mut report = evaluate_recorded(test_outputs, test_labels, &cal.thresholds, macs)?;
            report.epsilon = Some(eps);
            let point = CurvePoint {
                epsilon: eps,
                accuracy: report.accuracy,
                expected_macs: report.expected_macs,
                speedup: report.speedup,
            };
            Ok((point, report))
        })
        .collect()
}

pub fn sweep_epsilon(model: &CascadeModel, calib: &Dataset, test: &Dataset, epsilons: &[f64]) -> Result<Vec<CurvePoint>> {
    if calib.is_empty() || test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let macs = MacTable::new(&model.spec)?;
    let tables = build_tables(&model.all_outputs(&calib.images, 256)?, &calib.labels)?;
    let test_outputs = model.all_outputs(&test.images, 256)?;
    Ok(sweep_recorded(&tables, &test_outputs, &test.labels, epsilons, &macs)?
        .into_iter()
        .map(|(p, _)| p)
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AlphaPoint {
    pub delta: f64,
    pub alpha: f64,
    /// Inputs retained at `delta`.
    pub support: u64,
}

/// Retained accuracy on an even grid of `grid_size` levels over
/// `[1/num_classes, max observed confidence]`. Levels retaining nothing are
/// left out.
pub fn alpha_curve(table: &CalibrationTable, num_classes: usize, grid_size: usize) -> Result<Vec<AlphaPoint>> {
    if grid_size < 2 {
        return Err(Error::Config(format!("grid size must be >= 2, got {grid_size}")));
    }
    let hi = table.max_confidence();
    let lo = (1.0 / num_classes as f64).min(hi);
    let deltas: Vec<f64> = if table.levels().len() == 1 || hi <= lo {
        vec![hi]
    } else {
        (0..grid_size)
            .map(|i| if i + 1 == grid_size { hi } else { lo + (hi - lo) * i as f64 / (grid_size - 1) as f64 })
            .collect()
    };
    Ok(deltas
        .into_iter()
        .filter_map(|delta| {
            let (support, _) = table.support(delta);
            (support > 0).then(|| AlphaPoint {
                delta,
                alpha: table.alpha(delta),
                support,
            })
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistogramBin {
    pub component: usize,
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
}

/// Per-component counts of confidences in `bins` equal bins over `[0, 1]`;
/// the last bin includes 1.
pub fn confidence_histogram(outputs: &[Vec<ClassifierOutput>], bins: usize) -> Result<Vec<HistogramBin>> {
    if bins == 0 {
        return Err(Error::Config("need at least one histogram bin".into()));
    }
    let n_comp = outputs.first().map_or(0, Vec::len);
    let mut counts = vec![vec![0usize; bins]; n_comp];
    for o in outputs {
        for (m, out) in o.iter().enumerate() {
            let b = ((f64::from(out.confidence) * bins as f64) as usize).min(bins - 1);
            counts[m][b] += 1;
        }
    }
    Ok(counts
        .into_iter()
        .enumerate()
        .flat_map(|(m, c)| {
            c.into_iter().enumerate().map(move |(b, count)| HistogramBin {
                component: m,
                lo: b as f64 / bins as f64,
                hi: (b + 1) as f64 / bins as f64,
                count,
            })
        })
        .collect())
}

/// Spearman rank correlation with tied values sharing their mean rank.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    pearson(&ranks(xs), &ranks(ys))
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = mean;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Formats like C's `%.9g`.
pub fn fmt_g9(v: f64) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 { "0".into() } else { v.to_string() };
    }
    let sci = format!("{v:.8e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp).max(0) as usize;
        trim_zeros(format!("{v:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa.to_string()), exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}

pub fn sweep_csv(points: &[CurvePoint]) -> String {
    let mut s = String::from("epsilon,accuracy,expected_macs,speedup\n");
    for p in points {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            fmt_g9(p.epsilon),
            fmt_g9(p.accuracy),
            fmt_g9(p.expected_macs),
            fmt_g9(p.speedup)
        );
    }
    s
}

pub fn alpha_csv(points: &[AlphaPoint]) -> String {
    let mut s = String::from("delta,alpha,support\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", fmt_g9(p.delta), fmt_g9(p.alpha), p.support);
    }
    s
}

pub fn hist_csv(bins: &[HistogramBin]) -> String {
    let mut s = String::from("component,bin_lo,bin_hi,count\n");
    for b in bins {
        let _ = writeln!(s, "{},{},{},{}", b.component, fmt_g9(b.lo), fmt_g9(b.hi), b.count);
    }
    s
}
