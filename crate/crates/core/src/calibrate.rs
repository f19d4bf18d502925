//! Threshold calibration from per-component (confidence, correct) tables.
//!
//! For a confidence level `d`, the retained set holds the inputs whose
//! confidence is at least `d`; its accuracy is `correct / retained`, or 0
//! when nothing is retained. The threshold for a tolerance `eps` is the
//! smallest candidate level whose accuracy stays within `eps` of the best
//! accuracy over all candidates. Candidates are the observed confidences
//! plus 0.

use std::fmt::Write as _;

use crate::cascade::{CascadeModel, ClassifierOutput, Threshold, ThresholdVector};
use crate::data::Dataset;
use crate::error::{Error, Result};

/// Confidence table of one component with ties merged.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationTable {
    /// Distinct confidences, descending.
    levels: Vec<f64>,
    /// `retained[i]`: inputs with confidence `>= levels[i]`.
    retained: Vec<u64>,
    /// `correct[i]`: correct inputs among them.
    correct: Vec<u64>,
}

impl CalibrationTable {
    pub fn from_records(records: impl IntoIterator<Item = (f64, bool)>) -> Result<Self> {
        let mut recs: Vec<(f64, bool)> = records.into_iter().collect();
        if recs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if let Some((d, _)) = recs.iter().find(|(d, _)| !d.is_finite()) {
            return Err(Error::Config(format!("non-finite confidence {d}")));
        }
        recs.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut table = CalibrationTable {
            levels: Vec::new(),
            retained: Vec::new(),
            correct: Vec::new(),
        };
        let (mut n, mut c) = (0u64, 0u64);
        for (i, &(d, ok)) in recs.iter().enumerate() {
            n += 1;
            c += u64::from(ok);
            if recs.get(i + 1).is_none_or(|next| next.0 != d) {
                table.levels.push(d);
                table.retained.push(n);
                table.correct.push(c);
            }
        }
        Ok(table)
    }

    /// Table of classifier `m` from outputs recorded per sample.
    pub fn from_outputs(outputs: &[Vec<ClassifierOutput>], m: usize, labels: &[usize]) -> Result<Self> {
        Self::from_records(
            outputs
                .iter()
                .zip(labels)
                .map(|(o, &y)| (f64::from(o[m].confidence), o[m].class == y)),
        )
    }

    pub fn len(&self) -> usize {
        self.retained.last().map_or(0, |&n| n as usize)
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    /// Distinct observed confidences, descending.
    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn max_confidence(&self) -> f64 {
        self.levels[0]
    }

    /// `(retained, correct)` at level `delta`, by binary search.
    pub fn support(&self, delta: f64) -> (u64, u64) {
        let k = self.levels.partition_point(|&l| l >= delta);
        if k == 0 {
            (0, 0)
        } else {
            (self.retained[k - 1], self.correct[k - 1])
        }
    }

    pub fn alpha(&self, delta: f64) -> f64 {
        match self.support(delta) {
            (0, _) => 0.0,
            (n, c) => c as f64 / n as f64,
        }
    }

    /// Candidate levels, ascending: 0 then the observed confidences.
    pub fn grid(&self) -> impl Iterator<Item = f64> + '_ {
        let zero = (self.levels.last() != Some(&0.0)).then_some(0.0);
        zero.into_iter().chain(self.levels.iter().rev().copied())
    }

    pub fn alpha_star(&self) -> f64 {
        self.grid().map(|d| self.alpha(d)).fold(0.0, f64::max)
    }

    /// Smallest candidate level whose accuracy is at least `alpha_star - eps`.
    pub fn threshold_for_epsilon(&self, eps: f64) -> f64 {
        let target = self.alpha_star() - eps;
        self.grid()
            .find(|&d| self.alpha(d) >= target)
            .expect("the level attaining alpha_star qualifies")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationResult {
    pub epsilon: f64,
    pub thresholds: ThresholdVector,
    /// Best retained accuracy of every non-final component.
    pub alpha_star: Vec<f64>,
    /// Retained inputs at each chosen threshold.
    pub support: Vec<u64>,
    /// Number of candidate levels per component.
    pub grid_sizes: Vec<usize>,
}

impl CalibrationResult {
    pub fn to_text(&self) -> String {
        let mut s = format!("epsilon {}\n", self.epsilon);
        for (m, t) in self.thresholds.as_slice().iter().enumerate() {
            match self.alpha_star.get(m) {
                Some(a) => {
                    let _ = writeln!(
                        s,
                        "component {m} alpha_star {a} threshold {t} support {} grid {}",
                        self.support[m], self.grid_sizes[m]
                    );
                }
                None => {
                    let _ = writeln!(s, "component {m} threshold {t}");
                }
            }
        }
        s
    }
}

/// Thresholds from per-component tables; the last component gets 0.
pub fn calibrate_tables(tables: &[CalibrationTable], num_components: usize, eps: f64) -> Result<CalibrationResult> {
    if !(eps >= 0.0) {
        return Err(Error::Config(format!("epsilon must be >= 0, got {eps}")));
    }
    let mut thresholds = Vec::with_capacity(num_components);
    let mut alpha_star = Vec::new();
    let mut support = Vec::new();
    let mut grid_sizes = Vec::new();
    for table in tables.iter().take(num_components.saturating_sub(1)) {
        let d = table.threshold_for_epsilon(eps);
        thresholds.push(Threshold::Value(d));
        alpha_star.push(table.alpha_star());
        support.push(table.support(d).0);
        grid_sizes.push(table.grid().count());
    }
    thresholds.push(Threshold::Value(0.0));
    Ok(CalibrationResult {
        epsilon: eps,
        thresholds: ThresholdVector::new(thresholds)?,
        alpha_star,
        support,
        grid_sizes,
    })
}

/// Tables of every classifier from outputs recorded per sample.
pub fn build_tables(outputs: &[Vec<ClassifierOutput>], labels: &[usize]) -> Result<Vec<CalibrationTable>> {
    let n = outputs.first().map_or(0, Vec::len);
    (0..n).map(|m| CalibrationTable::from_outputs(outputs, m, labels)).collect()
}

/// Table of classifier `m` on a labelled set, evaluated in eval mode.
pub fn build_table(model: &CascadeModel, m: usize, data: &Dataset) -> Result<CalibrationTable> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let outputs = model.all_outputs(&data.images, 256)?;
    CalibrationTable::from_outputs(&outputs, m, &data.labels)
}

/// Calibrates every branch of `model` on `data` for tolerance `eps`.
pub fn calibrate(model: &CascadeModel, data: &Dataset, eps: f64) -> Result<CalibrationResult> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let outputs = model.all_outputs(&data.images, 256)?;
    calibrate_tables(&build_tables(&outputs, &data.labels)?, model.num_components(), eps)
}
