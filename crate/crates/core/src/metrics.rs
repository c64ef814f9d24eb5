//! Agreement between predicted codes and human codes.
//!
//! Conventions for degenerate denominators: MCC is 0 when either marginal is
//! constant, per-class precision/recall/F1 are 0 when undefined, and kappa is
//! 1 when both labelings are the same single constant.

use std::collections::HashMap;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are human (truth) labels, columns are predicted labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub categories: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(categories: Vec<String>, counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = categories.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(Error::invalid(format!("confusion matrix must be {k}x{k}")));
        }
        Ok(Self { categories, counts })
    }

    pub fn k(&self) -> usize {
        self.categories.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.k())
            .map(|j| self.counts.iter().map(|r| r[j]).sum())
            .collect()
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::invalid("metrics need at least one scored response"));
        }
        Ok(())
    }
}

pub fn confusion<S: AsRef<str>>(
    truth: &[S],
    predicted: &[S],
    categories: &[String],
) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(Error::invalid(format!(
            "label lists differ in length: {} truth vs {} predicted",
            truth.len(),
            predicted.len()
        )));
    }
    let index: HashMap<&str, usize> = categories
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let lookup = |label: &str| {
        index
            .get(label)
            .copied()
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    };
    let k = categories.len();
    let mut counts = vec![vec![0u64; k]; k];
    for (t, p) in truth.iter().zip(predicted) {
        counts[lookup(t.as_ref())?][lookup(p.as_ref())?] += 1;
    }
    Ok(ConfusionMatrix {
        categories: categories.to_vec(),
        counts,
    })
}

/// Cohen's kappa, `(p_o - p_e) / (1 - p_e)`.
pub fn cohens_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    cm.require_nonempty()?;
    // scaled by total^2 to stay in exact integer arithmetic as long as possible
    let s = cm.total() as f64;
    let agree = cm.trace() as f64 * s;
    let chance: f64 = cm
        .row_sums()
        .iter()
        .zip(cm.col_sums())
        .map(|(&r, c)| r as f64 * c as f64)
        .sum();
    let denom = s * s - chance;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok((agree - chance) / denom)
}

/// Multiclass Matthews correlation (Gorodkin's R_K).
pub fn multiclass_mcc(cm: &ConfusionMatrix) -> Result<f64> {
    cm.require_nonempty()?;
    let s = cm.total() as f64;
    let c = cm.trace() as f64;
    let t = cm.row_sums();
    let p = cm.col_sums();
    let pt: f64 = p.iter().zip(&t).map(|(&a, &b)| a as f64 * b as f64).sum();
    let pp: f64 = p.iter().map(|&a| (a as f64).powi(2)).sum();
    let tt: f64 = t.iter().map(|&a| (a as f64).powi(2)).sum();
    let denom = ((s * s - pp) * (s * s - tt)).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((c * s - pt) / denom)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub per_class: IndexMap<String, f64>,
    pub micro: f64,
    pub macro_avg: f64,
    pub weighted: f64,
}

pub fn f1_scores(cm: &ConfusionMatrix) -> Result<F1Scores> {
    cm.require_nonempty()?;
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let mut per_class = IndexMap::new();
    let mut weighted = 0.0;
    for (i, cat) in cm.categories.iter().enumerate() {
        let tp = cm.counts[i][i] as f64;
        let precision = if cols[i] == 0 { 0.0 } else { tp / cols[i] as f64 };
        let recall = if rows[i] == 0 { 0.0 } else { tp / rows[i] as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        weighted += f1 * rows[i] as f64;
        per_class.insert(cat.clone(), f1);
    }
    let total = cm.total() as f64;
    let macro_avg = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    Ok(F1Scores {
        per_class,
        micro: cm.trace() as f64 / total,
        macro_avg,
        weighted: weighted / total,
    })
}

/// Mean and population standard deviation of each metric over resampling runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResamplingStats {
    pub n_runs: usize,
    pub seed: u64,
    pub k_per_category: IndexMap<String, usize>,
    pub mean: MetricValues,
    pub std: MetricValues,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub f1_micro: f64,
    pub f1_macro: f64,
    pub f1_weighted: f64,
    pub kappa: f64,
    pub mcc: f64,
}

impl MetricValues {
    fn as_array(&self) -> [f64; 5] {
        [self.f1_micro, self.f1_macro, self.f1_weighted, self.kappa, self.mcc]
    }

    fn from_array(a: [f64; 5]) -> Self {
        Self {
            f1_micro: a[0],
            f1_macro: a[1],
            f1_weighted: a[2],
            kappa: a[3],
            mcc: a[4],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_scored: u64,
    pub f1_micro: f64,
    pub f1_macro: f64,
    pub f1_weighted: f64,
    pub kappa: f64,
    pub mcc: f64,
    pub per_class_f1: IndexMap<String, f64>,
    pub confusion: ConfusionMatrix,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resampling: Option<ResamplingStats>,
}

impl MetricsReport {
    pub fn from_confusion(cm: ConfusionMatrix) -> Result<Self> {
        let f1 = f1_scores(&cm)?;
        Ok(Self {
            n_scored: cm.total(),
            f1_micro: f1.micro,
            f1_macro: f1.macro_avg,
            f1_weighted: f1.weighted,
            kappa: cohens_kappa(&cm)?,
            mcc: multiclass_mcc(&cm)?,
            per_class_f1: f1.per_class,
            confusion: cm,
            resampling: None,
        })
    }

    pub fn values(&self) -> MetricValues {
        MetricValues {
            f1_micro: self.f1_micro,
            f1_macro: self.f1_macro,
            f1_weighted: self.f1_weighted,
            kappa: self.kappa,
            mcc: self.mcc,
        }
    }
}

pub fn score<S: AsRef<str>>(
    truth: &[S],
    predicted: &[S],
    categories: &[String],
) -> Result<MetricsReport> {
    MetricsReport::from_confusion(confusion(truth, predicted, categories)?)
}

/// Per-metric mean and population standard deviation.
pub fn summarize(runs: &[MetricValues]) -> Result<(MetricValues, MetricValues)> {
    if runs.is_empty() {
        return Err(Error::invalid("no runs to summarize"));
    }
    let n = runs.len() as f64;
    let mut mean = [0.0; 5];
    for r in runs {
        for (m, v) in mean.iter_mut().zip(r.as_array()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; 5];
    for r in runs {
        for ((s, v), m) in var.iter_mut().zip(r.as_array()).zip(mean) {
            *s += (v - m).powi(2);
        }
    }
    let std = var.map(|s| (s / n).sqrt());
    Ok((MetricValues::from_array(mean), MetricValues::from_array(std)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cats(n: usize) -> Vec<String> {
        ["L", "P", "S", "O", "X"][..n].iter().map(|s| s.to_string()).collect()
    }

    fn cm(counts: Vec<Vec<u64>>) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(cats(counts.len()), counts).unwrap()
    }

    #[test]
    fn confusion_examples() {
        let c = cats(2);
        assert_eq!(confusion(&["L", "P"], &["L", "P"], &c).unwrap().counts, vec![vec![1, 0], vec![0, 1]]);
        let empty: [&str; 0] = [];
        assert_eq!(confusion(&empty, &empty, &c).unwrap().counts, vec![vec![0, 0], vec![0, 0]]);
        assert_eq!(
            confusion(&["L", "L", "P"], &["L", "P", "P"], &c).unwrap().counts,
            vec![vec![1, 1], vec![0, 1]]
        );
        assert!(matches!(confusion(&["L", "Q"], &["L", "P"], &c), Err(Error::UnknownLabel(l)) if l == "Q"));
        assert!(confusion(&["L"], &["L", "P"], &c).is_err());
    }

    #[test]
    fn kappa_examples() {
        assert_eq!(cohens_kappa(&cm(vec![vec![3, 0], vec![0, 4]])).unwrap(), 1.0);
        assert_eq!(cohens_kappa(&cm(vec![vec![1, 1], vec![1, 1]])).unwrap(), 0.0);
        assert_eq!(cohens_kappa(&cm(vec![vec![20, 5], vec![10, 15]])).unwrap(), 0.4);
        assert_eq!(cohens_kappa(&cm(vec![vec![5, 0], vec![0, 0]])).unwrap(), 1.0);
        assert!(cohens_kappa(&cm(vec![vec![0, 0], vec![0, 0]])).is_err());
    }

    #[test]
    fn mcc_examples() {
        assert_abs_diff_eq!(multiclass_mcc(&cm(vec![vec![3, 0], vec![0, 4]])).unwrap(), 1.0);
        assert_eq!(multiclass_mcc(&cm(vec![vec![3, 0], vec![4, 0]])).unwrap(), 0.0);
        let expected = (20.0 * 15.0 - 5.0 * 10.0) / (25.0f64 * 25.0 * 30.0 * 20.0).sqrt();
        let got = multiclass_mcc(&cm(vec![vec![20, 5], vec![10, 15]])).unwrap();
        assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(got, 0.4082, epsilon = 1e-3);
    }

    #[test]
    fn f1_examples() {
        let perfect = f1_scores(&cm(vec![vec![3, 0], vec![0, 4]])).unwrap();
        assert_eq!((perfect.micro, perfect.macro_avg, perfect.weighted), (1.0, 1.0, 1.0));

        let f = f1_scores(&cm(vec![vec![20, 5], vec![10, 15]])).unwrap();
        let (p, r) = (20.0 / 30.0, 20.0 / 25.0);
        assert_abs_diff_eq!(f.per_class["L"], 2.0 * p * r / (p + r), epsilon = 1e-12);
        assert_abs_diff_eq!(f.per_class["L"], 0.7273, epsilon = 1e-4);

        // class S has no support and no predictions
        let f = f1_scores(&cm(vec![vec![2, 0, 0], vec![1, 1, 0], vec![0, 0, 0]])).unwrap();
        assert_eq!(f.per_class["S"], 0.0);
        let expected_weighted = (2.0 * f.per_class["L"] + 2.0 * f.per_class["P"]) / 4.0;
        assert_abs_diff_eq!(f.weighted, expected_weighted, epsilon = 1e-12);
    }

    #[test]
    fn identical_labels_score_one() {
        let labels = ["L", "P", "S", "L", "L"];
        let r = score(&labels, &labels, &cats(3)).unwrap();
        assert_eq!((r.kappa, r.mcc, r.f1_micro, r.f1_macro, r.f1_weighted), (1.0, 1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn summarize_std_is_population() {
        let a = MetricValues::from_array([1.0; 5]);
        let b = MetricValues::from_array([3.0; 5]);
        let (m, s) = summarize(&[a, b]).unwrap();
        assert_eq!(m.kappa, 2.0);
        assert_eq!(s.kappa, 1.0);
        let (_, s) = summarize(&[a]).unwrap();
        assert_eq!(s.as_array(), [0.0; 5]);
    }
}
