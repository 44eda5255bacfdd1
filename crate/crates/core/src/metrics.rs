//! Confusion matrices and the per-class and aggregate scores derived from them.
//!
//! Rows are true classes, columns are predicted classes.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An exact ratio of counts. A zero denominator means the rate is undefined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fraction {
    pub num: u64,
    pub den: u64,
}

impl Fraction {
    pub fn new(num: u64, den: u64) -> Self {
        Fraction { num, den }
    }

    /// `None` when the denominator is zero.
    pub fn value(&self) -> Option<f64> {
        (self.den > 0).then(|| self.num as f64 / self.den as f64)
    }

    pub fn is_defined(&self) -> bool {
        self.den > 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    label_space: Vec<String>,
    counts: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: String,
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub recall: Fraction,
    pub precision: Fraction,
    pub specificity: Fraction,
    pub f1: Fraction,
}

impl ConfusionMatrix {
    pub fn new(label_space: Vec<String>) -> Self {
        let m = label_space.len();
        ConfusionMatrix {
            label_space,
            counts: vec![0; m * m],
        }
    }

    /// Builds a matrix from row-major counts.
    pub fn from_counts(label_space: Vec<String>, rows: &[Vec<u64>]) -> Result<Self> {
        let m = label_space.len();
        if rows.len() != m || rows.iter().any(|r| r.len() != m) {
            return Err(Error::Dimension {
                expected: m,
                got: rows.len(),
            });
        }
        Ok(ConfusionMatrix {
            label_space,
            counts: rows.concat(),
        })
    }

    pub fn label_space(&self) -> &[String] {
        &self.label_space
    }

    pub fn num_classes(&self) -> usize {
        self.label_space.len()
    }

    pub fn get(&self, true_idx: usize, pred_idx: usize) -> u64 {
        self.counts[true_idx * self.num_classes() + pred_idx]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts
            .chunks(self.num_classes().max(1))
            .map(|r| r.to_vec())
            .collect()
    }

    fn index(&self, label: &str) -> Result<usize> {
        self.label_space
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    /// Counts one prediction.
    pub fn accumulate(&mut self, true_label: &str, predicted_label: &str) -> Result<()> {
        let t = self.index(true_label)?;
        let p = self.index(predicted_label)?;
        self.add_index(t, p);
        Ok(())
    }

    pub fn add_index(&mut self, true_idx: usize, pred_idx: usize) {
        let m = self.num_classes();
        self.counts[true_idx * m + pred_idx] += 1;
    }

    /// Elementwise sum; label spaces must match.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.label_space != self.label_space {
            return Err(Error::domain("cannot merge confusion matrices over different labels"));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.num_classes()).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        (0..self.num_classes()).map(|j| self.get(i, j)).sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.num_classes()).map(|i| self.get(i, j)).sum()
    }

    pub fn per_class(&self, m: usize) -> ClassMetrics {
        let tp = self.get(m, m);
        let fn_ = self.row_sum(m) - tp;
        let fp = self.col_sum(m) - tp;
        let tn = self.total() - tp - fp - fn_;
        ClassMetrics {
            label: self.label_space[m].clone(),
            tp,
            tn,
            fp,
            fn_,
            recall: Fraction::new(tp, tp + fn_),
            precision: Fraction::new(tp, tp + fp),
            specificity: Fraction::new(tn, tn + fp),
            f1: Fraction::new(2 * tp, 2 * tp + fp + fn_),
        }
    }

    pub fn all_classes(&self) -> Vec<ClassMetrics> {
        (0..self.num_classes()).map(|m| self.per_class(m)).collect()
    }

    /// Share of samples on the diagonal.
    pub fn accuracy(&self) -> Result<f64> {
        self.accuracy_fraction()
            .value()
            .ok_or_else(|| Error::domain("accuracy of an empty confusion matrix"))
    }

    pub fn accuracy_fraction(&self) -> Fraction {
        Fraction::new(self.trace(), self.total())
    }

    /// Cohen's kappa through the matrix-trace form
    /// `(tr(L) * S - tr(L J L)) / (S^2 - tr(L J L))`, with `S = 1' L 1` the
    /// grand total and `J` the all-ones matrix. `None` when the denominator
    /// vanishes, i.e. chance agreement is already total.
    pub fn cohens_kappa(&self) -> Option<f64> {
        let m = self.num_classes();
        // J_{1,M} L J_{M,1}
        let grand: u128 = self.counts.iter().map(|&c| c as u128).sum();
        // (L J)_{ik} = row_i for every k, so (L J L)_{ii} = sum_k row_i * L_{ki}
        let mut ljl_trace: u128 = 0;
        for i in 0..m {
            let row_i: u128 = (0..m).map(|k| self.get(i, k) as u128).sum();
            for k in 0..m {
                ljl_trace += row_i * self.get(k, i) as u128;
            }
        }
        let trace = self.trace() as u128;
        let num = (trace * grand) as i128 - ljl_trace as i128;
        let den = (grand * grand) as i128 - ljl_trace as i128;
        (den != 0).then(|| num as f64 / den as f64)
    }

    /// Aligned plain-text table: one row per class plus the aggregate scores.
    pub fn render_table(&self) -> String {
        let width = self.label_space.iter().map(|l| l.len()).max().unwrap_or(5).max(9);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>6} {:>6} {:>6} {:>6}  {:>7} {:>9} {:>11} {:>7}",
            "category", "TP", "TN", "FP", "FN", "recall", "precision", "specificity", "F1"
        );
        let fmt = |f: Fraction| f.value().map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        for c in self.all_classes() {
            let _ = writeln!(
                out,
                "{:<width$}  {:>6} {:>6} {:>6} {:>6}  {:>7} {:>9} {:>11} {:>7}",
                c.label,
                c.tp,
                c.tn,
                c.fp,
                c.fn_,
                fmt(c.recall),
                fmt(c.precision),
                fmt(c.specificity),
                fmt(c.f1)
            );
        }
        let alpha = self.accuracy().map_or_else(|_| "-".into(), |a| format!("{a:.4}"));
        let kappa = self.cohens_kappa().map_or_else(|| "-".into(), |k| format!("{k:.4}"));
        let _ = writeln!(out, "accuracy {alpha}  kappa {kappa}  samples {}", self.total());
        out
    }
}

/// Macro average over classes whose rate is defined.
pub fn macro_average(rates: impl IntoIterator<Item = Fraction>) -> Option<f64> {
    let defined: Vec<f64> = rates.into_iter().filter_map(|f| f.value()).collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}
