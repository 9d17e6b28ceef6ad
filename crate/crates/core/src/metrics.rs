//! Confusion matrices and the classification scores derived from them.
//!
//! The matrix is the single source of truth: accuracy, per-class precision
//! and recall, and the support-weighted F1 are all recomputed from its
//! counts, so any serialised report can be checked against the matrix it
//! ships with. Rows index the actual class, columns the predicted class.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction and actual lists differ in length: {preds} vs {actuals}")]
    LengthMismatch { preds: usize, actuals: usize },
    #[error("{kind} label {label} at index {index} outside 0..{classes}")]
    LabelOutOfRange {
        kind: &'static str,
        index: usize,
        label: usize,
        classes: usize,
    },
    #[error("confusion matrix is empty; metrics are undefined")]
    EmptyMatrix,
    #[error("{names} class names given for {classes} classes")]
    NameCountMismatch { names: usize, classes: usize },
}

/// Square matrix of prediction counts; `counts[actual][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    classes: usize,
    class_names: Vec<String>,
    counts: Vec<u64>,
}

/// Precision/recall/F1 for one class. A zero denominator (class never
/// predicted, or absent from the data) yields 0.0 with the matching
/// `*_defined` flag cleared rather than a NaN.
#[derive(Debug, Clone, Serialize)]
pub struct ClassScore {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Number of actual instances of this class (row sum).
    pub support: u64,
    /// Number of times this class was predicted (column sum).
    pub predicted: u64,
    pub precision_defined: bool,
    pub recall_defined: bool,
}

/// Full score report for one evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct ClassScores {
    pub per_class: Vec<ClassScore>,
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub total: u64,
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_binary(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

impl ConfusionMatrix {
    /// An empty matrix over `classes` classes. Names default to `class_0`,
    /// `class_1`, ... when not supplied.
    pub fn new(classes: usize, class_names: Option<&[String]>) -> Result<Self, MetricsError> {
        let names = match class_names {
            Some(n) => {
                if n.len() != classes {
                    return Err(MetricsError::NameCountMismatch {
                        names: n.len(),
                        classes,
                    });
                }
                n.to_vec()
            }
            None => (0..classes).map(|i| format!("class_{i}")).collect(),
        };
        Ok(Self {
            classes,
            class_names: names,
            counts: vec![0; classes * classes],
        })
    }

    /// Builds a matrix from parallel actual/predicted label lists.
    pub fn from_pairs(
        actuals: &[usize],
        preds: &[usize],
        classes: usize,
        class_names: Option<&[String]>,
    ) -> Result<Self, MetricsError> {
        if actuals.len() != preds.len() {
            return Err(MetricsError::LengthMismatch {
                preds: preds.len(),
                actuals: actuals.len(),
            });
        }
        let mut m = Self::new(classes, class_names)?;
        for (i, (&a, &p)) in actuals.iter().zip(preds).enumerate() {
            if a >= classes {
                return Err(MetricsError::LabelOutOfRange {
                    kind: "actual",
                    index: i,
                    label: a,
                    classes,
                });
            }
            if p >= classes {
                return Err(MetricsError::LabelOutOfRange {
                    kind: "predicted",
                    index: i,
                    label: p,
                    classes,
                });
            }
            m.record(a, p);
        }
        Ok(m)
    }

    /// Constructs a matrix directly from row-major counts (row = actual).
    pub fn from_counts(
        counts: Vec<u64>,
        classes: usize,
        class_names: Option<&[String]>,
    ) -> Result<Self, MetricsError> {
        assert_eq!(counts.len(), classes * classes, "counts must be square");
        let mut m = Self::new(classes, class_names)?;
        m.counts = counts;
        Ok(m)
    }

    pub fn record(&mut self, actual: usize, predicted: usize) {
        self.counts[actual * self.classes + predicted] += 1;
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn count(&self, actual: usize, predicted: usize) -> u64 {
        self.counts[actual * self.classes + predicted]
    }

    /// The raw count grid in row-major order, rows = actual classes.
    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Per-class actual counts (supports).
    pub fn row_sums(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|r| self.counts[r * self.classes..(r + 1) * self.classes].iter().sum())
            .collect()
    }

    /// Per-class predicted counts.
    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.classes)
            .map(|c| (0..self.classes).map(|r| self.counts[r * self.classes + c]).sum())
            .collect()
    }

    /// Fraction of correct predictions: trace over total.
    pub fn accuracy(&self) -> Result<f64, MetricsError> {
        let total = self.total();
        if total == 0 {
            return Err(MetricsError::EmptyMatrix);
        }
        let trace: u64 = (0..self.classes)
            .map(|i| self.counts[i * self.classes + i])
            .sum();
        Ok(trace as f64 / total as f64)
    }

    /// Per-class precision, recall, and F1.
    pub fn per_class(&self) -> Vec<ClassScore> {
        let rows = self.row_sums();
        let cols = self.col_sums();
        (0..self.classes)
            .map(|c| {
                let tp = self.counts[c * self.classes + c];
                let precision_defined = cols[c] > 0;
                let recall_defined = rows[c] > 0;
                let precision = if precision_defined {
                    tp as f64 / cols[c] as f64
                } else {
                    0.0
                };
                let recall = if recall_defined {
                    tp as f64 / rows[c] as f64
                } else {
                    0.0
                };
                ClassScore {
                    name: self.class_names[c].clone(),
                    precision,
                    recall,
                    f1: f1_binary(precision, recall),
                    support: rows[c],
                    predicted: cols[c],
                    precision_defined,
                    recall_defined,
                }
            })
            .collect()
    }

    /// F1 averaged over classes, weighted by support.
    pub fn weighted_f1(&self) -> Result<f64, MetricsError> {
        let total = self.total();
        if total == 0 {
            return Err(MetricsError::EmptyMatrix);
        }
        let scores = self.per_class();
        let acc: f64 = scores
            .iter()
            .map(|s| s.support as f64 * s.f1)
            .sum();
        Ok(acc / total as f64)
    }

    /// The full derived report.
    pub fn scores(&self) -> Result<ClassScores, MetricsError> {
        Ok(ClassScores {
            per_class: self.per_class(),
            accuracy: self.accuracy()?,
            weighted_f1: self.weighted_f1()?,
            total: self.total(),
        })
    }

    /// Tab-separated counts with row/column margins. The first column is
    /// the actual class; the final row and column hold totals.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("actual\\predicted");
        for name in &self.class_names {
            out.push('\t');
            out.push_str(name);
        }
        out.push_str("\ttotal\n");
        let rows = self.row_sums();
        for r in 0..self.classes {
            out.push_str(&self.class_names[r]);
            for c in 0..self.classes {
                out.push_str(&format!("\t{}", self.counts[r * self.classes + c]));
            }
            out.push_str(&format!("\t{}\n", rows[r]));
        }
        out.push_str("total");
        for c in self.col_sums() {
            out.push_str(&format!("\t{c}"));
        }
        out.push_str(&format!("\t{}\n", self.total()));
        out
    }

    /// Tab-separated row-normalised percentages (each row sums to ~100).
    /// Rows with no instances print 0.00 across.
    pub fn to_percent_tsv(&self) -> String {
        let mut out = String::from("actual\\predicted");
        for name in &self.class_names {
            out.push('\t');
            out.push_str(name);
        }
        out.push('\n');
        let rows = self.row_sums();
        for r in 0..self.classes {
            out.push_str(&self.class_names[r]);
            for c in 0..self.classes {
                let pct = if rows[r] == 0 {
                    0.0
                } else {
                    100.0 * self.counts[r * self.classes + c] as f64 / rows[r] as f64
                };
                out.push_str(&format!("\t{pct:.2}"));
            }
            out.push('\n');
        }
        out
    }
}
