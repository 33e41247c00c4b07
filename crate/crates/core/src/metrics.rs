//! Per-level and full-path accuracy.
//!
//! Everything is tallied as integer counts; accuracies are a single
//! division at report time.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::taxonomy::{ClassId, LabelPath, Taxonomy};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalReport {
    pub document_count: usize,
    /// Documents whose level-`j` class is right.
    pub level_correct: Vec<usize>,
    /// Documents right at every level.
    pub path_correct: usize,
    /// `confusion[j][gold][predicted]` counts at level `j`.
    pub confusion: Vec<Vec<Vec<usize>>>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl EvalReport {
    pub fn num_levels(&self) -> usize {
        self.level_correct.len()
    }

    pub fn level_accuracy(&self, level: usize) -> f64 {
        ratio(self.level_correct[level], self.document_count)
    }

    pub fn level_accuracies(&self) -> Vec<f64> {
        (0..self.num_levels()).map(|j| self.level_accuracy(j)).collect()
    }

    pub fn path_accuracy(&self) -> f64 {
        ratio(self.path_correct, self.document_count)
    }

    pub fn level_incorrect(&self, level: usize) -> usize {
        self.document_count - self.level_correct[level]
    }

    /// Human-readable report.
    pub fn to_text(&self, taxonomy: &Taxonomy) -> String {
        let mut out = String::new();
        writeln!(out, "# accuracy over {} documents", self.document_count).unwrap();
        writeln!(
            out,
            "# path accuracy = exact match at every level; not directly comparable to single-number accuracies reported elsewhere"
        )
        .unwrap();
        for j in 0..self.num_levels() {
            writeln!(
                out,
                "level {j} ({}): {:.4} ({}/{})",
                taxonomy.level_name(j),
                self.level_accuracy(j),
                self.level_correct[j],
                self.document_count
            )
            .unwrap();
        }
        writeln!(
            out,
            "path: {:.4} ({}/{})",
            self.path_accuracy(),
            self.path_correct,
            self.document_count
        )
        .unwrap();
        out
    }

    /// Machine-readable summary, one JSON object.
    pub fn summary_record(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "eval",
            "documents": self.document_count,
            "level_correct": self.level_correct,
            "level_accuracy": self.level_accuracies(),
            "path_correct": self.path_correct,
            "path_accuracy": self.path_accuracy(),
        })
    }
}

/// Scores predicted class sequences against gold paths. Predictions need
/// not respect taxonomy edges.
pub fn evaluate<P: AsRef<[ClassId]>>(taxonomy: &Taxonomy, predictions: &[P], gold: &[LabelPath]) -> Result<EvalReport> {
    if predictions.len() != gold.len() {
        return Err(Error::Data(format!(
            "{} predictions for {} gold paths",
            predictions.len(),
            gold.len()
        )));
    }
    let m = taxonomy.num_levels();
    let mut report = EvalReport {
        document_count: gold.len(),
        level_correct: vec![0; m],
        path_correct: 0,
        confusion: (0..m)
            .map(|j| vec![vec![0; taxonomy.level_size(j)]; taxonomy.level_size(j)])
            .collect(),
    };
    for (pred, truth) in predictions.iter().zip(gold) {
        let pred = pred.as_ref();
        if pred.len() != m || truth.len() != m {
            return Err(Error::Data(
                "label path length differs from the number of levels".into(),
            ));
        }
        let mut all = true;
        for (j, (p, g)) in pred.iter().zip(truth.classes()).enumerate() {
            report.confusion[j][g.index][p.index] += 1;
            if p.level != j || !taxonomy.contains(*p) {
                return Err(Error::Data(format!("predicted class {p} is not a level-{j} class")));
            }
            if p == g {
                report.level_correct[j] += 1;
            } else {
                all = false;
            }
        }
        if all {
            report.path_correct += 1;
        }
    }
    Ok(report)
}
