//! Classification metrics, evaluation drivers and a paired significance test.

mod significance;

use serde::{Deserialize, Serialize};

pub use significance::{bonferroni_significant, significance, SignificanceResult, DEFAULT_RESAMPLES};

use crate::data::EncodedExample;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::task::Task;
use crate::tensor::Real;

/// Counts with rows indexed by gold class and columns by predicted class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_labels(golds: &[usize], preds: &[usize], classes: usize) -> Result<Self> {
        if golds.len() != preds.len() {
            return Err(Error::Input(format!(
                "{} gold labels but {} predictions",
                golds.len(),
                preds.len()
            )));
        }
        let mut m = Self::new(classes);
        for (i, (&g, &p)) in golds.iter().zip(preds).enumerate() {
            if g >= classes || p >= classes {
                return Err(Error::Label {
                    index: i,
                    label: g.max(p) as i64,
                    classes,
                });
            }
            m.counts[g * classes + p] += 1;
        }
        Ok(m)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gold: usize, pred: usize) -> u64 {
        self.counts[gold * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Gold count of `class`.
    pub fn support(&self, class: usize) -> u64 {
        (0..self.classes).map(|p| self.get(class, p)).sum()
    }

    pub fn predicted(&self, class: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, class)).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<ClassMetrics>,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self> {
        let n = confusion.total();
        if n == 0 {
            return Err(Error::Input("cannot score an empty set of predictions".into()));
        }
        let c = confusion.classes();
        let classes: Vec<ClassMetrics> = (0..c)
            .map(|k| {
                let tp = confusion.get(k, k);
                let precision = ratio(tp, confusion.predicted(k));
                let recall = ratio(tp, confusion.support(k));
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                ClassMetrics {
                    precision,
                    recall,
                    f1,
                    support: confusion.support(k),
                }
            })
            .collect();
        let macro_f1 = classes.iter().map(|m| m.f1).sum::<f64>() / c as f64;
        let weighted_f1 = classes.iter().map(|m| m.support as f64 * m.f1).sum::<f64>() / n as f64;
        let accuracy = ratio((0..c).map(|k| confusion.get(k, k)).sum(), n);
        Ok(Self {
            classes,
            macro_f1,
            weighted_f1,
            accuracy,
            confusion,
        })
    }
}

/// Per-class precision, recall and F1 with macro and support-weighted
/// averages. A class with `P + R = 0` has F1 0 and still counts towards the
/// macro average.
pub fn f1_report(golds: &[usize], preds: &[usize], classes: usize) -> Result<MetricsReport> {
    if golds.is_empty() {
        return Err(Error::Input("cannot score an empty set of predictions".into()));
    }
    MetricsReport::from_confusion(ConfusionMatrix::from_labels(golds, preds, classes)?)
}

/// Macro-F1 only, without building a report.
pub fn macro_f1(golds: &[usize], preds: &[usize], classes: usize) -> f64 {
    let mut tp = vec![0u64; classes];
    let mut gold = vec![0u64; classes];
    let mut pred = vec![0u64; classes];
    for (&g, &p) in golds.iter().zip(preds) {
        gold[g] += 1;
        pred[p] += 1;
        if g == p {
            tp[g] += 1;
        }
    }
    (0..classes)
        .map(|k| {
            let (p, r) = (ratio(tp[k], pred[k]), ratio(tp[k], gold[k]));
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        })
        .sum::<f64>()
        / classes as f64
}

/// Predicts every example of `task` with `model` and scores the result.
pub fn evaluate<F: Real>(model: &Model<F>, examples: &[EncodedExample], task: Task) -> Result<MetricsReport> {
    if let Some(e) = examples.iter().find(|e| e.task != task) {
        return Err(Error::Input(format!("{} example passed to a {task} evaluation", e.task)));
    }
    let preds = model.predict(examples)?;
    let golds: Vec<usize> = examples.iter().map(|e| e.class).collect();
    f1_report(&golds, &preds, task.num_classes())
}
