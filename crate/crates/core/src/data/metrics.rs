use serde::Serialize;

use crate::data::{Sample, IGNORE};
use crate::error::{Error, Result};

/// Pixel frequency of each class over all non-ignored pixels.
pub fn class_frequencies(samples: &[Sample], num_classes: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0u64; num_classes];
    for s in samples {
        for &l in &s.label {
            if l == IGNORE {
                continue;
            }
            *counts.get_mut(l as usize).ok_or_else(|| {
                Error::Data(format!("label {l} out of range for {num_classes} classes"))
            })? += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::Data("no labelled pixels: every pixel is ignored".into()));
    }
    Ok(counts.iter().map(|&c| c as f64 / total as f64).collect())
}

/// `counts[i * k + j]` = pixels of true class `i` predicted as `j`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MiouReport {
    /// `None` for classes absent from both truth and prediction.
    pub per_class: Vec<Option<f64>>,
    /// Mean over present classes; 0 when none is present.
    pub miou: f64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    /// Adds one image; pixels whose truth equals `ignore` are skipped.
    pub fn add(&mut self, pred: &[usize], truth: &[u8], ignore: u8) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::ShapeMismatch {
                op: "confusion_matrix",
                dim: "pixels",
                expected: truth.len(),
                actual: pred.len(),
            });
        }
        let k = self.num_classes;
        for (&p, &t) in pred.iter().zip(truth) {
            if t == ignore {
                continue;
            }
            let t = t as usize;
            if t >= k || p >= k {
                return Err(Error::Data(format!(
                    "label {t} or prediction {p} out of range for {k} classes"
                )));
            }
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    /// `t_i`: pixels whose true class is `i`.
    pub fn truth_total(&self, i: usize) -> u64 {
        (0..self.num_classes).map(|j| self.get(i, j)).sum()
    }

    pub fn pred_total(&self, i: usize) -> u64 {
        (0..self.num_classes).map(|j| self.get(j, i)).sum()
    }

    /// `n_ii / (t_i + sum_j n_ji - n_ii)`, or `None` when the union is empty.
    pub fn iou(&self, i: usize) -> Option<f64> {
        let tp = self.get(i, i);
        let union = self.truth_total(i) + self.pred_total(i) - tp;
        (union > 0).then(|| tp as f64 / union as f64)
    }

    pub fn report(&self) -> MiouReport {
        let per_class: Vec<Option<f64>> = (0..self.num_classes).map(|i| self.iou(i)).collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        MiouReport { per_class, miou }
    }
}

/// Accumulates one global confusion matrix over every image pair.
pub fn miou(predictions: &[Vec<usize>], labels: &[&[u8]], num_classes: usize, ignore: u8) -> Result<MiouReport> {
    if predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "miou",
            dim: "images",
            expected: labels.len(),
            actual: predictions.len(),
        });
    }
    let mut cm = ConfusionMatrix::new(num_classes);
    for (p, t) in predictions.iter().zip(labels) {
        cm.add(p, t, ignore)?;
    }
    Ok(cm.report())
}
