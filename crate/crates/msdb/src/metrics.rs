//! Confusion-matrix accumulation and the mean accuracy / mean IoU metrics.

use std::fmt;

use crate::error::{Error, Result};
use crate::label::LabelMap;

/// C x C count matrix; entry (i, j) tallies pixels of ground-truth class i
/// predicted as class j.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn add(&mut self, gt: usize, pred: usize, count: u64) {
        self.counts[gt * self.classes + pred] += count;
    }

    /// Total ground-truth pixels of class i (row sum).
    pub fn gt_total(&self, i: usize) -> u64 {
        self.counts[i * self.classes..(i + 1) * self.classes].iter().sum()
    }

    /// Total predicted pixels of class i (column sum).
    pub fn pred_total(&self, i: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, i)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Merge another matrix (per-worker accumulation).
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::ShapeMismatch {
                op: "ConfusionMatrix::merge",
                expected: vec![self.classes, self.classes],
                got: vec![other.classes, other.classes],
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Add per-pixel tallies of one (ground truth, prediction) pair. Order of
/// updates across images does not matter.
pub fn confusion_update(m: &mut ConfusionMatrix, gt: &LabelMap, pred: &LabelMap) -> Result<()> {
    if gt.height() != pred.height() || gt.width() != pred.width() {
        return Err(Error::ShapeMismatch {
            op: "confusion_update",
            expected: vec![gt.height(), gt.width()],
            got: vec![pred.height(), pred.width()],
        });
    }
    gt.check_classes(m.classes)?;
    pred.check_classes(m.classes)?;
    for (&g, &p) in gt.ids().iter().zip(pred.ids()) {
        m.add(g as usize, p as usize, 1);
    }
    Ok(())
}

fn present_classes(m: &ConfusionMatrix) -> Result<Vec<usize>> {
    let present: Vec<usize> = (0..m.classes).filter(|&i| m.gt_total(i) > 0).collect();
    if present.is_empty() {
        return Err(Error::EmptyInput("confusion matrix has no pixels"));
    }
    Ok(present)
}

/// (1/C) sum_i n_ii / t_i, averaged over classes with t_i > 0.
pub fn mean_accuracy(m: &ConfusionMatrix) -> Result<f64> {
    let present = present_classes(m)?;
    let sum: f64 = present
        .iter()
        .map(|&i| m.get(i, i) as f64 / m.gt_total(i) as f64)
        .sum();
    Ok(sum / present.len() as f64)
}

/// (1/C) sum_i n_ii / (t_i + sum_j n_ji - n_ii), averaged over classes with
/// t_i > 0.
pub fn mean_iou(m: &ConfusionMatrix) -> Result<f64> {
    let present = present_classes(m)?;
    let sum: f64 = present
        .iter()
        .map(|&i| {
            let inter = m.get(i, i) as f64;
            let union = (m.gt_total(i) + m.pred_total(i) - m.get(i, i)) as f64;
            inter / union
        })
        .sum();
    Ok(sum / present.len() as f64)
}

/// Per-class accuracy/IoU for classes with ground-truth pixels; absent
/// classes report None.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub mean_iou: f64,
    pub mean_accuracy: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub total_pixels: u64,
    pub correct_pixels: u64,
}

impl EvalReport {
    pub fn from_matrix(m: &ConfusionMatrix) -> Result<EvalReport> {
        let mut per_class_iou = Vec::with_capacity(m.classes);
        let mut per_class_accuracy = Vec::with_capacity(m.classes);
        for i in 0..m.classes {
            let t = m.gt_total(i);
            if t == 0 {
                per_class_iou.push(None);
                per_class_accuracy.push(None);
            } else {
                let inter = m.get(i, i) as f64;
                per_class_accuracy.push(Some(inter / t as f64));
                per_class_iou.push(Some(inter / (t + m.pred_total(i) - m.get(i, i)) as f64));
            }
        }
        Ok(EvalReport {
            mean_iou: mean_iou(m)?,
            mean_accuracy: mean_accuracy(m)?,
            per_class_iou,
            per_class_accuracy,
            total_pixels: m.total(),
            correct_pixels: (0..m.classes).map(|i| m.get(i, i)).sum(),
        })
    }

    /// Machine-readable key=value lines.
    pub fn to_kv(&self) -> String {
        let fmt_list = |v: &[Option<f64>]| {
            v.iter()
                .map(|o| match o {
                    Some(x) => format!("{x:.6}"),
                    None => "nan".into(),
                })
                .collect::<Vec<_>>()
                .join(",")
        };
        format!(
            "mean_iou={:.6}\nmean_accuracy={:.6}\nper_class_iou={}\nper_class_accuracy={}\ntotal_pixels={}\ncorrect_pixels={}\n",
            self.mean_iou,
            self.mean_accuracy,
            fmt_list(&self.per_class_iou),
            fmt_list(&self.per_class_accuracy),
            self.total_pixels,
            self.correct_pixels,
        )
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mean IoU      {:.4}", self.mean_iou)?;
        writeln!(f, "mean accuracy {:.4}", self.mean_accuracy)?;
        writeln!(f, "pixels        {} ({} correct)", self.total_pixels, self.correct_pixels)?;
        for (i, (iou, acc)) in self
            .per_class_iou
            .iter()
            .zip(&self.per_class_accuracy)
            .enumerate()
        {
            match (iou, acc) {
                (Some(iou), Some(acc)) => {
                    writeln!(f, "  class {i:>2}: iou {iou:.4}  acc {acc:.4}")?
                }
                _ => writeln!(f, "  class {i:>2}: absent from ground truth")?,
            }
        }
        Ok(())
    }
}
