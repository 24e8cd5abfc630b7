//! Confusion matrix and segmentation scores: per-class accuracy, mAcc,
//! per-class IOU (Pascal convention), mIOU, global accuracy.

use crate::error::{Error, Result};

/// Row = ground truth class, column = predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    label_count: usize,
}

impl ConfusionMatrix {
    pub fn new(label_count: usize) -> Self {
        ConfusionMatrix {
            counts: vec![0; label_count * label_count],
            label_count,
        }
    }

    pub fn label_count(&self) -> usize {
        self.label_count
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.label_count + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tallies predictions against ground truth; unlabeled points
    /// (`gt == None`) are skipped.
    pub fn accumulate(&mut self, gt: &[Option<usize>], pred: &[usize]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::InvalidInput(format!(
                "gt length {} != pred length {}",
                gt.len(),
                pred.len()
            )));
        }
        for (&g, &p) in gt.iter().zip(pred.iter()) {
            let Some(g) = g else { continue };
            if g >= self.label_count || p >= self.label_count {
                return Err(Error::InvalidInput(format!(
                    "label out of range: gt {g}, pred {p}, L {}",
                    self.label_count
                )));
            }
            self.counts[g * self.label_count + p] += 1;
        }
        Ok(())
    }

    /// Merges another matrix (sharded accumulation).
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.label_count != other.label_count {
            return Err(Error::InvalidInput("label counts differ".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(other.counts.iter()) {
            *a += b;
        }
        Ok(())
    }

    pub fn from_counts(label_count: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != label_count * label_count {
            return Err(Error::InvalidInput("counts length != L*L".into()));
        }
        Ok(ConfusionMatrix {
            counts,
            label_count,
        })
    }
}

/// Evaluation measures derived from a confusion matrix. Classes absent from
/// both ground truth and predictions are `None` and excluded from the means.
#[derive(Debug, Clone)]
pub struct Scores {
    pub per_class_acc: Vec<Option<f64>>,
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_acc: f64,
    pub mean_iou: f64,
    pub global_acc: f64,
}

/// `acc_i = tp_i / (tp_i + fn_i)`, `IOU_i = tp_i / (tp_i + fn_i + fp_i)`,
/// means over evaluated classes, global accuracy = trace / total.
pub fn scores(cm: &ConfusionMatrix) -> Result<Scores> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidInput("empty confusion matrix".into()));
    }
    let l = cm.label_count;
    let mut per_class_acc = vec![None; l];
    let mut per_class_iou = vec![None; l];
    let mut trace = 0u64;
    for i in 0..l {
        let tp = cm.count(i, i);
        trace += tp;
        let gt_i: u64 = (0..l).map(|j| cm.count(i, j)).sum();
        let pred_i: u64 = (0..l).map(|j| cm.count(j, i)).sum();
        if gt_i == 0 && pred_i == 0 {
            continue;
        }
        let fn_i = gt_i - tp;
        let fp_i = pred_i - tp;
        // Predicted-but-never-true classes score 0 accuracy.
        let acc = if gt_i > 0 { tp as f64 / gt_i as f64 } else { 0.0 };
        let iou = tp as f64 / (tp + fn_i + fp_i) as f64;
        per_class_acc[i] = Some(acc);
        per_class_iou[i] = Some(iou);
    }
    let evaluated = per_class_acc.iter().flatten().count();
    let mean_acc = per_class_acc.iter().flatten().sum::<f64>() / evaluated as f64;
    let mean_iou = per_class_iou.iter().flatten().sum::<f64>() / evaluated as f64;
    Ok(Scores {
        per_class_acc,
        per_class_iou,
        mean_acc,
        mean_iou,
        global_acc: trace as f64 / total as f64,
    })
}

impl Scores {
    /// CSV report: one row per class plus a summary row.
    pub fn to_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("class,acc,iou\n");
        for (i, (acc, iou)) in self
            .per_class_acc
            .iter()
            .zip(self.per_class_iou.iter())
            .enumerate()
        {
            let name = class_names.get(i).cloned().unwrap_or_else(|| i.to_string());
            match (acc, iou) {
                (Some(a), Some(j)) => out.push_str(&format!("{name},{a:.6},{j:.6}\n")),
                _ => out.push_str(&format!("{name},,\n")),
            }
        }
        out.push_str(&format!(
            "mean,{:.6},{:.6}\nglobal_acc,{:.6},\n",
            self.mean_acc, self.mean_iou, self.global_acc
        ));
        out
    }

    /// Aligned plain-text table mirroring the usual benchmark layout.
    pub fn to_table(&self, class_names: &[String]) -> String {
        let width = class_names
            .iter()
            .map(|n| n.len())
            .chain(["class".len(), "global acc".len()])
            .max()
            .unwrap_or(8);
        let mut out = format!("{:w$}  {:>8}  {:>8}\n", "class", "acc", "IOU", w = width);
        for (i, (acc, iou)) in self
            .per_class_acc
            .iter()
            .zip(self.per_class_iou.iter())
            .enumerate()
        {
            let name = class_names.get(i).cloned().unwrap_or_else(|| i.to_string());
            match (acc, iou) {
                (Some(a), Some(j)) => out.push_str(&format!(
                    "{:w$}  {:>8.4}  {:>8.4}\n",
                    name,
                    a,
                    j,
                    w = width
                )),
                _ => out.push_str(&format!("{:w$}  {:>8}  {:>8}\n", name, "-", "-", w = width)),
            }
        }
        out.push_str(&format!(
            "{:w$}  {:>8.4}  {:>8.4}\n{:w$}  {:>8.4}\n",
            "mean",
            self.mean_acc,
            self.mean_iou,
            "global acc",
            self.global_acc,
            w = width
        ));
        out
    }
}
