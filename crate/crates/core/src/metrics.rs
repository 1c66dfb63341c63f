//! Confusion-matrix based IoU / mIoU.
//!
//! Rows are ground-truth classes, columns predicted classes. A prediction of
//! void on a labeled pixel lands in a separate per-class column: it is a
//! false negative for the ground-truth class and a false positive for nobody.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::types::{ClassId, LabelMap, LabelSpace, VOID_ID};

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
    void_predictions: Vec<u64>,
    ignored_pixels: u64,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            void_predictions: vec![0; num_classes],
            ignored_pixels: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    /// Labeled pixels of class `gt` predicted as void.
    pub fn void_predictions(&self, gt: usize) -> u64 {
        self.void_predictions[gt]
    }

    pub fn ignored_pixels(&self) -> u64 {
        self.ignored_pixels
    }

    pub fn total_pixels(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.void_predictions.iter().sum::<u64>() + self.ignored_pixels
    }

    /// Adds one prediction / ground-truth pair.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap, space: &LabelSpace) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(Error::shape(format!(
                "prediction is {}x{} but ground truth is {}x{}",
                pred.width(),
                pred.height(),
                gt.width(),
                gt.height()
            )));
        }
        if space.num_classes() != self.num_classes {
            return Err(Error::shape(format!(
                "matrix has {} classes, label space {}",
                self.num_classes,
                space.num_classes()
            )));
        }
        let n = self.num_classes;
        for (&p, &g) in pred.values().iter().zip(gt.values()) {
            if g == VOID_ID {
                self.ignored_pixels += 1;
                continue;
            }
            if g as usize >= n {
                return Err(Error::Invalid(format!("ground-truth id {g} outside label space")));
            }
            if p == VOID_ID {
                self.void_predictions[g as usize] += 1;
            } else if (p as usize) < n {
                self.counts[g as usize * n + p as usize] += 1;
            } else {
                return Err(Error::Invalid(format!("predicted id {p} outside label space")));
            }
        }
        Ok(())
    }

    /// Elementwise sum, for merging partial matrices.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::shape("cannot merge matrices of different class counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.void_predictions.iter_mut().zip(&other.void_predictions) {
            *a += b;
        }
        self.ignored_pixels += other.ignored_pixels;
        Ok(())
    }

    /// `(TP, FP, FN)` for one class.
    pub fn class_counts(&self, class: usize) -> (u64, u64, u64) {
        let n = self.num_classes;
        let tp = self.count(class, class);
        let row: u64 = (0..n).map(|p| self.count(class, p)).sum();
        let col: u64 = (0..n).map(|g| self.count(g, class)).sum();
        (tp, col - tp, row - tp + self.void_predictions[class])
    }
}

pub fn confusion_accumulate(
    pred: &LabelMap,
    gt: &LabelMap,
    space: &LabelSpace,
    mut acc: ConfusionMatrix,
) -> Result<ConfusionMatrix> {
    acc.accumulate(pred, gt, space)?;
    Ok(acc)
}

/// Per-class IoU; `None` marks classes with no ground truth and no
/// prediction, which are left out of averages.
pub fn iou_per_class(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.num_classes())
        .map(|c| {
            let (tp, fp, fn_) = cm.class_counts(c);
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect()
}

/// Mean IoU over `subset` (or every class when `None`), skipping absent
/// classes.
pub fn miou(ious: &[Option<f64>], subset: Option<&[ClassId]>) -> Result<f64> {
    let selected: Vec<f64> = match subset {
        Some(ids) => {
            let mut values = Vec::with_capacity(ids.len());
            for &c in ids {
                let v = ious.get(c as usize).ok_or_else(|| {
                    Error::Invalid(format!("class {c} not in a {}-class vector", ious.len()))
                })?;
                values.extend(*v);
            }
            values
        }
        None => ious.iter().flatten().copied().collect(),
    };
    if selected.is_empty() {
        return Err(Error::Invalid("no present class to average".into()));
    }
    Ok(selected.iter().sum::<f64>() / selected.len() as f64)
}

/// Confusion matrix of `pairs` (prediction, ground truth).
pub fn evaluate_pairs<'a>(
    pairs: impl IntoIterator<Item = (&'a LabelMap, &'a LabelMap)>,
    space: &LabelSpace,
) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(space.num_classes());
    for (pred, gt) in pairs {
        cm.accumulate(pred, gt, space)?;
    }
    Ok(cm)
}

/// Per-class report used by the CLI table and CSV export.
#[derive(Clone, Debug, Serialize)]
pub struct MetricReport {
    pub class_names: Vec<String>,
    pub ious: Vec<Option<f64>>,
    pub subset: Option<Vec<ClassId>>,
    pub miou: f64,
}

impl MetricReport {
    pub fn new(cm: &ConfusionMatrix, space: &LabelSpace, subset: Option<Vec<ClassId>>) -> Result<Self> {
        let ious = iou_per_class(cm);
        let miou = miou(&ious, subset.as_deref())?;
        Ok(MetricReport {
            class_names: space.class_names.clone(),
            ious,
            subset,
            miou,
        })
    }

    fn in_subset(&self, class: usize) -> bool {
        self.subset
            .as_ref()
            .is_none_or(|s| s.contains(&(class as ClassId)))
    }

    /// `class,iou` rows as percentages with two decimals; absent classes
    /// print `-`. The last row carries the mean.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,iou\n");
        for (c, name) in self.class_names.iter().enumerate() {
            if !self.in_subset(c) {
                continue;
            }
            match self.ious[c] {
                Some(v) => out.push_str(&format!("{name},{:.2}\n", v * 100.0)),
                None => out.push_str(&format!("{name},-\n")),
            }
        }
        out.push_str(&format!("mIoU,{:.2}\n", self.miou * 100.0));
        out
    }

    pub fn to_table(&self) -> String {
        let width = self
            .class_names
            .iter()
            .map(|n| n.len())
            .max()
            .unwrap_or(4)
            .max(4);
        let mut out = format!("{:<width$}  {:>6}\n", "class", "IoU");
        out.push_str(&format!("{}\n", "-".repeat(width + 8)));
        for (c, name) in self.class_names.iter().enumerate() {
            if !self.in_subset(c) {
                continue;
            }
            let value = match self.ious[c] {
                Some(v) => format!("{:.2}", v * 100.0),
                None => "-".to_string(),
            };
            out.push_str(&format!("{name:<width$}  {value:>6}\n"));
        }
        out.push_str(&format!("{}\n", "-".repeat(width + 8)));
        out.push_str(&format!("{:<width$}  {:>6.2}\n", "mIoU", self.miou * 100.0));
        out
    }
}
