//! Label maps and segmentation metrics.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::FeatureMap;

/// Label value excluded from every loss and metric.
pub const IGNORE: u8 = 255;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for a {width}x{height} map",
                labels.len()
            )));
        }
        Ok(LabelMap { width, height, labels })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Self {
        LabelMap {
            width,
            height,
            labels: vec![value; width * height],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != IGNORE).count()
    }

    /// Largest non-ignore label, if any.
    pub fn max_label(&self) -> Option<u8> {
        self.labels.iter().copied().filter(|&l| l != IGNORE).max()
    }

    /// Error unless every non-ignore label is below `classes`.
    pub fn check_classes(&self, classes: usize) -> Result<()> {
        match self.max_label() {
            Some(l) if l as usize >= classes => Err(Error::InvalidArgument(format!(
                "label {l} out of range for {classes} classes"
            ))),
            _ => Ok(()),
        }
    }

    /// `K×H×W` indicator map; ignore pixels are all-zero.
    pub fn one_hot(&self, classes: usize) -> FeatureMap<f64> {
        let hw = self.width * self.height;
        let mut out = FeatureMap::zeros(classes, self.height, self.width);
        for (p, &l) in self.labels.iter().enumerate() {
            if (l as usize) < classes {
                out.data[l as usize * hw + p] = 1.0;
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationMetrics {
    pub miou: f64,
    pub acc: f64,
    pub class_acc: f64,
    /// IoU per class, `None` for classes absent from both maps.
    pub iou: Vec<Option<f64>>,
    /// `confusion[g * K + p]` counts pixels with ground truth `g` predicted as `p`.
    pub confusion: Vec<u64>,
    pub classes: usize,
    /// Valid ground-truth pixels whose prediction was the ignore label.
    pub unlabeled: u64,
}

impl SegmentationMetrics {
    pub fn confusion_at(&self, gt: usize, pred: usize) -> u64 {
        self.confusion[gt * self.classes + pred]
    }

    /// `key=value` lines.
    pub fn report(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "miou={:.6}", self.miou);
        let _ = writeln!(s, "acc={:.6}", self.acc);
        let _ = writeln!(s, "class_acc={:.6}", self.class_acc);
        for (k, v) in self.iou.iter().enumerate() {
            if let Some(v) = v {
                let _ = writeln!(s, "iou_{k}={v:.6}");
            }
        }
        s
    }
}

/// Mean summed in sorted order, so relabelling classes cannot change the result.
fn order_free_mean(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v.iter().sum::<f64>() / v.len() as f64
}

/// Confusion-matrix metrics over pixels whose ground truth is not ignored.
///
/// A prediction of the ignore label on a valid pixel counts against the
/// ground-truth class (a false negative) and matches no predicted class.
pub fn segmentation_metrics(gt: &LabelMap, pred: &LabelMap, classes: usize) -> Result<SegmentationMetrics> {
    if (gt.width, gt.height) != (pred.width, pred.height) {
        return Err(Error::ShapeMismatch(format!(
            "label maps {}x{} and {}x{}",
            gt.width, gt.height, pred.width, pred.height
        )));
    }
    gt.check_classes(classes)?;
    pred.check_classes(classes)?;
    let k = classes;
    let mut confusion = vec![0u64; k * k];
    let mut unlabeled = vec![0u64; k];
    for (&g, &p) in gt.labels.iter().zip(&pred.labels) {
        if g == IGNORE {
            continue;
        }
        if p == IGNORE {
            unlabeled[g as usize] += 1;
        } else {
            confusion[g as usize * k + p as usize] += 1;
        }
    }
    let total: u64 = confusion.iter().sum::<u64>() + unlabeled.iter().sum::<u64>();
    if total == 0 {
        return Err(Error::EmptyReduction("segmentation metrics"));
    }
    let mut iou = vec![None; k];
    let mut class_accs = Vec::new();
    let mut trace = 0u64;
    for c in 0..k {
        let tp = confusion[c * k + c];
        trace += tp;
        let gt_count: u64 = (0..k).map(|p| confusion[c * k + p]).sum::<u64>() + unlabeled[c];
        let pred_count: u64 = (0..k).map(|g| confusion[g * k + c]).sum();
        let union = gt_count + pred_count - tp;
        if union > 0 {
            iou[c] = Some(tp as f64 / union as f64);
        }
        if gt_count > 0 {
            class_accs.push(tp as f64 / gt_count as f64);
        }
    }
    let defined: Vec<f64> = iou.iter().flatten().copied().collect();
    Ok(SegmentationMetrics {
        miou: order_free_mean(&defined),
        acc: trace as f64 / total as f64,
        class_acc: order_free_mean(&class_accs),
        iou,
        confusion,
        classes: k,
        unlabeled: unlabeled.iter().sum(),
    })
}
