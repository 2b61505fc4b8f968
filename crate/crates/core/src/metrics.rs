//! Confusion-matrix based segmentation metrics: mIoU, pixel accuracy, per-class IoU.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::mask::ClassMask;

/// `counts[g * C + p]` = pixels with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        assert!(classes > 0);
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

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c * self.classes..(c + 1) * self.classes].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.classes).map(|g| self.get(g, c)).sum()
    }

    pub fn accumulate(&mut self, pred: &ClassMask, gt: &ClassMask) -> Result<()> {
        if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
            return Err(Error::dim(alloc::format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height(),
                pred.width(),
                gt.height(),
                gt.width()
            )));
        }
        pred.check_classes(self.classes)?;
        gt.check_classes(self.classes)?;
        for (&p, &g) in pred.ids().iter().zip(gt.ids()) {
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::dim("cannot merge confusion matrices of different class counts"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Intersection and union counts of class `c`.
    pub fn intersection_union(&self, c: usize) -> (u64, u64) {
        let tp = self.get(c, c);
        (tp, self.row_sum(c) + self.col_sum(c) - tp)
    }

    pub fn metrics(&self) -> Result<MetricReport> {
        let total = self.total();
        if total == 0 {
            return Err(Error::contract("metrics of an empty confusion matrix"));
        }
        let mut class_iou = Vec::with_capacity(self.classes);
        let mut ignored = Vec::new();
        for c in 0..self.classes {
            if self.row_sum(c) == 0 {
                ignored.push(c);
                class_iou.push(None);
            } else {
                let (i, u) = self.intersection_union(c);
                class_iou.push(Some(i as f64 / u as f64));
            }
        }
        let present: Vec<f64> = class_iou.iter().flatten().copied().collect();
        let miou = present.iter().sum::<f64>() / present.len() as f64;
        Ok(MetricReport {
            miou,
            pixel_accuracy: self.trace() as f64 / total as f64,
            class_iou,
            mean_class_iou: miou,
            evaluated_pixels: total,
            ignored_classes: ignored,
            scenarios: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// Mean IoU over classes present in the ground truth.
    pub miou: f64,
    pub pixel_accuracy: f64,
    /// IoU per class; `None` for classes absent from the ground truth.
    pub class_iou: Vec<Option<f64>>,
    /// Aggregate class-wise IoU column: unweighted mean over present classes.
    pub mean_class_iou: f64,
    pub evaluated_pixels: u64,
    pub ignored_classes: Vec<usize>,
    /// Per-scenario breakdown, keyed by scenario name.
    pub scenarios: Vec<(String, MetricReport)>,
}

impl MetricReport {
    pub fn scenario(&self, name: &str) -> Option<&MetricReport> {
        self.scenarios.iter().find(|(n, _)| n == name).map(|(_, r)| r)
    }
}
