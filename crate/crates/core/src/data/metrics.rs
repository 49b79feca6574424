//! Pooled per-class IoU and fold mIoU.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Single-label segmentation: `0` is background, `k > 0` is category id `k`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!("{} labels for a {height}x{width} map", labels.len())));
        }
        Ok(Self { height, width, labels })
    }
}

/// True positive, false positive and false negative pixel counts for one
/// class. Merging is plain integer addition, so partial counts from any
/// split of the images combine in any order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn merge(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    /// `None` when the class appears in neither predictions nor ground truth.
    pub fn iou(&self) -> Option<f64> {
        let denom = self.tp + self.fp + self.fn_;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }
}

/// Running counts for a fixed list of scored classes.
#[derive(Clone, Debug, PartialEq)]
pub struct IouAccumulator {
    classes: Vec<(u32, String)>,
    counts: Vec<Confusion>,
    images: usize,
}

impl IouAccumulator {
    pub fn new(classes: &[(u32, &str)]) -> Self {
        Self {
            classes: classes.iter().map(|(id, n)| (*id, n.to_string())).collect(),
            counts: vec![Confusion::default(); classes.len()],
            images: 0,
        }
    }

    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if pred.height != truth.height || pred.width != truth.width || pred.labels.len() != truth.labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, truth.height, truth.width
            )));
        }
        for (k, (id, _)) in self.classes.iter().enumerate() {
            let c = &mut self.counts[k];
            for (&p, &t) in pred.labels.iter().zip(&truth.labels) {
                match (p == *id, t == *id) {
                    (true, true) => c.tp += 1,
                    (true, false) => c.fp += 1,
                    (false, true) => c.fn_ += 1,
                    (false, false) => {}
                }
            }
        }
        self.images += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &IouAccumulator) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::CategoryMismatch("merging accumulators over different classes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.merge(b);
        }
        self.images += other.images;
        Ok(())
    }

    pub fn counts(&self) -> impl Iterator<Item = (&str, &Confusion)> {
        self.classes.iter().map(|(_, n)| n.as_str()).zip(&self.counts)
    }

    pub fn report(&self) -> Result<FoldReport> {
        if self.images == 0 || self.classes.is_empty() {
            return Err(Error::EmptyEvaluation);
        }
        let mut per_class_iou = BTreeMap::new();
        let mut absent_classes = Vec::new();
        for ((_, name), c) in self.classes.iter().zip(&self.counts) {
            let iou = c.iou().unwrap_or_else(|| {
                absent_classes.push(name.clone());
                1.0
            });
            per_class_iou.insert(name.clone(), iou);
        }
        absent_classes.sort();
        let miou = per_class_iou.values().sum::<f64>() / per_class_iou.len() as f64;
        Ok(FoldReport { per_class_iou, miou, absent_classes })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub per_class_iou: BTreeMap<String, f64>,
    pub miou: f64,
    /// Classes missing from both predictions and ground truth; scored 1.0.
    pub absent_classes: Vec<String>,
}

/// Mean IoU over `classes`, with pixel counts pooled over all images before
/// each ratio is taken.
pub fn miou(preds: &[LabelMap], truths: &[LabelMap], classes: &[(u32, &str)]) -> Result<FoldReport> {
    if preds.len() != truths.len() {
        return Err(Error::ShapeMismatch(format!("{} predictions for {} ground truths", preds.len(), truths.len())));
    }
    let mut acc = IouAccumulator::new(classes);
    for (p, t) in preds.iter().zip(truths) {
        acc.add(p, t)?;
    }
    acc.report()
}
