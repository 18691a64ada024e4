//! Confusion matrices and intersection-over-union.

use serde::{Deserialize, Serialize};

use crate::data::{LabelMap, IGNORE_INDEX};
use crate::error::{Error, Result};

/// `counts[gt][pred]` over non-ignored pixels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g == IGNORE_INDEX {
                continue;
            }
            let (g, p) = (g as usize, p as usize);
            if g >= self.classes || p >= self.classes {
                return Err(Error::Data(format!(
                    "label {} outside {} classes",
                    g.max(p),
                    self.classes
                )));
            }
            self.counts[g][p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape("confusion matrices of different sizes".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// IoU per class; `None` where the union is empty.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.counts[c][c];
                let gt: u64 = self.counts[c].iter().sum();
                let pred: u64 = self.counts.iter().map(|row| row[c]).sum();
                let union = gt + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a non-empty union.
    pub fn miou(&self) -> Result<f64> {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(Error::UndefinedMetric(
                "every class has an empty union".into(),
            ));
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::UndefinedMetric("no labeled pixels".into()));
        }
        let correct: u64 = (0..self.classes).map(|c| self.counts[c][c]).sum();
        Ok(correct as f64 / total as f64)
    }
}

pub fn confusion_matrix(
    preds: &[LabelMap],
    gts: &[LabelMap],
    classes: usize,
) -> Result<ConfusionMatrix> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            gts.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (p, g) in preds.iter().zip(gts) {
        cm.accumulate(p, g)?;
    }
    Ok(cm)
}

pub fn miou(preds: &[LabelMap], gts: &[LabelMap], classes: usize) -> Result<f64> {
    confusion_matrix(preds, gts, classes)?.miou()
}
