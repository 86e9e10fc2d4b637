//! Confusion matrices and intersection-over-union.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricError {
    #[error("no class has a non-zero union; nothing was evaluated")]
    Empty,
    #[error("prediction/reference length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("class {class} out of range for {num_classes} classes")]
    Class { class: u8, num_classes: usize },
}

/// `counts[ref * K + pred]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    /// Accumulates one mask pair; reference pixels equal to `ignore` are
    /// skipped.
    pub fn add(&mut self, reference: &[u8], prediction: &[u8], ignore: u8) -> Result<(), MetricError> {
        if reference.len() != prediction.len() {
            return Err(MetricError::Length(reference.len(), prediction.len()));
        }
        let k = self.num_classes;
        for (&r, &p) in reference.iter().zip(prediction) {
            if r == ignore {
                continue;
            }
            for c in [r, p] {
                if c as usize >= k {
                    return Err(MetricError::Class { class: c, num_classes: k });
                }
            }
            self.counts[r as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn get(&self, reference: usize, prediction: usize) -> u64 {
        self.counts[reference * self.num_classes + prediction]
    }

    /// IoU per class; `None` where the union is empty.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let k = self.num_classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..k).map(|j| self.get(c, j)).sum();
                let col: u64 = (0..k).map(|i| self.get(i, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU in percent over classes with a non-empty union.
    pub fn miou(&self) -> Result<f64, MetricError> {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(MetricError::Empty);
        }
        Ok(100.0 * ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> Option<f64> {
        let total = self.total();
        let diag: u64 = (0..self.num_classes).map(|c| self.get(c, c)).sum();
        (total > 0).then(|| 100.0 * diag as f64 / total as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentationMetrics {
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub pixel_accuracy: f64,
    pub loss: f64,
    pub confusion: ConfusionMatrix,
}

/// Index of the largest logit per pixel for `[B, K, H, W]` data; ties go
/// to the lower class.
pub fn argmax_classes(logits: &[f32], batch: usize, classes: usize, pixels: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(batch * pixels);
    for b in 0..batch {
        let base = b * classes * pixels;
        for p in 0..pixels {
            let mut best = (f32::NEG_INFINITY, 0u8);
            for k in 0..classes {
                let v = logits[base + k * pixels + p];
                if v > best.0 {
                    best = (v, k as u8);
                }
            }
            out.push(best.1);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_built_two_by_two() {
        let mut cm = ConfusionMatrix::new(2);
        cm.add(&[0, 0, 1, 1], &[0, 1, 1, 1], 255).unwrap();
        let iou = cm.per_class_iou();
        assert_eq!(iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((cm.miou().unwrap() - 58.333333).abs() < 1e-4);
    }

    #[test]
    fn absent_class_is_excluded() {
        let mut cm = ConfusionMatrix::new(2);
        cm.add(&[0, 0, 0], &[0, 0, 0], 255).unwrap();
        assert_eq!(cm.miou().unwrap(), 100.0);
    }

    #[test]
    fn perfect_three_classes() {
        let mut cm = ConfusionMatrix::new(3);
        cm.add(&[0, 1, 2, 2], &[0, 1, 2, 2], 255).unwrap();
        assert_eq!(cm.miou().unwrap(), 100.0);
    }

    #[test]
    fn empty_evaluation_rejected() {
        let mut cm = ConfusionMatrix::new(2);
        cm.add(&[255, 255], &[0, 1], 255).unwrap();
        assert_eq!(cm.miou(), Err(MetricError::Empty));
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn argmax_breaks_ties_low() {
        // one image, two classes, two pixels
        assert_eq!(argmax_classes(&[1.0, 0.0, 1.0, 2.0], 1, 2, 2), vec![0, 1]);
    }
}
