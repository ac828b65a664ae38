//! Confusion matrices and mean intersection-over-union.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::tensorio::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("label {label} at pixel {pixel} is outside [0, {num_classes})")]
    LabelOutOfRange {
        label: i64,
        pixel: usize,
        num_classes: usize,
    },
    #[error("prediction {pred:?} and ground truth {gt:?} differ in shape")]
    ShapeMismatch { pred: Vec<usize>, gt: Vec<usize> },
    #[error("cannot merge matrices over {0} and {1} classes")]
    ClassCountMismatch(usize, usize),
}

/// Rows index ground truth, columns index prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<u64>,
    num_classes: usize,
    ignore_index: Option<i64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize, ignore_index: Option<i64>) -> Self {
        Self {
            counts: vec![0; num_classes * num_classes],
            num_classes,
            ignore_index,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn ignore_index(&self) -> Option<i64> {
        self.ignore_index
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one image worth of pixels; ground-truth pixels equal to the
    /// ignore index are skipped.
    pub fn accumulate(&mut self, pred: ArrayView2<'_, i64>, gt: ArrayView2<'_, i64>) -> Result<(), EvalError> {
        if pred.dim() != gt.dim() {
            return Err(EvalError::ShapeMismatch {
                pred: pred.shape().to_vec(),
                gt: gt.shape().to_vec(),
            });
        }
        let n = self.num_classes as i64;
        let check = |label: i64, pixel: usize| {
            if (0..n).contains(&label) {
                Ok(label as usize)
            } else {
                Err(EvalError::LabelOutOfRange {
                    label,
                    pixel,
                    num_classes: self.num_classes,
                })
            }
        };
        let mut delta = vec![0u64; self.counts.len()];
        for (pixel, (&p, &g)) in pred.iter().zip(gt.iter()).enumerate() {
            if Some(g) == self.ignore_index {
                continue;
            }
            let g = check(g, pixel)?;
            let p = check(p, pixel)?;
            delta[g * self.num_classes + p] += 1;
        }
        self.counts.iter_mut().zip(delta).for_each(|(c, d)| *c += d);
        Ok(())
    }

    /// Element-wise sum; associative and commutative.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), EvalError> {
        if other.num_classes != self.num_classes {
            return Err(EvalError::ClassCountMismatch(self.num_classes, other.num_classes));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    /// Per-class IoU (`None` when the class has neither predictions nor
    /// ground truth) and the mean over the classes that have one.
    pub fn miou(&self) -> (Vec<Option<f64>>, f64) {
        let n = self.num_classes;
        let per_class: Vec<Option<f64>> = (0..n)
            .map(|i| {
                let tp = self.get(i, i);
                let row: u64 = (0..n).map(|j| self.get(i, j)).sum();
                let col: u64 = (0..n).map(|j| self.get(j, i)).sum();
                let denom = row + col - tp;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let mean = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        (per_class, mean)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_i64(
            vec![self.num_classes, self.num_classes],
            self.counts.iter().map(|&c| c as i64).collect(),
        )
        .expect("at least one class")
    }

    pub fn metrics(&self, class_names: &[String]) -> Metrics {
        let (per_class, miou) = self.miou();
        let per_class_iou = per_class
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                let name = class_names.get(i).cloned().unwrap_or_else(|| format!("class_{i}"));
                (name, v)
            })
            .collect();
        Metrics {
            per_class_iou,
            miou,
            pixels_evaluated: self.total(),
        }
    }
}

/// Serialized as `{"per_class_iou": {name: iou | null}, "miou": x, "pixels_evaluated": n}`.
/// Classes absent from both prediction and ground truth are `null` and do
/// not enter the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub per_class_iou: std::collections::BTreeMap<String, Option<f64>>,
    pub miou: f64,
    pub pixels_evaluated: u64,
}
