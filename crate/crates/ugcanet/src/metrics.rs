//! Segmentation metrics from per-pixel confusion counts.

use crate::tensor::{Tensor, TensorError};

/// Pixel confusion counts between a predicted and a ground-truth mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn accumulate(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

/// Dice, IoU, recall and precision for one mask pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegMetrics {
    pub dice: f64,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
}

impl SegMetrics {
    /// Ratios with empty denominators are vacuously 1 (notably
    /// empty-vs-empty, which scores 1 on all four metrics).
    pub fn from_counts(c: &ConfusionCounts) -> Self {
        let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
        SegMetrics {
            dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
            iou: ratio(c.tp, c.tp + c.fp + c.fn_),
            recall: ratio(c.tp, c.tp + c.fn_),
            precision: ratio(c.tp, c.tp + c.fp),
        }
    }
}

/// Count per-pixel agreement of two binary masks of equal dims.
pub fn confusion(pred: &Tensor, gt: &Tensor) -> Result<ConfusionCounts, TensorError> {
    if pred.numel() != gt.numel() {
        return Err(TensorError::ShapeMismatch {
            op: "dice_iou",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p != 0.0, g != 0.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `(dice, iou, recall, precision)` of binary `pred` against `gt`.
pub fn dice_iou(pred: &Tensor, gt: &Tensor) -> Result<SegMetrics, TensorError> {
    Ok(SegMetrics::from_counts(&confusion(pred, gt)?))
}

/// Threshold sigmoid(logits) at 0.5 into a binary mask.
pub fn binarize_logits(logits: &Tensor) -> Tensor {
    let data = logits
        .data()
        .iter()
        .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
        .collect();
    Tensor::new(logits.shape().to_vec(), data).expect("same shape")
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64;
    (mean, var.sqrt())
}
