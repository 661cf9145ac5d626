//! Classification branch and the masked multi-task losses.
//!
//! The branch pools the context-enhanced F4 into a shared vector and applies
//! three independent FC heads (anatomical site: 10-way, lesion type: 6-way,
//! HP status: 1 logit). Each loss term is gated by a per-sample 0/1 task
//! indicator, so a sample contributes nothing — value or gradient — to heads
//! it has no ground truth for.

use super::encoder::FeaturePyramid;
use super::{Init, Linear, ParamStore};
use crate::tensor::{Graph, Result, Tensor, TensorError, Value};

pub const POS_CLASSES: usize = 10;
pub const LE_CLASSES: usize = 6;

/// Per-sample 0/1 flags marking which tasks carry ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TaskIndicator {
    pub pos: bool,
    pub le: bool,
    pub hp: bool,
    pub seg: bool,
}

impl TaskIndicator {
    pub fn all() -> Self {
        Self {
            pos: true,
            le: true,
            hp: true,
            seg: true,
        }
    }
}

/// Segmentation logits plus the three classification logit sets.
#[derive(Debug, Clone, Copy)]
pub struct TaskOutputs {
    pub seg_logits: Value,
    pub pos_logits: Value,
    pub le_logits: Value,
    pub hp_logit: Value,
}

/// Average pool on the context-enhanced F4 feeding three FC heads.
pub struct ClassificationBranch {
    pos: Linear,
    le: Linear,
    hp: Linear,
}

impl ClassificationBranch {
    pub fn new(init: &mut Init, c4: usize) -> Self {
        Self {
            pos: Linear::new(init, "heads.pos", c4, POS_CLASSES, true),
            le: Linear::new(init, "heads.le", c4, LE_CLASSES, true),
            hp: Linear::new(init, "heads.hp", c4, 1, true),
        }
    }

    /// Returns `(pos [N,10], le [N,6], hp [N,1])`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pyramid: &FeaturePyramid,
    ) -> Result<(Value, Value, Value)> {
        let shared = g.global_avg_pool(pyramid.f4)?;
        Ok((
            self.pos.forward(g, store, shared)?,
            self.le.forward(g, store, shared)?,
            self.hp.forward(g, store, shared)?,
        ))
    }
}

/// Batch-level loss targets. One-hot rows are all-zero where the task
/// indicator is 0; masks are per-sample because their weight maps are.
#[derive(Debug, Clone)]
pub struct LossTargets {
    pub pos_onehot: Tensor,
    pub mu_pos: Vec<f32>,
    pub le_onehot: Tensor,
    pub mu_le: Vec<f32>,
    pub hp: Vec<f32>,
    pub mu_hp: Vec<f32>,
    /// `[1,H,W]` binary mask per sample when the segmentation indicator is 1.
    pub masks: Vec<Option<Tensor>>,
}

impl LossTargets {
    pub fn batch_size(&self) -> usize {
        self.mu_pos.len()
    }
}

fn validate_mask_binary(mask: &Tensor) -> Result<()> {
    if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(TensorError::InvalidShape {
            op: "weighted_bce_iou_loss",
            shape: mask.shape().to_vec(),
            detail: "mask values must be exactly 0 or 1".into(),
        });
    }
    Ok(())
}

/// Per-pixel hard-pixel weights `1 + 5 * |mean_pool31(mask) - mask|`. The
/// 31x31 mean pool uses zero padding 15 and a constant 961 divisor, computed
/// separably in f64.
pub fn pixel_weight_map(mask: &Tensor) -> Tensor {
    let shape = mask.shape().to_vec();
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let md = mask.data();
    let k = 15isize;
    // Row pass: sums over a 31-wide window per row.
    let mut rows = vec![0.0f64; md.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            let lo = (x as isize - k).max(0) as usize;
            let hi = ((x as isize + k) as usize).min(w - 1);
            for xx in lo..=hi {
                acc += md[y * w + xx] as f64;
            }
            rows[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0f32; md.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0f64;
            let lo = (y as isize - k).max(0) as usize;
            let hi = ((y as isize + k) as usize).min(h - 1);
            for yy in lo..=hi {
                acc += rows[yy * w + x];
            }
            let mean = acc / 961.0;
            out[y * w + x] = (1.0 + 5.0 * (mean - md[y * w + x] as f64).abs()) as f32;
        }
    }
    Tensor::new(shape, out).expect("same shape")
}

/// Weighted BCE + weighted IoU segmentation loss for a single sample.
///
/// `L = sum(w * bce) / sum(w) + 1 - (sum(w*p*y) + 1) / (sum(w*(p+y-p*y)) + 1)`
/// with `p = sigmoid(logits)` and `w` the hard-pixel weight map.
pub fn weighted_bce_iou_loss(g: &mut Graph, logits: Value, mask: &Tensor) -> Result<Value> {
    let ls = g.shape(logits).to_vec();
    let numel: usize = ls.iter().product();
    if numel != mask.numel() {
        return Err(TensorError::ShapeMismatch {
            op: "weighted_bce_iou_loss",
            lhs: ls,
            rhs: mask.shape().to_vec(),
        });
    }
    validate_mask_binary(mask)?;
    let weights = pixel_weight_map(mask);
    let w_sum: f64 = weights.data().iter().map(|&v| v as f64).sum();
    let wy_sum: f64 = weights
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&wv, &yv)| wv as f64 * yv as f64)
        .collect::<Vec<_>>()
        .iter()
        .sum();

    let y = g.input(Tensor::new(ls.clone(), mask.data().to_vec())?);
    let w = g.input(Tensor::new(ls.clone(), weights.data().to_vec())?);

    // Weighted BCE, normalised by the weight mass.
    let bce = g.bce_with_logits(logits, y)?;
    let wbce = g.mul(bce, w)?;
    let bce_sum = g.sum(wbce)?;
    let bce_term = g.affine(bce_sum, (1.0 / w_sum) as f32, 0.0)?;

    // Weighted IoU with +1 smoothing. Since y and w are constants:
    //   inter = sum(w*p*y), union = sum(w*(1-y)*p) + sum(w*y).
    let p = g.sigmoid(logits)?;
    let wy = g.mul(w, y)?;
    let inter_terms = g.mul(p, wy)?;
    let inter = g.sum(inter_terms)?;
    let ones_minus_y = g.affine(y, -1.0, 1.0)?;
    let w_bg = g.mul(w, ones_minus_y)?;
    let bg_terms = g.mul(p, w_bg)?;
    let bg_sum = g.sum(bg_terms)?;
    let union = g.affine(bg_sum, 1.0, (wy_sum + 1.0) as f32)?;
    let inter1 = g.affine(inter, 1.0, 1.0)?;
    let ratio = g.div(inter1, union)?;
    let iou_term = g.affine(ratio, -1.0, 1.0)?;

    g.add(bce_term, iou_term)
}

fn validate_onehot(y: &Tensor, mu: &[f32], classes: usize, op: &'static str) -> Result<()> {
    let n = mu.len();
    if y.shape() != [n, classes] {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: y.shape().to_vec(),
            rhs: vec![n, classes],
        });
    }
    for (i, row) in y.data().chunks_exact(classes).enumerate() {
        if mu[i] == 0.0 {
            continue;
        }
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != classes - 1 {
            return Err(TensorError::InvalidShape {
                op,
                shape: y.shape().to_vec(),
                detail: format!("row {i} is not one-hot while its indicator is 1"),
            });
        }
    }
    Ok(())
}

/// Indicator-masked softmax cross-entropy summed over the batch:
/// `-sum_i mu_i sum_j y_ij ln(max(softmax_ij, 1e-12))`. With `mean` the sum
/// is divided by the number of active samples.
fn masked_ce(
    g: &mut Graph,
    logits: Value,
    y: &Tensor,
    mu: &[f32],
    classes: usize,
    mean: bool,
    op: &'static str,
) -> Result<Value> {
    validate_onehot(y, mu, classes, op)?;
    let n = mu.len();
    if g.shape(logits) != [n, classes] {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: g.shape(logits).to_vec(),
            rhs: vec![n, classes],
        });
    }
    // mu_i * y_ij as one constant coefficient matrix.
    let coeff: Vec<f32> = y
        .data()
        .iter()
        .enumerate()
        .map(|(idx, &v)| v * mu[idx / classes])
        .collect();
    let coeff = g.input(Tensor::new(vec![n, classes], coeff)?);
    let probs = g.softmax_last(logits)?;
    let logp = g.log_clamped(probs)?;
    let picked = g.mul(logp, coeff)?;
    let total = g.sum(picked)?;
    let scale = if mean {
        let active = mu.iter().filter(|&&m| m != 0.0).count();
        if active == 0 {
            0.0
        } else {
            -1.0 / active as f32
        }
    } else {
        -1.0
    };
    g.affine(total, scale, 0.0)
}

/// Anatomical-site loss (10 classes).
pub fn loss_pos(g: &mut Graph, logits: Value, y: &Tensor, mu: &[f32], mean: bool) -> Result<Value> {
    masked_ce(g, logits, y, mu, POS_CLASSES, mean, "loss_pos")
}

/// Lesion-type loss (6 classes).
pub fn loss_le(g: &mut Graph, logits: Value, y: &Tensor, mu: &[f32], mean: bool) -> Result<Value> {
    masked_ce(g, logits, y, mu, LE_CLASSES, mean, "loss_le")
}

/// Indicator-masked binary cross-entropy on the HP logit.
pub fn loss_hp(g: &mut Graph, logit: Value, y: &[f32], mu: &[f32], mean: bool) -> Result<Value> {
    let n = mu.len();
    if g.shape(logit) != [n, 1] {
        return Err(TensorError::ShapeMismatch {
            op: "loss_hp",
            lhs: g.shape(logit).to_vec(),
            rhs: vec![n, 1],
        });
    }
    let yv = g.input(Tensor::new(vec![n, 1], y.to_vec())?);
    let bce = g.bce_with_logits(logit, yv)?;
    let mask = g.input(Tensor::new(vec![n, 1], mu.to_vec())?);
    let masked = g.mul(bce, mask)?;
    let total = g.sum(masked)?;
    let scale = if mean {
        let active = mu.iter().filter(|&&m| m != 0.0).count();
        if active == 0 {
            0.0
        } else {
            1.0 / active as f32
        }
    } else {
        1.0
    };
    g.affine(total, scale, 0.0)
}

/// Indicator-masked segmentation loss summed (or averaged) over the batch.
pub fn loss_seg(g: &mut Graph, seg_logits: Value, targets: &LossTargets, mean: bool) -> Result<Value> {
    let s = g.shape(seg_logits).to_vec();
    let (n, h, w) = (s[0], s[2], s[3]);
    // [N,1,H,W] and [1,N,H,W] share a layout, so per-sample slices are
    // channel slices of the reshaped batch.
    let stacked = g.reshape(seg_logits, vec![1, n, h, w])?;
    let mut total: Option<Value> = None;
    let mut active = 0usize;
    for (i, mask) in targets.masks.iter().enumerate() {
        let Some(mask) = mask else { continue };
        active += 1;
        let sample = g.slice_channels(stacked, i, i + 1)?;
        let sample = g.reshape(sample, vec![1, 1, h, w])?;
        let l = weighted_bce_iou_loss(g, sample, mask)?;
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    match total {
        Some(t) if mean => g.affine(t, 1.0 / active as f32, 0.0),
        Some(t) => Ok(t),
        None => Ok(g.input(Tensor::scalar(0.0))),
    }
}

/// Weighted combination `l1*L_pos + l2*L_le + l3*L_hp + l4*L_seg`.
pub fn total_loss(
    g: &mut Graph,
    outputs: &TaskOutputs,
    targets: &LossTargets,
    lambda: [f32; 4],
    mean: bool,
) -> Result<Value> {
    if lambda.iter().any(|&l| l < 0.0) {
        return Err(TensorError::InvalidShape {
            op: "total_loss",
            shape: vec![],
            detail: "lambda weights must be non-negative".into(),
        });
    }
    let pos = loss_pos(g, outputs.pos_logits, &targets.pos_onehot, &targets.mu_pos, mean)?;
    let le = loss_le(g, outputs.le_logits, &targets.le_onehot, &targets.mu_le, mean)?;
    let hp = loss_hp(g, outputs.hp_logit, &targets.hp, &targets.mu_hp, mean)?;
    let seg = loss_seg(g, outputs.seg_logits, targets, mean)?;
    let mut acc = g.affine(pos, lambda[0], 0.0)?;
    for (term, weight) in [(le, lambda[1]), (hp, lambda[2]), (seg, lambda[3])] {
        let scaled = g.affine(term, weight, 0.0)?;
        acc = g.add(acc, scaled)?;
    }
    Ok(acc)
}

/// One-hot encode a class label.
pub fn one_hot(label: usize, classes: usize) -> Vec<f32> {
    let mut v = vec![0.0; classes];
    v[label] = 1.0;
    v
}
