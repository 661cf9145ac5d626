//! Training and evaluation loops over in-memory datasets.
//!
//! All randomness (batch sampling, augmentation, multi-scale choice) flows
//! from named substreams of the run seed, so toggling one knob never shifts
//! the draws of another and reruns are bit-identical.

use crate::data::augment::{augment, AugmentConfig};
use crate::data::{resize, SampleRecord};
use crate::metrics::{binarize_logits, confusion, ConfusionCounts, SegMetrics};
use crate::nn::heads::{total_loss, LossTargets, TaskOutputs, LE_CLASSES, POS_CLASSES};
use crate::nn::model::UgcaNet;
use crate::opt::{Adam, LrSchedule};
use crate::rng;
use crate::tensor::{Graph, Result as TResult, Tensor, TensorError};
use rand::Rng;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Network input size (square, multiple of 32).
    pub size: usize,
    pub lr: f32,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    /// Loss weights (pos, le, hp, seg).
    pub lambda: [f32; 4],
    /// Divide each task loss by its active-sample count instead of summing.
    pub mean_loss: bool,
    /// Draw the input size per step from the {0.75, 1, 1.25} scale set.
    pub multiscale: bool,
    pub augment: bool,
}

impl TrainConfig {
    pub fn desk(seed: u64) -> Self {
        Self {
            size: 64,
            lr: 1e-4,
            steps: 200,
            batch: 8,
            seed,
            lambda: [1.0; 4],
            mean_loss: false,
            multiscale: false,
            augment: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f32,
    pub lr: f32,
}

/// Stack same-sized samples into a batch input plus loss targets.
pub fn batch_to_tensors(samples: &[SampleRecord]) -> TResult<(Tensor, LossTargets)> {
    let n = samples.len();
    let (h, w) = samples[0].size();
    let mut image = Vec::with_capacity(n * 3 * h * w);
    let mut pos_onehot = vec![0.0f32; n * POS_CLASSES];
    let mut le_onehot = vec![0.0f32; n * LE_CLASSES];
    let mut hp = vec![0.0f32; n];
    let (mut mu_pos, mut mu_le, mut mu_hp) = (vec![0.0f32; n], vec![0.0f32; n], vec![0.0f32; n]);
    let mut masks = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        if s.size() != (h, w) {
            return Err(TensorError::ShapeMismatch {
                op: "batch_to_tensors",
                lhs: vec![h, w],
                rhs: vec![s.size().0, s.size().1],
            });
        }
        image.extend_from_slice(s.image.data());
        if let Some(p) = s.labels.pos {
            pos_onehot[i * POS_CLASSES + p] = 1.0;
            mu_pos[i] = 1.0;
        }
        if let Some(le) = s.labels.le {
            le_onehot[i * LE_CLASSES + le] = 1.0;
            mu_le[i] = 1.0;
        }
        if let Some(bit) = s.labels.hp {
            hp[i] = bit as f32;
            mu_hp[i] = 1.0;
        }
        masks.push(s.mask.clone());
    }
    Ok((
        Tensor::new(vec![n, 3, h, w], image)?,
        LossTargets {
            pos_onehot: Tensor::new(vec![n, POS_CLASSES], pos_onehot)?,
            mu_pos,
            le_onehot: Tensor::new(vec![n, LE_CLASSES], le_onehot)?,
            mu_le,
            hp,
            mu_hp,
            masks,
        },
    ))
}

/// One optimisation run; returns the loss curve.
pub fn train(
    model: &mut UgcaNet,
    samples: &[SampleRecord],
    cfg: &TrainConfig,
    schedule: LrSchedule,
) -> TResult<Vec<TrainRecord>> {
    assert!(!samples.is_empty(), "cannot train on an empty dataset");
    let mut sampling = rng::stream(cfg.seed, "sampling");
    let mut augment_rng = rng::stream(cfg.seed, "augment");
    let mut scale_rng = rng::stream(cfg.seed, "multiscale");
    let scale_set = resize::multiscale_sizes(cfg.size);
    let mut adam = Adam::new(cfg.lr, model.store.len());
    let aug_cfg = AugmentConfig::default();
    let mut curve = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let size = if cfg.multiscale {
            scale_set[scale_rng.random_range(0..scale_set.len())]
        } else {
            cfg.size
        };
        let mut batch = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch.min(samples.len()).max(1) {
            let idx = sampling.random_range(0..samples.len());
            let mut s = samples[idx].clone();
            if cfg.augment {
                augment(&mut s, &mut augment_rng, &aug_cfg);
            }
            batch.push(s.resized(size, size)?);
        }
        let (input, targets) = batch_to_tensors(&batch)?;
        let mut g = Graph::new();
        let x = g.input(input);
        let outputs = model.forward(&mut g, x)?;
        let loss = total_loss(&mut g, &outputs, &targets, cfg.lambda, cfg.mean_loss)?;
        let loss_value = g.data(loss)[0];
        g.backward(loss)?;
        let lr_scale = schedule.scale(step);
        adam.step(&mut model.store, &g, lr_scale);
        curve.push(TrainRecord {
            step,
            loss: loss_value,
            lr: cfg.lr * lr_scale,
        });
    }
    Ok(curve)
}

/// Model outputs for one sample at the evaluation size.
#[derive(Debug, Clone)]
pub struct Prediction {
    /// Binary `[1,H,W]` mask from thresholding sigmoid(logits) at 0.5.
    pub mask: Tensor,
    pub pos_argmax: usize,
    pub le_argmax: usize,
    pub hp_positive: bool,
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Run inference over `samples` (resized to `size`) in deterministic batches.
pub fn predict(model: &UgcaNet, samples: &[SampleRecord], size: usize) -> TResult<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(8) {
        let resized: Vec<SampleRecord> = chunk
            .iter()
            .map(|s| s.resized(size, size))
            .collect::<TResult<_>>()?;
        let (input, _) = batch_to_tensors(&resized)?;
        let mut g = Graph::new();
        let x = g.input(input);
        let outputs: TaskOutputs = model.forward(&mut g, x)?;
        let seg = g.detach(outputs.seg_logits);
        let pos = g.data(outputs.pos_logits);
        let le = g.data(outputs.le_logits);
        let hp = g.data(outputs.hp_logit);
        for (i, _) in chunk.iter().enumerate() {
            let plane = size * size;
            let logits = Tensor::new(
                vec![1, size, size],
                seg.data()[i * plane..(i + 1) * plane].to_vec(),
            )?;
            out.push(Prediction {
                mask: binarize_logits(&logits),
                pos_argmax: argmax(&pos[i * POS_CLASSES..(i + 1) * POS_CLASSES]),
                le_argmax: argmax(&le[i * LE_CLASSES..(i + 1) * LE_CLASSES]),
                hp_positive: hp[i] > 0.0,
            });
        }
    }
    Ok(out)
}

/// How segmentation metrics aggregate across a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregate {
    /// Mean of per-image metrics (the default reporting convention).
    PerImage,
    /// Metrics of the summed dataset-level confusion counts.
    Global,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    /// `(sample index, metrics)` for every segmentation-annotated sample.
    pub per_sample: Vec<(usize, SegMetrics)>,
    pub seg: Option<SegMetrics>,
    pub pos_accuracy: Option<f64>,
    pub le_accuracy: Option<f64>,
    pub hp_accuracy: Option<f64>,
}

/// Score predictions against their samples. Ground-truth masks are resized
/// (nearest) to the prediction size.
pub fn score(
    samples: &[SampleRecord],
    predictions: &[Prediction],
    aggregate: Aggregate,
) -> TResult<EvalReport> {
    assert_eq!(samples.len(), predictions.len());
    let mut report = EvalReport::default();
    let mut global = ConfusionCounts::default();
    let (mut pos_ok, mut pos_n) = (0usize, 0usize);
    let (mut le_ok, mut le_n) = (0usize, 0usize);
    let (mut hp_ok, mut hp_n) = (0usize, 0usize);
    for (i, (s, p)) in samples.iter().zip(predictions).enumerate() {
        if let Some(gt) = &s.mask {
            let (h, w) = (p.mask.shape()[1], p.mask.shape()[2]);
            let gt = resize::resize_nearest(gt, h, w)?;
            let c = confusion(&p.mask, &gt)?;
            report.per_sample.push((i, SegMetrics::from_counts(&c)));
            global.accumulate(&c);
        }
        if let Some(label) = s.labels.pos {
            pos_n += 1;
            pos_ok += usize::from(p.pos_argmax == label);
        }
        if let Some(label) = s.labels.le {
            le_n += 1;
            le_ok += usize::from(p.le_argmax == label);
        }
        if let Some(label) = s.labels.hp {
            hp_n += 1;
            hp_ok += usize::from(p.hp_positive == (label == 1));
        }
    }
    if !report.per_sample.is_empty() {
        report.seg = Some(match aggregate {
            Aggregate::Global => SegMetrics::from_counts(&global),
            Aggregate::PerImage => {
                let n = report.per_sample.len() as f64;
                let sum = |f: fn(&SegMetrics) -> f64| {
                    report.per_sample.iter().map(|(_, m)| f(m)).sum::<f64>() / n
                };
                SegMetrics {
                    dice: sum(|m| m.dice),
                    iou: sum(|m| m.iou),
                    recall: sum(|m| m.recall),
                    precision: sum(|m| m.precision),
                }
            }
        });
    }
    report.pos_accuracy = (pos_n > 0).then(|| pos_ok as f64 / pos_n as f64);
    report.le_accuracy = (le_n > 0).then(|| le_ok as f64 / le_n as f64);
    report.hp_accuracy = (hp_n > 0).then(|| hp_ok as f64 / hp_n as f64);
    Ok(report)
}

/// Deterministic train/test split by index (front `train_fraction` after a
/// seeded shuffle).
pub fn split_indices(n: usize, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut indices: Vec<usize> = (0..n).collect();
    indices.shuffle(&mut rng::stream(seed, "split"));
    let cut = ((n as f64) * train_fraction).round() as usize;
    let cut = cut.clamp(1.min(n), n.saturating_sub(1).max(1));
    let train = indices[..cut].to_vec();
    let test = indices[cut..].to_vec();
    (train, test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{synth_dataset, TaskMix};
    use crate::nn::model::ModelConfig;

    #[test]
    fn loss_curve_is_deterministic_across_runs() {
        let samples = synth_dataset(8, 32, TaskMix::seg_only(), 3);
        let cfg = TrainConfig {
            size: 32,
            steps: 3,
            batch: 2,
            ..TrainConfig::desk(3)
        };
        let run = || {
            let mut model = UgcaNet::new(ModelConfig::tiny(), 3).unwrap();
            train(&mut model, &samples, &cfg, LrSchedule::Constant).unwrap()
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits(), "step {}", x.step);
        }
    }

    #[test]
    fn batch_assembly_matches_labels() {
        let samples = synth_dataset(4, 32, TaskMix::gi(), 5);
        let (input, targets) = batch_to_tensors(&samples).unwrap();
        assert_eq!(input.shape(), &[4, 3, 32, 32]);
        for (i, s) in samples.iter().enumerate() {
            assert_eq!(targets.mu_pos[i] == 1.0, s.labels.pos.is_some());
            assert_eq!(targets.mu_le[i] == 1.0, s.labels.le.is_some());
            assert_eq!(targets.mu_hp[i] == 1.0, s.labels.hp.is_some());
            assert_eq!(targets.masks[i].is_some(), s.mask.is_some());
            if let Some(p) = s.labels.pos {
                assert_eq!(targets.pos_onehot.data()[i * POS_CLASSES + p], 1.0);
            }
        }
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let (tr, te) = split_indices(20, 0.8, 7);
        let (tr2, te2) = split_indices(20, 0.8, 7);
        assert_eq!(tr, tr2);
        assert_eq!(te, te2);
        assert_eq!(tr.len(), 16);
        assert_eq!(te.len(), 4);
        let mut all: Vec<usize> = tr.iter().chain(te.iter()).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn perfect_and_disjoint_predictions_score_as_expected() {
        let samples = synth_dataset(3, 32, TaskMix::seg_only(), 11);
        let predictions: Vec<Prediction> = samples
            .iter()
            .map(|s| Prediction {
                mask: s.mask.clone().unwrap(),
                pos_argmax: 0,
                le_argmax: 0,
                hp_positive: false,
            })
            .collect();
        let report = score(&samples, &predictions, Aggregate::PerImage).unwrap();
        let seg = report.seg.unwrap();
        assert_eq!(seg.dice, 1.0);
        assert_eq!(seg.iou, 1.0);
        assert!(report.pos_accuracy.is_none());

        // Inverted masks have zero overlap.
        let inverted: Vec<Prediction> = samples
            .iter()
            .map(|s| {
                let m = s.mask.as_ref().unwrap();
                let data = m.data().iter().map(|&v| 1.0 - v).collect();
                Prediction {
                    mask: Tensor::new(m.shape().to_vec(), data).unwrap(),
                    pos_argmax: 0,
                    le_argmax: 0,
                    hp_positive: false,
                }
            })
            .collect();
        let report = score(&samples, &inverted, Aggregate::Global).unwrap();
        assert_eq!(report.seg.unwrap().dice, 0.0);
    }
}
