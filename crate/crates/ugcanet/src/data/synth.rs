//! Deterministic synthetic dataset: ellipse/rectangle "lesion" blobs on
//! textured backgrounds.
//!
//! The labels are constructed to be visually recoverable at desk scale:
//! the anatomical-site class is the background texture (base hue + grating
//! orientation), the lesion class fixes blob count/shape and blob hue, and
//! the HP bit controls speckle density. Foreground fractions land in
//! [0.02, 0.4] by construction of the blob area budget.

use super::augment::hsv_to_rgb;
use super::{LabelRecord, SampleMeta, SampleRecord, LIGHTING_MODES};
use crate::nn::heads::{LE_CLASSES, POS_CLASSES};
use crate::rng;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Which annotations a generated sample carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleKind {
    /// Anatomical-site label only (clean texture, no blobs).
    Pos,
    /// Lesion label + mask.
    Lesion,
    /// HP label only.
    Hp,
    /// Mask only.
    Seg,
    /// Everything.
    All,
}

/// Sampling weights over [`SampleKind`]; mirrors merging datasets in which
/// each sample is annotated for a subset of the tasks.
#[derive(Debug, Clone, Copy)]
pub struct TaskMix {
    pub pos: f32,
    pub lesion: f32,
    pub hp: f32,
    pub seg: f32,
    pub all: f32,
}

impl TaskMix {
    /// Pure segmentation dataset.
    pub fn seg_only() -> Self {
        Self {
            pos: 0.0,
            lesion: 0.0,
            hp: 0.0,
            seg: 1.0,
            all: 0.0,
        }
    }

    /// Merged-dataset flavour: site-only, lesion(+mask) and HP-only samples.
    pub fn gi() -> Self {
        Self {
            pos: 0.4,
            lesion: 0.4,
            hp: 0.2,
            seg: 0.0,
            all: 0.0,
        }
    }

    /// Every sample annotated for every task.
    pub fn all_tasks() -> Self {
        Self {
            pos: 0.0,
            lesion: 0.0,
            hp: 0.0,
            seg: 0.0,
            all: 1.0,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "seg" => Some(Self::seg_only()),
            "gi" => Some(Self::gi()),
            "all" => Some(Self::all_tasks()),
            _ => None,
        }
    }

    fn draw(&self, rng: &mut ChaCha8Rng) -> SampleKind {
        let total = self.pos + self.lesion + self.hp + self.seg + self.all;
        let mut t = rng.random_range(0.0..total.max(f32::MIN_POSITIVE));
        for (w, kind) in [
            (self.pos, SampleKind::Pos),
            (self.lesion, SampleKind::Lesion),
            (self.hp, SampleKind::Hp),
            (self.seg, SampleKind::Seg),
        ] {
            if t < w {
                return kind;
            }
            t -= w;
        }
        SampleKind::All
    }
}

/// Background texture for site class `k`: muted base colour with a
/// class-specific brightness grating. Class hues sit 36 degrees apart, so
/// the +-10 degree augmentation jitter cannot cross classes.
fn paint_background(image: &mut [f32], size: usize, pos_class: usize) {
    let (r, g, b) = hsv_to_rgb(pos_class as f32 * 36.0, 0.35, 0.55);
    let fx = (pos_class % 3 + 1) as f32;
    let fy = (pos_class / 3 + 1) as f32;
    let plane = size * size;
    for y in 0..size {
        for x in 0..size {
            let phase =
                2.0 * std::f32::consts::PI * (fx * x as f32 + fy * y as f32) / size as f32;
            let grate = 0.05 * phase.sin();
            let i = y * size + x;
            image[i] = (r + grate).clamp(0.0, 1.0);
            image[plane + i] = (g + grate).clamp(0.0, 1.0);
            image[2 * plane + i] = (b + grate).clamp(0.0, 1.0);
        }
    }
}

/// Lesion class semantics: blob count = k % 3 + 1, ellipses for k < 3 and
/// rectangles for k >= 3, with a vivid class hue. `large` switches to 1-2
/// bigger ellipses (used for mask-only samples, where no count/shape class
/// applies and a coarse prediction grid benefits from a lower
/// perimeter/area ratio and corner-free boundaries).
fn paint_blobs(
    image: &mut [f32],
    mask: &mut [f32],
    size: usize,
    le_class: usize,
    large: bool,
    rng: &mut ChaCha8Rng,
) {
    let count = if large {
        rng.random_range(1..=2usize)
    } else {
        le_class % 3 + 1
    };
    let rectangular = le_class >= 3 && !large;
    let (br, bg, bb) = hsv_to_rgb(le_class as f32 * 60.0 + 20.0, 1.0, 1.0);
    let plane = size * size;
    let total_target = if large {
        rng.random_range(0.15..0.34f64)
    } else {
        rng.random_range(0.08..0.30f64)
    };
    let per_blob = (total_target / count as f64).clamp(0.04, 0.18);
    for _ in 0..count {
        let cy = rng.random_range(0.28..0.72) * size as f64;
        let cx = rng.random_range(0.28..0.72) * size as f64;
        let aspect = rng.random_range(0.6..1.6f64);
        let area = per_blob * (size * size) as f64;
        let cap = 0.27 * size as f64;
        let (ry, rx) = if rectangular {
            // Half-extents of an area x aspect rectangle.
            let hh = (area * aspect).sqrt() / 2.0;
            let hw = (area / aspect).sqrt() / 2.0;
            (hh.min(cap), hw.min(cap))
        } else {
            let ry = (area * aspect / std::f64::consts::PI).sqrt();
            let rx = (area / aspect / std::f64::consts::PI).sqrt();
            (ry.min(cap), rx.min(cap))
        };
        for y in 0..size {
            for x in 0..size {
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                let inside = if rectangular {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                } else {
                    dy * dy + dx * dx <= 1.0
                };
                if inside {
                    let i = y * size + x;
                    mask[i] = 1.0;
                    image[i] = br;
                    image[plane + i] = bg;
                    image[2 * plane + i] = bb;
                }
            }
        }
    }
}

/// HP-positive samples get bright speckles on ~8% of background pixels.
fn paint_speckles(image: &mut [f32], mask: &[f32], size: usize, rng: &mut ChaCha8Rng) {
    let plane = size * size;
    let n = plane / 12;
    for _ in 0..n {
        let y = rng.random_range(0..size);
        let x = rng.random_range(0..size);
        let i = y * size + x;
        if mask[i] == 0.0 {
            image[i] = 1.0;
            image[plane + i] = 1.0;
            image[2 * plane + i] = 1.0;
        }
    }
}

/// Generate `n` samples of `size x size` (size a multiple of 32).
pub fn synth_dataset(n: usize, size: usize, mix: TaskMix, seed: u64) -> Vec<SampleRecord> {
    assert!(size % 32 == 0, "synthetic size must be a multiple of 32");
    let mut r = rng::stream(seed, "synth");
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let kind = mix.draw(&mut r);
        let pos_class = r.random_range(0..POS_CLASSES);
        let le_class = r.random_range(0..LE_CLASSES);
        let hp_bit = u8::from(r.random::<bool>());

        let mut image = vec![0.0f32; 3 * size * size];
        let mut mask = vec![0.0f32; size * size];
        paint_background(&mut image, size, pos_class);

        let with_blobs = matches!(kind, SampleKind::Lesion | SampleKind::Seg | SampleKind::All);
        if with_blobs {
            let large = matches!(kind, SampleKind::Seg);
            paint_blobs(&mut image, &mut mask, size, le_class, large, &mut r);
        }
        let with_speckles = matches!(kind, SampleKind::Hp | SampleKind::All) && hp_bit == 1;
        if with_speckles {
            paint_speckles(&mut image, &mask, size, &mut r);
        }
        // Mild pixel noise; small enough to keep each cue intact.
        for v in image.iter_mut() {
            *v = (*v + r.random_range(-0.015..0.015f32)).clamp(0.0, 1.0);
        }

        let labels = LabelRecord {
            pos: matches!(kind, SampleKind::Pos | SampleKind::All).then_some(pos_class),
            le: matches!(kind, SampleKind::Lesion | SampleKind::All).then_some(le_class),
            hp: matches!(kind, SampleKind::Hp | SampleKind::All).then_some(hp_bit),
        };
        let mask_tensor = with_blobs
            .then(|| Tensor::new(vec![1, size, size], mask).expect("mask shape"));
        out.push(SampleRecord::new(
            Tensor::new(vec![3, size, size], image).expect("image shape"),
            mask_tensor,
            labels,
            SampleMeta {
                source_id: format!("synth-{seed}-{i:04}"),
                lighting: Some(LIGHTING_MODES[i % LIGHTING_MODES.len()].to_string()),
            },
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn n_zero_gives_empty_list() {
        assert!(synth_dataset(0, 64, TaskMix::seg_only(), 1).is_empty());
    }

    #[test]
    fn foreground_fraction_stays_in_bounds() {
        let samples = synth_dataset(100, 64, TaskMix::seg_only(), 5);
        for (i, s) in samples.iter().enumerate() {
            let mask = s.mask.as_ref().expect("seg mix always has masks");
            let fg: f32 = mask.data().iter().sum();
            let fraction = fg / mask.numel() as f32;
            assert!(
                (0.02..=0.4).contains(&fraction),
                "sample {i}: foreground fraction {fraction}"
            );
        }
    }

    #[test]
    fn same_seed_is_byte_identical_and_seeds_differ() {
        let a = synth_dataset(8, 32, TaskMix::gi(), 9);
        let b = synth_dataset(8, 32, TaskMix::gi(), 9);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!(x.labels, y.labels);
        }
        let c = synth_dataset(8, 32, TaskMix::gi(), 10);
        assert!(a.iter().zip(&c).any(|(x, y)| x.image.data() != y.image.data()));
    }

    #[test]
    fn kinds_set_consistent_labels_and_mu() {
        for s in synth_dataset(60, 32, TaskMix::gi(), 3) {
            assert_eq!(s.mu.pos, s.labels.pos.is_some());
            assert_eq!(s.mu.le, s.labels.le.is_some());
            assert_eq!(s.mu.hp, s.labels.hp.is_some());
            assert_eq!(s.mu.seg, s.mask.is_some());
            // gi mix: lesion samples carry masks, site/HP samples don't.
            if s.labels.le.is_some() {
                assert!(s.mask.is_some());
            }
            if s.labels.pos.is_some() || s.labels.hp.is_some() {
                assert!(s.labels.le.is_none());
            }
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn all_tasks_mix_annotates_everything() {
        for s in synth_dataset(10, 32, TaskMix::all_tasks(), 4) {
            assert!(s.mu.pos && s.mu.le && s.mu.hp && s.mu.seg);
        }
    }

    #[test]
    #[should_panic(expected = "multiple of 32")]
    fn rejects_bad_size() {
        synth_dataset(1, 48, TaskMix::seg_only(), 1);
    }
}
