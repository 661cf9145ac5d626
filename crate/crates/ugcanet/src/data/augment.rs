//! Training-time augmentation: flip, hue/saturation jitter and
//! brightness/contrast jitter, each behind an independent coin flip.
//! Flips move image and mask together; the colour jitters leave masks,
//! labels and indicators untouched.

use super::SampleRecord;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct AugmentConfig {
    pub p_flip: f32,
    pub p_hue_saturation: f32,
    pub p_brightness_contrast: f32,
    /// Hue shift bound in degrees.
    pub hue_degrees: f32,
    /// Saturation scale range is `1 +- saturation_span`.
    pub saturation_span: f32,
    /// Brightness/contrast factor range is `1 +- value_span`.
    pub value_span: f32,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_flip: 0.5,
            p_hue_saturation: 0.5,
            p_brightness_contrast: 0.5,
            hue_degrees: 10.0,
            saturation_span: 0.2,
            value_span: 0.15,
        }
    }
}

impl AugmentConfig {
    /// All gates forced off.
    pub fn off() -> Self {
        Self {
            p_flip: 0.0,
            p_hue_saturation: 0.0,
            p_brightness_contrast: 0.0,
            ..Self::default()
        }
    }
}

fn flip_plane(data: &mut [f32], h: usize, w: usize, horizontal: bool) {
    if horizontal {
        for y in 0..h {
            data[y * w..(y + 1) * w].reverse();
        }
    } else {
        for y in 0..h / 2 {
            for x in 0..w {
                data.swap(y * w + x, (h - 1 - y) * w + x);
            }
        }
    }
}

fn flip_tensor(t: &mut Tensor, horizontal: bool) {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    for ch in 0..c {
        flip_plane(&mut t.data_mut()[ch * h * w..(ch + 1) * h * w], h, w, horizontal);
    }
}

pub fn hflip(sample: &mut SampleRecord) {
    flip_tensor(&mut sample.image, true);
    if let Some(mask) = &mut sample.mask {
        flip_tensor(mask, true);
    }
}

pub fn vflip(sample: &mut SampleRecord) {
    flip_tensor(&mut sample.image, false);
    if let Some(mask) = &mut sample.mask {
        flip_tensor(mask, false);
    }
}

/// RGB in [0,1] to (hue degrees, saturation, value).
pub fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let hue = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let saturation = if max == 0.0 { 0.0 } else { delta / max };
    (hue, saturation, max)
}

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h = h.rem_euclid(360.0);
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0).rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Shift hue by `dh` degrees and scale saturation by `ds`.
pub fn hue_saturation(image: &mut Tensor, dh: f32, ds: f32) {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let data = image.data_mut();
    for i in 0..plane {
        let (hue, sat, val) = rgb_to_hsv(data[i], data[plane + i], data[2 * plane + i]);
        let (r, g, b) = hsv_to_rgb(hue + dh, (sat * ds).clamp(0.0, 1.0), val);
        data[i] = r.clamp(0.0, 1.0);
        data[plane + i] = g.clamp(0.0, 1.0);
        data[2 * plane + i] = b.clamp(0.0, 1.0);
    }
}

/// Contrast factor about 0.5 plus a brightness shift.
pub fn brightness_contrast(image: &mut Tensor, contrast: f32, brightness: f32) {
    for v in image.data_mut() {
        *v = ((*v - 0.5) * contrast + 0.5 + brightness).clamp(0.0, 1.0);
    }
}

/// Apply the gated augmentation chain in place.
pub fn augment(sample: &mut SampleRecord, rng: &mut ChaCha8Rng, cfg: &AugmentConfig) {
    if rng.random::<f32>() < cfg.p_flip {
        if rng.random::<bool>() {
            hflip(sample);
        } else {
            vflip(sample);
        }
    }
    if rng.random::<f32>() < cfg.p_hue_saturation {
        let dh = rng.random_range(-cfg.hue_degrees..=cfg.hue_degrees);
        let ds = rng.random_range(1.0 - cfg.saturation_span..=1.0 + cfg.saturation_span);
        hue_saturation(&mut sample.image, dh, ds);
    }
    if rng.random::<f32>() < cfg.p_brightness_contrast {
        let contrast = rng.random_range(1.0 - cfg.value_span..=1.0 + cfg.value_span);
        let brightness = rng.random_range(-cfg.value_span / 2.0..=cfg.value_span / 2.0);
        brightness_contrast(&mut sample.image, contrast, brightness);
    }
}
