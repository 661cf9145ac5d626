//! Image/mask resizing for dataset preparation (not differentiable).

use crate::tensor::{Tensor, TensorError};

fn source_coords(dst: usize, dst_len: usize, src_len: usize) -> (usize, usize, f64) {
    let scale = src_len as f64 / dst_len as f64;
    let s = ((dst as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    let w1 = if i1 == i0 { 0.0 } else { s - i0 as f64 };
    (i0, i1, w1)
}

/// Bilinear resize of a `[C,H,W]` image to `[C,th,tw]`, half-pixel centers
/// with edge clamping.
pub fn resize_bilinear(image: &Tensor, th: usize, tw: usize) -> Result<Tensor, TensorError> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(TensorError::InvalidShape {
            op: "resize_bilinear",
            shape: s.to_vec(),
            detail: "expected [C,H,W]".into(),
        });
    }
    if th == 0 || tw == 0 {
        return Err(TensorError::InvalidShape {
            op: "resize_bilinear",
            shape: vec![th, tw],
            detail: "target dims must be positive".into(),
        });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if (th, tw) == (h, w) {
        return Ok(image.clone());
    }
    let src = image.data();
    let mut out = vec![0.0f32; c * th * tw];
    for ch in 0..c {
        for oy in 0..th {
            let (y0, y1, wy) = source_coords(oy, th, h);
            for ox in 0..tw {
                let (x0, x1, wx) = source_coords(ox, tw, w);
                let v00 = src[(ch * h + y0) * w + x0] as f64;
                let v01 = src[(ch * h + y0) * w + x1] as f64;
                let v10 = src[(ch * h + y1) * w + x0] as f64;
                let v11 = src[(ch * h + y1) * w + x1] as f64;
                out[(ch * th + oy) * tw + ox] = ((1.0 - wy) * ((1.0 - wx) * v00 + wx * v01)
                    + wy * ((1.0 - wx) * v10 + wx * v11))
                    as f32;
            }
        }
    }
    Tensor::new(vec![c, th, tw], out)
}

/// Nearest-neighbour resize; preserves binary values, so it is the mask path.
pub fn resize_nearest(mask: &Tensor, th: usize, tw: usize) -> Result<Tensor, TensorError> {
    let s = mask.shape();
    if s.len() != 3 {
        return Err(TensorError::InvalidShape {
            op: "resize_nearest",
            shape: s.to_vec(),
            detail: "expected [C,H,W]".into(),
        });
    }
    if th == 0 || tw == 0 {
        return Err(TensorError::InvalidShape {
            op: "resize_nearest",
            shape: vec![th, tw],
            detail: "target dims must be positive".into(),
        });
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if (th, tw) == (h, w) {
        return Ok(mask.clone());
    }
    let src = mask.data();
    let mut out = vec![0.0f32; c * th * tw];
    for ch in 0..c {
        for oy in 0..th {
            let sy = (((oy as f64 + 0.5) * h as f64 / th as f64) as usize).min(h - 1);
            for ox in 0..tw {
                let sx = (((ox as f64 + 0.5) * w as f64 / tw as f64) as usize).min(w - 1);
                out[(ch * th + oy) * tw + ox] = src[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::new(vec![c, th, tw], out)
}

/// The multi-scale training sizes for a base size: each ratio in
/// {0.75, 1, 1.25} snapped to the nearest positive multiple of 32 so the
/// encoder constraints keep holding at small desk sizes. At base 384 the
/// set is exactly {288, 384, 480}.
pub fn multiscale_sizes(base: usize) -> Vec<usize> {
    [0.75f64, 1.0, 1.25]
        .iter()
        .map(|r| {
            let snapped = ((base as f64 * r / 32.0).round() as usize).max(1) * 32;
            snapped
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_size_is_identical() {
        let t = Tensor::new([1usize, 2, 2], vec![0.1, 0.9, 0.4, 0.6]).unwrap();
        assert_eq!(resize_bilinear(&t, 2, 2).unwrap().data(), t.data());
        assert_eq!(resize_nearest(&t, 2, 2).unwrap().data(), t.data());
    }

    #[test]
    fn constant_image_stays_constant_at_any_size() {
        let t = Tensor::full([3, 8, 8], 0.42);
        for &(h, w) in &[(4usize, 4usize), (16, 16), (5, 13)] {
            let r = resize_bilinear(&t, h, w).unwrap();
            assert_eq!(r.shape(), &[3, h, w]);
            for &v in r.data() {
                assert!((v - 0.42).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn nearest_preserves_binarity() {
        let mut m = Tensor::zeros([1, 6, 6]);
        for i in 0..18 {
            m.data_mut()[i * 2 % 36] = 1.0;
        }
        let r = resize_nearest(&m, 9, 4).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn paper_scale_set_at_384() {
        assert_eq!(multiscale_sizes(384), vec![288, 384, 480]);
    }

    #[test]
    fn zero_target_is_rejected() {
        let t = Tensor::zeros([1, 4, 4]);
        assert!(resize_bilinear(&t, 0, 4).is_err());
        assert!(resize_nearest(&t, 4, 0).is_err());
    }
}
