//! Independent oracles for the tensor engine: a naive sliding-window
//! convolution, an f64 finite-difference oracle for matmul, and the
//! zero-offset / shifted-offset degenerate cases of deformable convolution.

use proptest::prelude::*;
use rand::Rng;
use ugcanet::gradcheck::{check_gradients, FdSettings};
use ugcanet::rng;
use ugcanet::tensor::{utd, Graph, Tensor};

/// Naive six-loop convolution, written independently of the engine kernel
/// but with the same summation order (ci, ky, kx) and f64 accumulator.
#[allow(clippy::too_many_arguments)]
fn naive_conv(
    x: &Tensor,
    w: &Tensor,
    bias: Option<&[f32]>,
    stride: usize,
    padding: usize,
) -> Vec<f32> {
    let (n, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (wd + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0f32; n * cout * oh * ow];
    let xd = x.data();
    let wdta = w.data();
    for b in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc: f64 = bias.map_or(0.0, |bb| bb[co] as f64);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xv = xd[((b * cin + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = wdta[((co * cin + ci) * kh + ky) * kw + kx];
                                acc += xv as f64 * wv as f64;
                            }
                        }
                    }
                    out[((b * cout + co) * oh + oy) * ow + ox] = acc as f32;
                }
            }
        }
    }
    out
}

fn rand_tensor(r: &mut impl Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn conv2d_matches_naive_oracle_exactly() {
    let mut r = rng::stream(3, "conv-oracle");
    // Shapes up to 2x3x8x8 with assorted strides/paddings; exact equality
    // because both paths use the same summation order.
    let cases = [
        (1, 2, 5, 5, 1, 3, 3, 1, 0),
        (2, 3, 8, 8, 4, 3, 3, 1, 1),
        (2, 3, 8, 8, 2, 3, 3, 2, 1),
        (1, 3, 7, 8, 2, 5, 3, 2, 2),
        (2, 1, 6, 6, 3, 1, 1, 1, 0),
        (1, 2, 8, 8, 2, 7, 7, 4, 3),
    ];
    for (n, cin, h, w, cout, kh, kw, stride, padding) in cases {
        let x = rand_tensor(&mut r, &[n, cin, h, w], -1.0, 1.0);
        let wt = rand_tensor(&mut r, &[cout, cin, kh, kw], -1.0, 1.0);
        let bias = rand_tensor(&mut r, &[cout], -0.5, 0.5);
        let expected = naive_conv(&x, &wt, Some(bias.data()), stride, padding);

        let mut g = Graph::new();
        let xv = g.input(x);
        let wv = g.input(wt);
        let bv = g.input(bias);
        let out = g.conv2d(xv, wv, Some(bv), stride, padding).unwrap();
        assert_eq!(g.data(out), &expected[..], "case {n}x{cin}x{h}x{w} k{kh}x{kw}");
    }
}

#[test]
fn conv2d_rejects_kernel_larger_than_padded_input() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros([1, 1, 3, 3]));
    let w = g.input(Tensor::zeros([1, 1, 5, 5]));
    assert!(g.conv2d(x, w, None, 1, 0).is_err());
    // Padding makes it fit.
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros([1, 1, 3, 3]));
    let w = g.input(Tensor::zeros([1, 1, 5, 5]));
    assert!(g.conv2d(x, w, None, 1, 1).is_ok());
}

#[test]
fn deform_conv_with_zero_offsets_equals_conv2d() {
    let mut r = rng::stream(5, "deform-zero");
    for &(stride, padding) in &[(1usize, 1usize), (2, 1), (1, 0)] {
        let x = rand_tensor(&mut r, &[2, 3, 8, 8], -1.0, 1.0);
        let w = rand_tensor(&mut r, &[4, 3, 3, 3], -1.0, 1.0);
        let oh = (8 + 2 * padding - 3) / stride + 1;

        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let wv = g.input(w.clone());
        let offsets = g.input(Tensor::zeros([2, 18, oh, oh]));
        let deformed = g.deform_conv2d(xv, wv, offsets, stride, padding).unwrap();
        let plain = g.conv2d(xv, wv, None, stride, padding).unwrap();

        for (a, b) in g.data(deformed).iter().zip(g.data(plain)) {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }
    }
}

#[test]
fn deform_conv_offset_plus_one_row_matches_shifted_input_interior() {
    // Offsets of (dy=+1, dx=0) sample one row below each tap, which equals a
    // plain convolution of the input shifted up by one row. Compared on
    // interior outputs only, where neither path touches the zero padding.
    let mut r = rng::stream(6, "deform-shift");
    let h = 8;
    let x = rand_tensor(&mut r, &[1, 2, h, h], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[2, 2, 3, 3], -1.0, 1.0);

    let mut shifted = Tensor::zeros([1, 2, h, h]);
    for c in 0..2 {
        for y in 0..h - 1 {
            for xx in 0..h {
                let src = (c * h + (y + 1)) * h + xx;
                let dst = (c * h + y) * h + xx;
                shifted.data_mut()[dst] = x.data()[src];
            }
        }
    }

    let mut g = Graph::new();
    let xv = g.input(x);
    let wv = g.input(w);
    let off = g.input(Tensor::new(
        [1usize, 18, h, h],
        (0..18 * h * h)
            .map(|i| if (i / (h * h)) % 2 == 0 { 1.0 } else { 0.0 })
            .collect(),
    )
    .unwrap());
    let deformed = g.deform_conv2d(xv, wv, off, 1, 1).unwrap();
    let sv = g.input(shifted);
    let plain = g.conv2d(sv, wv, None, 1, 1).unwrap();

    let d = g.data(deformed);
    let p = g.data(plain);
    // Interior excludes the outermost two rows/cols so the shifted copy and
    // both paddings agree.
    for co in 0..2 {
        for y in 2..h - 2 {
            for xx in 2..h - 2 {
                let i = (co * h + y) * h + xx;
                assert!((d[i] - p[i]).abs() <= 1e-5, "at {co},{y},{xx}: {} vs {}", d[i], p[i]);
            }
        }
    }
}

#[test]
fn deform_conv_offset_gradient_matches_finite_differences() {
    // 1x1x6x6 input per the module contract; 1e-3 relative tolerance.
    let mut r = rng::stream(8, "deform-grad");
    let x = rand_tensor(&mut r, &[1, 1, 6, 6], -1.0, 1.0);
    let w = rand_tensor(&mut r, &[1, 1, 3, 3], -1.0, 1.0);
    let mut offsets = rand_tensor(&mut r, &[1, 18, 6, 6], 0.1, 0.45);
    for v in offsets.data_mut() {
        if r.random::<bool>() {
            *v = -*v;
        }
    }
    let report = check_gradients(
        "deform-offsets-6x6",
        &[x, w, offsets],
        &|g, v| g.deform_conv2d(v[0], v[1], v[2], 1, 1),
        &FdSettings {
            h: 1e-2,
            abs_tol: 1e-4,
            rel_tol: 1e-3,
            max_coords: 400,
        },
        8,
        false,
    );
    assert!(report.passed, "worst_ratio = {}", report.worst_ratio);
}

#[test]
fn deform_conv_rejects_wrong_offset_channel_count() {
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros([1, 1, 6, 6]));
    let w = g.input(Tensor::zeros([1, 1, 3, 3]));
    let off = g.input(Tensor::zeros([1, 16, 6, 6]));
    assert!(g.deform_conv2d(x, w, off, 1, 1).is_err());
}

#[test]
fn matmul_gradient_matches_f64_central_difference_oracle() {
    // Loss = sum(A x B); the oracle evaluates the product entirely in f64
    // with h = 1e-3, and the engine gradient must match to 1e-4 relative.
    let mut r = rng::stream(11, "matmul-fd");
    let a = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut r, &[4, 5], -1.0, 1.0);

    let loss_f64 = |ad: &[f32], bd: &[f32]| -> f64 {
        let mut total = 0.0f64;
        for i in 0..3 {
            for j in 0..5 {
                for k in 0..4 {
                    total += ad[i * 4 + k] as f64 * bd[k * 5 + j] as f64;
                }
            }
        }
        total
    };

    let mut g = Graph::new();
    let av = g.variable(a.clone().with_requires_grad());
    let bv = g.input(b.clone());
    let prod = g.matmul(av, bv).unwrap();
    let loss = g.sum(prod).unwrap();
    g.backward(loss).unwrap();
    let grad = g.grad(av).unwrap();

    let h = 1e-3f64;
    for ci in 0..a.numel() {
        let mut ad = a.data().to_vec();
        let base = ad[ci] as f64;
        ad[ci] = (base + h) as f32;
        let fp = loss_f64(&ad, b.data());
        ad[ci] = (base - h) as f32;
        let fm = loss_f64(&ad, b.data());
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = grad[ci] as f64;
        let diff = (analytic - numeric).abs();
        assert!(
            diff <= 1e-6f64.max(1e-4 * analytic.abs().max(numeric.abs())),
            "coord {ci}: analytic {analytic} vs numeric {numeric}"
        );
    }
}

#[test]
fn forward_chain_is_deterministic_and_finite() {
    let run = || {
        let mut r = rng::stream(21, "determinism");
        let x = rand_tensor(&mut r, &[1, 3, 8, 8], -1.0, 1.0);
        let w = rand_tensor(&mut r, &[4, 3, 3, 3], -0.5, 0.5);
        let mut g = Graph::new();
        let xv = g.input(x);
        let wv = g.input(w);
        let c = g.conv2d(xv, wv, None, 2, 1).unwrap();
        let act = g.gelu(c).unwrap();
        let pooled = g.global_avg_pool(act).unwrap();
        let sm = g.softmax_last(pooled).unwrap();
        assert!(g.tensor(sm).all_finite());
        g.data(sm).to_vec()
    };
    let first = run();
    let second = run();
    assert_eq!(first, second, "same seed and inputs must be bit-identical");
}

#[test]
fn bilinear_upsample_of_constant_is_constant() {
    let mut g = Graph::new();
    let x = g.input(Tensor::full([1, 2, 4, 4], 0.37));
    let up = g.bilinear_upsample(x, 2).unwrap();
    assert_eq!(g.shape(up), &[1, 2, 8, 8]);
    for &v in g.data(up) {
        assert!((v - 0.37).abs() < 1e-7);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn utd_round_trip_is_identity(dims in proptest::collection::vec(1usize..6, 1..4),
                                  seed in 0u64..1000) {
        let mut r = rng::stream(seed, "utd-prop");
        let t = rand_tensor(&mut r, &dims, -100.0, 100.0);
        let mut buf = Vec::new();
        utd::write_tensor(&mut buf, &t).unwrap();
        let back = utd::read_tensor(&buf[..]).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        prop_assert_eq!(back.data(), t.data());
    }

    #[test]
    fn permute_then_inverse_is_identity(seed in 0u64..1000) {
        let mut r = rng::stream(seed, "permute-prop");
        let t = rand_tensor(&mut r, &[2, 3, 4], -1.0, 1.0);
        let mut g = Graph::new();
        let x = g.input(t.clone());
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        prop_assert_eq!(g.data(back), t.data());
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in 0u64..1000) {
        let mut r = rng::stream(seed, "softmax-prop");
        let t = rand_tensor(&mut r, &[3, 7], -5.0, 5.0);
        let mut g = Graph::new();
        let x = g.input(t);
        let s = g.softmax_last(x).unwrap();
        for row in g.data(s).chunks_exact(7) {
            let total: f32 = row.iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-5);
        }
    }
}
