//! Forward/backward compute kernels.
//!
//! All kernels are plain sequential loops over row-major buffers, so results
//! are bit-identical across runs. Reductions accumulate in `f64` and are cast
//! to `f32` once per output element. Backward kernels accumulate into `f64`
//! scratch buffers supplied by the caller.

use crate::tensor::idx4;

/// C[m,p] = A[m,k] x B[k,p] for a single batch slice; each output element
/// accumulates over ascending k in f64.
pub fn matmul_2d(a: &[f32], b: &[f32], m: usize, k: usize, p: usize, out: &mut [f32]) {
    let mut acc = vec![0.0f64; p];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let a_row = &a[i * k..(i + 1) * k];
        for (t, &av) in a_row.iter().enumerate() {
            let av = av as f64;
            let b_row = &b[t * p..(t + 1) * p];
            for (acc_v, &bv) in acc.iter_mut().zip(b_row) {
                *acc_v += av * bv as f64;
            }
        }
        for (o, &v) in out[i * p..(i + 1) * p].iter_mut().zip(acc.iter()) {
            *o = v as f32;
        }
    }
}

/// dA[m,k] += G[m,p] x B^T, dB[k,p] += A^T x G for a single batch slice.
pub fn matmul_2d_backward(
    a: &[f32],
    b: &[f32],
    g: &[f32],
    m: usize,
    k: usize,
    p: usize,
    da: &mut [f64],
    db: &mut [f64],
) {
    for i in 0..m {
        let g_row = &g[i * p..(i + 1) * p];
        let da_row = &mut da[i * k..(i + 1) * k];
        for t in 0..k {
            let b_row = &b[t * p..(t + 1) * p];
            let mut acc = 0.0f64;
            for (&gv, &bv) in g_row.iter().zip(b_row) {
                acc += gv as f64 * bv as f64;
            }
            da_row[t] += acc;
        }
        let a_row = &a[i * k..(i + 1) * k];
        for (t, &av) in a_row.iter().enumerate() {
            let av = av as f64;
            let db_row = &mut db[t * p..(t + 1) * p];
            for (dv, &gv) in db_row.iter_mut().zip(g_row) {
                *dv += av * gv as f64;
            }
        }
    }
}

pub fn conv2d_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    (input + 2 * padding - kernel) / stride + 1
}

/// Valid output range `ox_lo..ox_hi` for which `ox*stride + k - padding`
/// stays inside `0..len`.
#[inline]
fn valid_out_range(k: usize, len: usize, out_len: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if k >= padding {
        0
    } else {
        (padding - k).div_ceil(stride)
    };
    let hi_input = len + padding;
    let hi = if k >= hi_input {
        0
    } else {
        ((hi_input - k - 1) / stride + 1).min(out_len)
    };
    (lo.min(hi), hi)
}

/// The per-output reduction order is ci -> ky -> kx with one f64 add per
/// tap, matching the naive sliding-window oracle term for term. The loops
/// are arranged so the innermost runs over contiguous output positions.
#[allow(clippy::too_many_arguments)]
pub fn conv2d(
    x: &[f32],
    w: &[f32],
    bias: Option<&[f32]>,
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out: &mut [f32],
) {
    let oh = conv2d_out_dim(h, kh, stride, padding);
    let ow = conv2d_out_dim(wd, kw, stride, padding);
    let ranges: Vec<(usize, usize)> = (0..kw)
        .map(|kx| valid_out_range(kx, wd, ow, stride, padding))
        .collect();
    let mut acc = vec![0.0f64; ow];
    for b in 0..n {
        for co in 0..cout {
            let w_base = co * cin * kh * kw;
            let bias_v = bias.map_or(0.0f64, |bb| bb[co] as f64);
            for oy in 0..oh {
                acc.iter_mut().for_each(|a| *a = bias_v);
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let x_row = &x[idx4(b, ci, iy as usize, 0, cin, h, wd)..][..wd];
                        let w_row = &w[w_base + (ci * kh + ky) * kw..][..kw];
                        for (kx, &wv) in w_row.iter().enumerate() {
                            let wv = wv as f64;
                            let (lo, hi) = ranges[kx];
                            if lo >= hi {
                                continue;
                            }
                            let shift = kx as isize - padding as isize;
                            if stride == 1 {
                                let x_lo = (lo as isize + shift) as usize;
                                let xs = &x_row[x_lo..x_lo + (hi - lo)];
                                for (a, &xv) in acc[lo..hi].iter_mut().zip(xs) {
                                    *a += xv as f64 * wv;
                                }
                            } else {
                                for (ox, a) in acc[lo..hi].iter_mut().enumerate() {
                                    let ix = ((lo + ox) * stride) as isize + shift;
                                    *a += x_row[ix as usize] as f64 * wv;
                                }
                            }
                        }
                    }
                }
                let out_row = &mut out[idx4(b, co, oy, 0, cout, oh, ow)..][..ow];
                for (o, &a) in out_row.iter_mut().zip(acc.iter()) {
                    *o = a as f32;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    g: &[f32],
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    dx: &mut [f64],
    dw: &mut [f64],
    dbias: Option<&mut [f64]>,
) {
    let oh = conv2d_out_dim(h, kh, stride, padding);
    let ow = conv2d_out_dim(wd, kw, stride, padding);
    let ranges: Vec<(usize, usize)> = (0..kw)
        .map(|kx| valid_out_range(kx, wd, ow, stride, padding))
        .collect();
    let mut dbias = dbias;
    for b in 0..n {
        for co in 0..cout {
            let w_base = co * cin * kh * kw;
            for oy in 0..oh {
                let g_row = &g[idx4(b, co, oy, 0, cout, oh, ow)..][..ow];
                if let Some(db) = dbias.as_deref_mut() {
                    db[co] += g_row.iter().map(|&v| v as f64).sum::<f64>();
                }
                for ci in 0..cin {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let row_base = idx4(b, ci, iy as usize, 0, cin, h, wd);
                        let x_row = &x[row_base..][..wd];
                        let dx_row = &mut dx[row_base..][..wd];
                        for kx in 0..kw {
                            let wi = w_base + (ci * kh + ky) * kw + kx;
                            let wv = w[wi] as f64;
                            let (lo, hi) = ranges[kx];
                            if lo >= hi {
                                continue;
                            }
                            let shift = kx as isize - padding as isize;
                            let mut dw_acc = 0.0f64;
                            if stride == 1 {
                                let x_lo = (lo as isize + shift) as usize;
                                let span = hi - lo;
                                let xs = &x_row[x_lo..x_lo + span];
                                let dxs = &mut dx_row[x_lo..x_lo + span];
                                let gs = &g_row[lo..hi];
                                // Separate passes: the saxpy has no loop
                                // dependency, the dot is a plain reduction.
                                for (dxv, &gv) in dxs.iter_mut().zip(gs) {
                                    *dxv += gv as f64 * wv;
                                }
                                for (&gv, &xv) in gs.iter().zip(xs) {
                                    dw_acc += gv as f64 * xv as f64;
                                }
                            } else {
                                for ox in lo..hi {
                                    let ix = (ox * stride) as isize + shift;
                                    let gv = g_row[ox] as f64;
                                    dx_row[ix as usize] += gv * wv;
                                    dw_acc += gv * x_row[ix as usize] as f64;
                                }
                            }
                            dw[wi] += dw_acc;
                        }
                    }
                }
            }
        }
    }
}

/// Depthwise convolution, stride 1: weight shape `[C,1,kh,kw]`.
#[allow(clippy::too_many_arguments)]
pub fn depthwise_conv2d(
    x: &[f32],
    w: &[f32],
    bias: Option<&[f32]>,
    n: usize,
    c: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    padding: usize,
    out: &mut [f32],
) {
    let oh = conv2d_out_dim(h, kh, 1, padding);
    let ow = conv2d_out_dim(wd, kw, 1, padding);
    let ranges: Vec<(usize, usize)> = (0..kw)
        .map(|kx| valid_out_range(kx, wd, ow, 1, padding))
        .collect();
    let mut acc = vec![0.0f64; ow];
    for b in 0..n {
        for ch in 0..c {
            let w_base = ch * kh * kw;
            let bias_v = bias.map_or(0.0f64, |bb| bb[ch] as f64);
            for oy in 0..oh {
                acc.iter_mut().for_each(|a| *a = bias_v);
                for ky in 0..kh {
                    let iy = (oy + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let x_row = &x[idx4(b, ch, iy as usize, 0, c, h, wd)..][..wd];
                    for kx in 0..kw {
                        let wv = w[w_base + ky * kw + kx] as f64;
                        let (lo, hi) = ranges[kx];
                        if lo >= hi {
                            continue;
                        }
                        let x_lo = (lo as isize + kx as isize - padding as isize) as usize;
                        let xs = &x_row[x_lo..x_lo + (hi - lo)];
                        for (a, &xv) in acc[lo..hi].iter_mut().zip(xs) {
                            *a += xv as f64 * wv;
                        }
                    }
                }
                let out_row = &mut out[idx4(b, ch, oy, 0, c, oh, ow)..][..ow];
                for (o, &a) in out_row.iter_mut().zip(acc.iter()) {
                    *o = a as f32;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_conv2d_backward(
    x: &[f32],
    w: &[f32],
    g: &[f32],
    n: usize,
    c: usize,
    h: usize,
    wd: usize,
    kh: usize,
    kw: usize,
    padding: usize,
    dx: &mut [f64],
    dw: &mut [f64],
    dbias: Option<&mut [f64]>,
) {
    let oh = conv2d_out_dim(h, kh, 1, padding);
    let ow = conv2d_out_dim(wd, kw, 1, padding);
    let ranges: Vec<(usize, usize)> = (0..kw)
        .map(|kx| valid_out_range(kx, wd, ow, 1, padding))
        .collect();
    let mut dbias = dbias;
    for b in 0..n {
        for ch in 0..c {
            let w_base = ch * kh * kw;
            for oy in 0..oh {
                let g_row = &g[idx4(b, ch, oy, 0, c, oh, ow)..][..ow];
                if let Some(db) = dbias.as_deref_mut() {
                    db[ch] += g_row.iter().map(|&v| v as f64).sum::<f64>();
                }
                for ky in 0..kh {
                    let iy = (oy + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let row_base = idx4(b, ch, iy as usize, 0, c, h, wd);
                    let x_row = &x[row_base..][..wd];
                    let dx_row = &mut dx[row_base..][..wd];
                    for kx in 0..kw {
                        let wi = w_base + ky * kw + kx;
                        let wv = w[wi] as f64;
                        let (lo, hi) = ranges[kx];
                        if lo >= hi {
                            continue;
                        }
                        let x_lo = (lo as isize + kx as isize - padding as isize) as usize;
                        let span = hi - lo;
                        let xs = &x_row[x_lo..x_lo + span];
                        let dxs = &mut dx_row[x_lo..x_lo + span];
                        let mut dw_acc = 0.0f64;
                        for ((&gv, &xv), dxv) in g_row[lo..hi].iter().zip(xs).zip(dxs.iter_mut()) {
                            let gv = gv as f64;
                            *dxv += gv * wv;
                            dw_acc += gv * xv as f64;
                        }
                        dw[wi] += dw_acc;
                    }
                }
            }
        }
    }
}

/// Bilinear sample of one `h x w` plane at fractional `(y, x)`, zero outside
/// bounds. Returns `(value, d/dy, d/dx)`.
fn sample_with_grads(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> (f64, f64, f64) {
    let y0 = y.floor();
    let x0 = x.floor();
    let dy = y - y0;
    let dx = x - x0;
    let fetch = |yy: isize, xx: isize| -> f64 {
        if yy < 0 || yy >= h as isize || xx < 0 || xx >= w as isize {
            0.0
        } else {
            plane[yy as usize * w + xx as usize] as f64
        }
    };
    let y0i = y0 as isize;
    let x0i = x0 as isize;
    let v00 = fetch(y0i, x0i);
    let v01 = fetch(y0i, x0i + 1);
    let v10 = fetch(y0i + 1, x0i);
    let v11 = fetch(y0i + 1, x0i + 1);
    let value = (1.0 - dy) * ((1.0 - dx) * v00 + dx * v01) + dy * ((1.0 - dx) * v10 + dx * v11);
    let d_dy = ((1.0 - dx) * v10 + dx * v11) - ((1.0 - dx) * v00 + dx * v01);
    let d_dx = ((1.0 - dy) * (v01 - v00)) + dy * (v11 - v10);
    (value, d_dy, d_dx)
}

/// Deformable convolution: each kernel tap samples at its base position plus
/// a learned per-output-location `(dy, dx)` offset in pixel units. Offsets
/// channel layout is `[2*kh*kw]` with tap `t = ky*kw + kx` stored as
/// `(2t, 2t+1) = (dy, dx)`.
#[allow(clippy::too_many_arguments)]
pub fn deform_conv2d(
    x: &[f32],
    w: &[f32],
    offsets: &[f32],
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out: &mut [f32],
) {
    let oh = conv2d_out_dim(h, kh, stride, padding);
    let ow = conv2d_out_dim(wd, kw, stride, padding);
    let taps = kh * kw;
    let mut sampled = vec![0.0f64; cin * taps];
    let w64: Vec<f64> = w.iter().map(|&v| v as f64).collect();
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let t = ky * kw + kx;
                        let dy = offsets[idx4(b, 2 * t, oy, ox, 2 * taps, oh, ow)] as f64;
                        let dx = offsets[idx4(b, 2 * t + 1, oy, ox, 2 * taps, oh, ow)] as f64;
                        let py = (oy * stride + ky) as f64 - padding as f64 + dy;
                        let px = (ox * stride + kx) as f64 - padding as f64 + dx;
                        for ci in 0..cin {
                            let plane = &x[idx4(b, ci, 0, 0, cin, h, wd)..][..h * wd];
                            let (v, _, _) = sample_with_grads(plane, h, wd, py, px);
                            sampled[ci * taps + t] = v;
                        }
                    }
                }
                for co in 0..cout {
                    let w_row = &w64[co * cin * taps..(co + 1) * cin * taps];
                    let mut acc = 0.0f64;
                    for (&s, &wv) in sampled.iter().zip(w_row) {
                        acc += s * wv;
                    }
                    out[idx4(b, co, oy, ox, cout, oh, ow)] = acc as f32;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn deform_conv2d_backward(
    x: &[f32],
    w: &[f32],
    offsets: &[f32],
    g: &[f32],
    n: usize,
    cin: usize,
    h: usize,
    wd: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    dx: &mut [f64],
    dw: &mut [f64],
    doffsets: &mut [f64],
) {
    let oh = conv2d_out_dim(h, kh, stride, padding);
    let ow = conv2d_out_dim(wd, kw, stride, padding);
    let taps = kh * kw;
    // Transposed weight/grad layouts keep the per-sample channel loops
    // contiguous: w_t[(ci*taps + t) * cout + co].
    let mut w_t = vec![0.0f64; w.len()];
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..taps {
                w_t[(ci * taps + t) * cout + co] = w[(co * cin + ci) * taps + t] as f64;
            }
        }
    }
    let mut dw_t = vec![0.0f64; w.len()];
    let mut g_vec = vec![0.0f64; cout];
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                for (co, gv) in g_vec.iter_mut().enumerate() {
                    *gv = g[idx4(b, co, oy, ox, cout, oh, ow)] as f64;
                }
                for ky in 0..kh {
                    for kx in 0..kw {
                        let t = ky * kw + kx;
                        let dy = offsets[idx4(b, 2 * t, oy, ox, 2 * taps, oh, ow)] as f64;
                        let dxo = offsets[idx4(b, 2 * t + 1, oy, ox, 2 * taps, oh, ow)] as f64;
                        let py = (oy * stride + ky) as f64 - padding as f64 + dy;
                        let px = (ox * stride + kx) as f64 - padding as f64 + dxo;
                        let y0 = py.floor();
                        let x0 = px.floor();
                        let fy = py - y0;
                        let fx = px - x0;
                        let y0i = y0 as isize;
                        let x0i = x0 as isize;
                        for ci in 0..cin {
                            let plane_base = idx4(b, ci, 0, 0, cin, h, wd);
                            let plane = &x[plane_base..][..h * wd];
                            let (v, d_dy, d_dx) = sample_with_grads(plane, h, wd, py, px);
                            // Upstream sensitivity of this (ci, tap) sample,
                            // summed over output channels.
                            let base = (ci * taps + t) * cout;
                            let w_row = &w_t[base..base + cout];
                            let dw_row = &mut dw_t[base..base + cout];
                            let mut up = 0.0f64;
                            for ((&gv, &wv), dwv) in
                                g_vec.iter().zip(w_row).zip(dw_row.iter_mut())
                            {
                                up += gv * wv;
                                *dwv += gv * v;
                            }
                            doffsets[idx4(b, 2 * t, oy, ox, 2 * taps, oh, ow)] += up * d_dy;
                            doffsets[idx4(b, 2 * t + 1, oy, ox, 2 * taps, oh, ow)] += up * d_dx;
                            // Scatter into the four sampled corners.
                            for (yy, wy) in [(y0i, 1.0 - fy), (y0i + 1, fy)] {
                                if yy < 0 || yy >= h as isize {
                                    continue;
                                }
                                for (xx, wx) in [(x0i, 1.0 - fx), (x0i + 1, fx)] {
                                    if xx < 0 || xx >= wd as isize {
                                        continue;
                                    }
                                    dx[plane_base + yy as usize * wd + xx as usize] +=
                                        up * wy * wx;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    for co in 0..cout {
        for ci in 0..cin {
            for t in 0..taps {
                dw[(co * cin + ci) * taps + t] += dw_t[(ci * taps + t) * cout + co];
            }
        }
    }
}

/// Softmax over the trailing dimension.
pub fn softmax_last(x: &[f32], last: usize, out: &mut [f32]) {
    for (row, orow) in x.chunks_exact(last).zip(out.chunks_exact_mut(last)) {
        let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
        let mut denom = 0.0f64;
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = ((v as f64) - max).exp();
            *o = e as f32;
            denom += e;
        }
        for o in orow.iter_mut() {
            *o = (*o as f64 / denom) as f32;
        }
    }
}

pub fn softmax_last_backward(s: &[f32], g: &[f32], last: usize, dx: &mut [f64]) {
    let rows = s.len() / last;
    for r in 0..rows {
        let base = r * last;
        let mut dot = 0.0f64;
        for j in 0..last {
            dot += g[base + j] as f64 * s[base + j] as f64;
        }
        for j in 0..last {
            dx[base + j] += s[base + j] as f64 * (g[base + j] as f64 - dot);
        }
    }
}

/// Layer normalization over the trailing dimension with affine parameters.
pub fn layer_norm_last(x: &[f32], gamma: &[f32], beta: &[f32], eps: f32, out: &mut [f32]) {
    let d = gamma.len();
    for (row, orow) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| {
                let c = v as f64 - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let inv_std = 1.0 / (var + eps as f64).sqrt();
        for j in 0..d {
            let xhat = (row[j] as f64 - mean) * inv_std;
            orow[j] = (xhat * gamma[j] as f64 + beta[j] as f64) as f32;
        }
    }
}

pub fn layer_norm_last_backward(
    x: &[f32],
    gamma: &[f32],
    g: &[f32],
    eps: f32,
    dx: &mut [f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) {
    let d = gamma.len();
    let rows = x.len() / d;
    for r in 0..rows {
        let base = r * d;
        let row = &x[base..base + d];
        let grow = &g[base..base + d];
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = row
            .iter()
            .map(|&v| {
                let c = v as f64 - mean;
                c * c
            })
            .sum::<f64>()
            / d as f64;
        let inv_std = 1.0 / (var + eps as f64).sqrt();
        let mut sum_dxhat = 0.0f64;
        let mut sum_dxhat_xhat = 0.0f64;
        for j in 0..d {
            let xhat = (row[j] as f64 - mean) * inv_std;
            let dxhat = grow[j] as f64 * gamma[j] as f64;
            dgamma[j] += grow[j] as f64 * xhat;
            dbeta[j] += grow[j] as f64;
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        let dn = d as f64;
        for j in 0..d {
            let xhat = (row[j] as f64 - mean) * inv_std;
            let dxhat = grow[j] as f64 * gamma[j] as f64;
            dx[base + j] += inv_std / dn * (dn * dxhat - sum_dxhat - xhat * sum_dxhat_xhat);
        }
    }
}

/// Source coordinate mapping for bilinear resampling, half-pixel convention.
/// Returns `(i0, i1, w1)` so that `out = (1-w1)*src[i0] + w1*src[i1]`.
pub fn bilinear_source(dst: usize, src_len: usize, scale: f64) -> (usize, usize, f64) {
    let s = ((dst as f64 + 0.5) / scale - 0.5).max(0.0);
    let i0 = (s.floor() as usize).min(src_len - 1);
    let i1 = (i0 + 1).min(src_len - 1);
    let w1 = if i1 == i0 { 0.0 } else { s - i0 as f64 };
    (i0, i1, w1)
}

pub fn bilinear_upsample(
    x: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    scale: usize,
    out: &mut [f32],
) {
    let oh = h * scale;
    let ow = w * scale;
    let s = scale as f64;
    let y_tab: Vec<(usize, usize, f64)> = (0..oh).map(|oy| bilinear_source(oy, h, s)).collect();
    let x_tab: Vec<(usize, usize, f64)> = (0..ow).map(|ox| bilinear_source(ox, w, s)).collect();
    for b in 0..n {
        for ch in 0..c {
            let plane = &x[idx4(b, ch, 0, 0, c, h, w)..][..h * w];
            for (oy, &(y0, y1, wy)) in y_tab.iter().enumerate() {
                let row0 = &plane[y0 * w..y0 * w + w];
                let row1 = &plane[y1 * w..y1 * w + w];
                let out_row = &mut out[idx4(b, ch, oy, 0, c, oh, ow)..][..ow];
                for (o, &(x0, x1, wx)) in out_row.iter_mut().zip(x_tab.iter()) {
                    let top = (1.0 - wx) * row0[x0] as f64 + wx * row0[x1] as f64;
                    let bot = (1.0 - wx) * row1[x0] as f64 + wx * row1[x1] as f64;
                    *o = ((1.0 - wy) * top + wy * bot) as f32;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn bilinear_upsample_backward(
    g: &[f32],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    scale: usize,
    dx: &mut [f64],
) {
    let oh = h * scale;
    let ow = w * scale;
    let s = scale as f64;
    let y_tab: Vec<(usize, usize, f64)> = (0..oh).map(|oy| bilinear_source(oy, h, s)).collect();
    let x_tab: Vec<(usize, usize, f64)> = (0..ow).map(|ox| bilinear_source(ox, w, s)).collect();
    for b in 0..n {
        for ch in 0..c {
            let plane = &mut dx[idx4(b, ch, 0, 0, c, h, w)..][..h * w];
            for (oy, &(y0, y1, wy)) in y_tab.iter().enumerate() {
                let g_row = &g[idx4(b, ch, oy, 0, c, oh, ow)..][..ow];
                for (&gv, &(x0, x1, wx)) in g_row.iter().zip(x_tab.iter()) {
                    let gv = gv as f64;
                    plane[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                    plane[y0 * w + x1] += gv * (1.0 - wy) * wx;
                    plane[y1 * w + x0] += gv * wy * (1.0 - wx);
                    plane[y1 * w + x1] += gv * wy * wx;
                }
            }
        }
    }
}

/// Reorder axes: `out[coords[axes[i]]] = in[coords]`.
pub fn permute(x: &[f32], shape: &[usize], axes: &[usize], out: &mut [f32]) {
    let rank = shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut out_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        out_strides[i] = out_strides[i + 1] * out_shape[i + 1];
    }
    // stride of input axis a in the output layout
    let mut axis_out_stride = vec![0usize; rank];
    for (opos, &a) in axes.iter().enumerate() {
        axis_out_stride[a] = out_strides[opos];
    }
    let mut coords = vec![0usize; rank];
    for (flat, &v) in x.iter().enumerate() {
        let mut rem = flat;
        for d in (0..rank).rev() {
            coords[d] = rem % shape[d];
            rem /= shape[d];
        }
        let mut of = 0;
        for d in 0..rank {
            of += coords[d] * axis_out_stride[d];
        }
        out[of] = v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_identity() {
        let eye = vec![1.0, 0.0, 0.0, 1.0];
        let a = vec![3.0, -1.0, 2.0, 5.0];
        let mut out = vec![0.0; 4];
        matmul_2d(&eye, &a, 2, 2, 2, &mut out);
        assert_eq!(out, a);
    }

    #[test]
    fn matmul_hand_case() {
        // [[1,2],[3,4]] x [[1],[1]] = [[3],[7]]
        let a = vec![1.0, 2.0, 3.0, 4.0];
        let b = vec![1.0, 1.0];
        let mut out = vec![0.0; 2];
        matmul_2d(&a, &b, 2, 2, 1, &mut out);
        assert_eq!(out, vec![3.0, 7.0]);
    }

    #[test]
    fn conv_ones_3x3() {
        let x = vec![1.0f32; 9];
        let w = vec![1.0f32; 9];
        let mut out = vec![0.0f32; 1];
        conv2d(&x, &w, None, 1, 1, 3, 3, 1, 3, 3, 1, 0, &mut out);
        assert_eq!(out[0], 9.0);
    }

    #[test]
    fn conv_1x1_identity() {
        let x: Vec<f32> = (0..16).map(|i| i as f32 * 0.5).collect();
        let w = vec![1.0f32];
        let mut out = vec![0.0f32; 16];
        conv2d(&x, &w, None, 1, 1, 4, 4, 1, 1, 1, 1, 0, &mut out);
        assert_eq!(out, x);
    }

    #[test]
    fn bilinear_sample_integer_positions_are_exact() {
        let plane = vec![1.0, 2.0, 3.0, 4.0];
        let (v, _, _) = sample_with_grads(&plane, 2, 2, 1.0, 0.0);
        assert_eq!(v, 3.0);
        let (v, _, _) = sample_with_grads(&plane, 2, 2, -5.0, 0.0);
        assert_eq!(v, 0.0);
    }

    #[test]
    fn softmax_uniform_row() {
        let x = vec![0.0f32; 4];
        let mut out = vec![0.0f32; 4];
        softmax_last(&x, 4, &mut out);
        for v in out {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let x = vec![0.7f32; 3 * 3];
        let mut out = vec![0.0f32; 6 * 6];
        bilinear_upsample(&x, 1, 1, 3, 3, 2, &mut out);
        for v in out {
            assert!((v - 0.7).abs() < 1e-7);
        }
    }

    #[test]
    fn permute_transposes() {
        let x: Vec<f32> = (0..6).map(|i| i as f32).collect();
        let mut out = vec![0.0f32; 6];
        permute(&x, &[2, 3], &[1, 0], &mut out);
        assert_eq!(out, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }
}
