//! Central-difference gradient checking for every differentiable op.
//!
//! Analytic gradients from the tape are compared per coordinate against
//! `(f(x+h) - f(x-h)) / 2h` with the quotient formed in `f64`. The loss for
//! each check is a fixed random weighted sum of the op output, so uniform
//! rows (softmax) and pure reductions still produce informative gradients.

use crate::rng;
use crate::tensor::{Graph, Result as TResult, Tensor, Value, REGISTERED_DIFFERENTIABLE_OPS};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Per-coordinate comparison: passes when
/// `|a - n| <= max(abs_tol, rel_tol * max(|a|, |n|))`.
pub fn within_tol(analytic: f64, numeric: f64, abs_tol: f64, rel_tol: f64) -> bool {
    let diff = (analytic - numeric).abs();
    diff <= abs_tol.max(rel_tol * analytic.abs().max(numeric.abs()))
}

#[derive(Debug, Clone)]
pub struct CheckReport {
    pub op: String,
    pub coords_checked: usize,
    pub max_abs_err: f64,
    /// Worst error normalised by the per-coordinate tolerance; <= 1 passes.
    pub worst_ratio: f64,
    pub passed: bool,
}

impl CheckReport {
    pub fn from_errors(op: &str, pairs: &[(f64, f64)], abs_tol: f64, rel_tol: f64) -> Self {
        let mut max_abs_err = 0.0f64;
        let mut worst_ratio = 0.0f64;
        for &(a, n) in pairs {
            let diff = (a - n).abs();
            let tol = abs_tol.max(rel_tol * a.abs().max(n.abs()));
            max_abs_err = max_abs_err.max(diff);
            worst_ratio = worst_ratio.max(diff / tol);
        }
        CheckReport {
            op: op.to_string(),
            coords_checked: pairs.len(),
            max_abs_err,
            worst_ratio,
            passed: worst_ratio <= 1.0,
        }
    }
}

/// Settings for one finite-difference run.
#[derive(Debug, Clone, Copy)]
pub struct FdSettings {
    pub h: f64,
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Cap on checked coordinates per input; all coordinates when under it.
    pub max_coords: usize,
}

/// Single-op defaults: tolerance max(1e-4 abs, 1e-3 rel). The step is set so
/// that f32 forward rounding (amplified by 1/2h) stays well under the
/// absolute floor while truncation stays under the relative one.
pub const OP_SETTINGS: FdSettings = FdSettings {
    h: 1e-2,
    abs_tol: 1e-4,
    rel_tol: 1e-3,
    max_coords: 200,
};

type BuildFn<'a> = dyn Fn(&mut Graph, &[Value]) -> TResult<Value> + 'a;

/// Check gradients of `build`'s scalarised output w.r.t. every tensor in
/// `inputs`. `corrupt_analytic` shifts the analytic gradients before the
/// comparison; it exists solely as the negative-control fixture.
pub fn check_gradients(
    op: &str,
    inputs: &[Tensor],
    build: &BuildFn,
    settings: &FdSettings,
    seed: u64,
    corrupt_analytic: bool,
) -> CheckReport {
    let mut weight_rng = rng::stream(seed, &format!("gradcheck.weights.{op}"));
    let mut coord_rng = rng::stream(seed, &format!("gradcheck.coords.{op}"));

    // Probe the output shape once, then fix scalarisation weights.
    let out_shape = {
        let mut g = Graph::new();
        let vals: Vec<Value> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vals).expect("gradcheck builder must not fail");
        g.shape(out).to_vec()
    };
    // Normalised by output size to keep the scalar loss O(1); larger losses
    // push f32 rounding noise in the finite-difference quotient above the
    // absolute tolerance floor.
    let numel_out = out_shape.iter().product::<usize>();
    let weights = Tensor::new(
        out_shape.clone(),
        (0..numel_out)
            .map(|_| {
                let sign = if weight_rng.random::<bool>() { 1.0 } else { -1.0 };
                weight_rng.random_range(0.5..1.5f32) * sign / numel_out as f32
            })
            .collect(),
    )
    .expect("probe shape");

    let loss_at = |tensors: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vals: Vec<Value> = tensors.iter().map(|t| g.input(t.clone())).collect();
        let out = build(&mut g, &vals).expect("gradcheck builder must not fail");
        let wv = g.input(weights.clone());
        let weighted = g.mul(out, wv).expect("weight shape");
        let loss = g.sum(weighted).expect("sum");
        g.data(loss)[0] as f64
    };

    // Analytic pass.
    let analytic_grads: Vec<Vec<f32>> = {
        let mut g = Graph::new();
        let vals: Vec<Value> = inputs
            .iter()
            .map(|t| g.variable(t.clone().with_requires_grad()))
            .collect();
        let out = build(&mut g, &vals).expect("gradcheck builder must not fail");
        let wv = g.input(weights.clone());
        let weighted = g.mul(out, wv).expect("weight shape");
        let loss = g.sum(weighted).expect("sum");
        g.backward(loss).expect("backward");
        vals.iter()
            .map(|&v| {
                g.grad(v)
                    .map(|s| s.to_vec())
                    .unwrap_or_else(|| vec![0.0; g.data(v).len()])
            })
            .collect()
    };

    let mut pairs: Vec<(f64, f64)> = Vec::new();
    for (ti, t) in inputs.iter().enumerate() {
        let n = t.numel();
        let coords: Vec<usize> = if n <= settings.max_coords {
            (0..n).collect()
        } else {
            (0..settings.max_coords)
                .map(|_| coord_rng.random_range(0..n))
                .collect()
        };
        for ci in coords {
            let base = t.data()[ci] as f64;
            let mut perturbed: Vec<Tensor> = inputs.to_vec();
            perturbed[ti].data_mut()[ci] = (base + settings.h) as f32;
            let fp = loss_at(&perturbed);
            perturbed[ti].data_mut()[ci] = (base - settings.h) as f32;
            let fm = loss_at(&perturbed);
            let numeric = (fp - fm) / (2.0 * settings.h);
            let mut analytic = analytic_grads[ti][ci] as f64;
            if corrupt_analytic {
                analytic += 0.5;
            }
            pairs.push((analytic, numeric));
        }
    }
    CheckReport::from_errors(op, &pairs, settings.abs_tol, settings.rel_tol)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f32, hi: f32) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(lo..hi)).collect(),
    )
    .expect("shape")
}

/// Run the finite-difference check for every registered differentiable op.
/// `corrupt` perturbs the named op's analytic gradient (negative control).
pub fn op_suite(seed: u64, corrupt: Option<&str>) -> Vec<CheckReport> {
    let mut r = rng::stream(seed, "gradcheck.inputs");
    let mut reports = Vec::new();
    let mut run = |op: &str, inputs: Vec<Tensor>, build: &BuildFn| {
        let corrupt_this = corrupt == Some(op);
        reports.push(check_gradients(
            op,
            &inputs,
            build,
            &OP_SETTINGS,
            seed,
            corrupt_this,
        ));
    };

    run(
        "matmul",
        vec![
            rand_tensor(&mut r, &[2, 3, 4], -1.0, 1.0),
            rand_tensor(&mut r, &[2, 4, 5], -1.0, 1.0),
        ],
        &|g, v| g.matmul(v[0], v[1]),
    );
    run(
        "conv2d",
        vec![
            rand_tensor(&mut r, &[2, 3, 6, 6], -1.0, 1.0),
            rand_tensor(&mut r, &[4, 3, 3, 3], -0.5, 0.5),
            rand_tensor(&mut r, &[4], -0.5, 0.5),
        ],
        &|g, v| g.conv2d(v[0], v[1], Some(v[2]), 2, 1),
    );
    run(
        "depthwise_conv2d",
        vec![
            rand_tensor(&mut r, &[1, 4, 5, 5], -1.0, 1.0),
            rand_tensor(&mut r, &[4, 1, 3, 3], -0.5, 0.5),
            rand_tensor(&mut r, &[4], -0.5, 0.5),
        ],
        &|g, v| g.depthwise_conv2d(v[0], v[1], Some(v[2]), 1),
    );
    {
        // Offsets keep their fractional part in [0.1, 0.45]: the bilinear
        // sample derivative is discontinuous at integer positions, and a
        // central difference straddling a cell boundary measures the average
        // of two different slopes.
        let mut offsets = rand_tensor(&mut r, &[1, 18, 6, 6], 0.1, 0.45);
        for v in offsets.data_mut() {
            if r.random::<bool>() {
                *v = -*v;
            }
        }
        run(
            "deform_conv2d",
            vec![
                rand_tensor(&mut r, &[1, 2, 6, 6], -1.0, 1.0),
                rand_tensor(&mut r, &[2, 2, 3, 3], -0.5, 0.5),
                offsets,
            ],
            &|g, v| g.deform_conv2d(v[0], v[1], v[2], 1, 1),
        );
    }
    run(
        "bias_last",
        vec![
            rand_tensor(&mut r, &[3, 5], -1.0, 1.0),
            rand_tensor(&mut r, &[5], -1.0, 1.0),
        ],
        &|g, v| g.bias_last(v[0], v[1]),
    );
    run(
        "add",
        vec![
            rand_tensor(&mut r, &[2, 3], -1.0, 1.0),
            rand_tensor(&mut r, &[2, 3], -1.0, 1.0),
        ],
        &|g, v| g.add(v[0], v[1]),
    );
    run(
        "mul",
        vec![
            rand_tensor(&mut r, &[2, 3], -1.0, 1.0),
            rand_tensor(&mut r, &[2, 3], -1.0, 1.0),
        ],
        &|g, v| g.mul(v[0], v[1]),
    );
    run(
        "div",
        vec![
            rand_tensor(&mut r, &[2, 3], -1.0, 1.0),
            rand_tensor(&mut r, &[2, 3], 0.7, 1.5),
        ],
        &|g, v| g.div(v[0], v[1]),
    );
    run(
        "affine",
        vec![rand_tensor(&mut r, &[2, 3], -1.0, 1.0)],
        &|g, v| g.affine(v[0], 1.7, -0.3),
    );
    {
        // Keep inputs away from the relu kink, where the true derivative
        // does not exist and central differences straddle it.
        let mut t = rand_tensor(&mut r, &[2, 5], -1.0, 1.0);
        for v in t.data_mut() {
            if v.abs() < 0.05 {
                *v += 0.1;
            }
        }
        run("relu", vec![t], &|g, v| g.relu(v[0]));
    }
    run("gelu", vec![rand_tensor(&mut r, &[2, 5], -2.0, 2.0)], &|g, v| {
        g.gelu(v[0])
    });
    run(
        "sigmoid",
        vec![rand_tensor(&mut r, &[2, 5], -3.0, 3.0)],
        &|g, v| g.sigmoid(v[0]),
    );
    run(
        "softmax",
        vec![rand_tensor(&mut r, &[2, 3, 4], -2.0, 2.0)],
        &|g, v| g.softmax_last(v[0]),
    );
    run(
        "log_clamped",
        vec![rand_tensor(&mut r, &[2, 4], 0.3, 2.0)],
        &|g, v| g.log_clamped(v[0]),
    );
    run(
        "layer_norm",
        vec![
            rand_tensor(&mut r, &[2, 3, 6], -1.0, 1.0),
            rand_tensor(&mut r, &[6], 0.5, 1.5),
            rand_tensor(&mut r, &[6], -0.5, 0.5),
        ],
        &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-6),
    );
    run(
        "global_avg_pool",
        vec![rand_tensor(&mut r, &[2, 3, 4, 4], -1.0, 1.0)],
        &|g, v| g.global_avg_pool(v[0]),
    );
    run(
        "bilinear_upsample",
        vec![rand_tensor(&mut r, &[1, 2, 3, 3], -1.0, 1.0)],
        &|g, v| g.bilinear_upsample(v[0], 2),
    );
    run(
        "reshape",
        vec![rand_tensor(&mut r, &[2, 6], -1.0, 1.0)],
        &|g, v| g.reshape(v[0], vec![3, 4]),
    );
    run(
        "permute",
        vec![rand_tensor(&mut r, &[2, 3, 4], -1.0, 1.0)],
        &|g, v| g.permute(v[0], &[2, 0, 1]),
    );
    run(
        "concat_channels",
        vec![
            rand_tensor(&mut r, &[1, 2, 3, 3], -1.0, 1.0),
            rand_tensor(&mut r, &[1, 3, 3, 3], -1.0, 1.0),
        ],
        &|g, v| g.concat_channels(&[v[0], v[1]]),
    );
    run(
        "slice_channels",
        vec![rand_tensor(&mut r, &[1, 4, 3, 3], -1.0, 1.0)],
        &|g, v| g.slice_channels(v[0], 1, 3),
    );
    run(
        "scale_channels",
        vec![
            rand_tensor(&mut r, &[2, 3, 2, 2], -1.0, 1.0),
            rand_tensor(&mut r, &[2, 3], -1.0, 1.0),
        ],
        &|g, v| g.scale_channels(v[0], v[1]),
    );
    run("sum", vec![rand_tensor(&mut r, &[2, 3], -1.0, 1.0)], &|g, v| {
        g.sum(v[0])
    });
    run("mean", vec![rand_tensor(&mut r, &[2, 3], -1.0, 1.0)], &|g, v| {
        g.mean(v[0])
    });
    {
        let y = Tensor::new(
            [2usize, 4],
            (0..8)
                .map(|_| if r.random::<bool>() { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        run(
            "bce_with_logits",
            vec![rand_tensor(&mut r, &[2, 4], -2.0, 2.0)],
            &move |g, v| {
                let yv = g.input(y.clone());
                g.bce_with_logits(v[0], yv)
            },
        );
    }

    reports
}

/// All registered op names that the suite covers; used as the coverage gate.
pub fn suite_covers_all_ops(reports: &[CheckReport]) -> bool {
    REGISTERED_DIFFERENTIABLE_OPS
        .iter()
        .all(|op| reports.iter().any(|r| &r.op == op))
}

/// Aligned text table of a suite run.
pub fn format_report(reports: &[CheckReport]) -> String {
    let mut out = format!(
        "{:<20} {:>8} {:>14} {:>12} {:>6}\n",
        "op", "coords", "max_abs_err", "worst_ratio", "pass"
    );
    for r in reports {
        out.push_str(&format!(
            "{:<20} {:>8} {:>14.3e} {:>12.4} {:>6}\n",
            r.op,
            r.coords_checked,
            r.max_abs_err,
            r.worst_ratio,
            if r.passed { "ok" } else { "FAIL" }
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_covers_every_op() {
        let reports = op_suite(7, None);
        assert!(suite_covers_all_ops(&reports));
        for r in &reports {
            assert!(
                r.passed,
                "op {} failed: max_abs_err={} worst_ratio={}",
                r.op, r.max_abs_err, r.worst_ratio
            );
        }
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let reports = op_suite(7, Some("relu"));
        let relu = reports.iter().find(|r| r.op == "relu").unwrap();
        assert!(!relu.passed);
    }

    #[test]
    fn spec_matmul_case_3x4_4x5() {
        let mut r = crate::rng::stream(11, "matmul-case");
        let a = rand_tensor(&mut r, &[3, 4], -1.0, 1.0);
        let b = rand_tensor(&mut r, &[4, 5], -1.0, 1.0);
        let report = check_gradients(
            "matmul-3x4-4x5",
            &[a, b],
            &|g, v| g.matmul(v[0], v[1]),
            &OP_SETTINGS,
            11,
            false,
        );
        assert!(report.passed, "worst_ratio={}", report.worst_ratio);
    }
}
