//! Analytic parameter and FLOP accounting.
//!
//! FLOPs are multiply-adds x 2 over conv, matmul (FC) and attention
//! (score + apply) terms; biases, normalisations, activations and resampling
//! are excluded. Parameter counts include biases and norm affines and must
//! agree exactly with the parameter store of a constructed model.

use crate::nn::encoder::{EncoderConfig, PATCH_STRIDES};
use crate::nn::heads::{LE_CLASSES, POS_CLASSES};
use crate::nn::model::ModelConfig;

/// One accounted operation.
#[derive(Debug, Clone)]
pub struct FlopItem {
    pub name: String,
    pub kind: &'static str,
    pub params: u64,
    pub flops: u64,
}

#[derive(Debug, Clone, Default)]
pub struct FlopReport {
    pub items: Vec<FlopItem>,
}

impl FlopReport {
    pub fn params(&self) -> u64 {
        self.items.iter().map(|i| i.params).sum()
    }

    pub fn flops(&self) -> u64 {
        self.items.iter().map(|i| i.flops).sum()
    }

    pub fn flops_of_kind(&self, kind: &str) -> u64 {
        self.items
            .iter()
            .filter(|i| i.kind == kind)
            .map(|i| i.flops)
            .sum()
    }

    pub fn params_with_prefix(&self, prefix: &str) -> u64 {
        self.items
            .iter()
            .filter(|i| i.name.starts_with(prefix))
            .map(|i| i.params)
            .sum()
    }

    fn conv(&mut self, name: String, cin: u64, cout: u64, k: u64, oh: u64, ow: u64, bias: bool) {
        self.items.push(FlopItem {
            name,
            kind: "conv",
            params: cout * cin * k * k + if bias { cout } else { 0 },
            flops: 2 * cout * cin * k * k * oh * ow,
        });
    }

    fn depthwise(&mut self, name: String, c: u64, k: u64, oh: u64, ow: u64, bias: bool) {
        self.items.push(FlopItem {
            name,
            kind: "conv",
            params: c * k * k + if bias { c } else { 0 },
            flops: 2 * c * k * k * oh * ow,
        });
    }

    fn fc(&mut self, name: String, rows: u64, din: u64, dout: u64, bias: bool) {
        self.items.push(FlopItem {
            name,
            kind: "matmul",
            params: din * dout + if bias { dout } else { 0 },
            flops: 2 * rows * din * dout,
        });
    }

    fn norm(&mut self, name: String, dim: u64) {
        self.items.push(FlopItem {
            name,
            kind: "norm",
            params: 2 * dim,
            flops: 0,
        });
    }

    /// Attention score + apply terms: `2 * (2 * N * N' * C)`.
    fn attention(&mut self, name: String, n: u64, n_red: u64, c: u64) {
        self.items.push(FlopItem {
            name,
            kind: "attention",
            params: 0,
            flops: 2 * 2 * n * n_red * c,
        });
    }
}

/// Encoder accounting at input `(h, w)`.
pub fn count_encoder(cfg: &EncoderConfig, h: usize, w: usize, report: &mut FlopReport) {
    let (mut gh, mut gw) = (h as u64, w as u64);
    for i in 0..4 {
        let scope = format!("encoder.stage{}", i + 1);
        let c = cfg.channels[i] as u64;
        let cin = if i == 0 { 3 } else { cfg.channels[i - 1] } as u64;
        let kernel = if cfg.overlapped {
            cfg.patch_kernels[i] as u64
        } else {
            PATCH_STRIDES[i] as u64
        };
        gh /= PATCH_STRIDES[i] as u64;
        gw /= PATCH_STRIDES[i] as u64;
        let n = gh * gw;
        report.conv(format!("{scope}.patch.proj"), cin, c, kernel, gh, gw, true);
        report.norm(format!("{scope}.patch.norm"), c);
        let r = cfg.sr_ratios[i] as u64;
        let n_red = n / (r * r);
        for j in 0..cfg.depths[i] {
            let block = format!("{scope}.block{j}");
            report.norm(format!("{block}.norm1"), c);
            report.fc(format!("{block}.attn.q"), n, c, c, true);
            if r > 1 {
                report.conv(format!("{block}.attn.sr"), c, c, r, gh / r, gw / r, true);
                report.norm(format!("{block}.attn.sr_norm"), c);
            }
            report.fc(format!("{block}.attn.k"), n_red, c, c, true);
            report.fc(format!("{block}.attn.v"), n_red, c, c, true);
            report.attention(format!("{block}.attn.scores_apply"), n, n_red, c);
            report.fc(format!("{block}.attn.proj"), n, c, c, true);
            report.norm(format!("{block}.norm2"), c);
            let hidden = c * cfg.ffn_expansion as u64;
            report.fc(format!("{block}.ffn.fc1"), n, c, hidden, true);
            report.depthwise(format!("{block}.ffn.dw"), hidden, 3, gh, gw, true);
            report.fc(format!("{block}.ffn.fc2"), n, hidden, c, true);
        }
        report.norm(format!("{scope}.norm"), c);
    }
}

/// Whole-model accounting at input `(h, w)`.
pub fn count_model(cfg: &ModelConfig, h: usize, w: usize) -> FlopReport {
    let mut report = FlopReport::default();
    count_encoder(&cfg.encoder, h, w, &mut report);

    // Context stacks on F2..F4.
    for level in 1..4 {
        let c = cfg.encoder.channels[level] as u64;
        let side_h = (h as u64) >> (level + 2);
        let side_w = (w as u64) >> (level + 2);
        let scope = format!("context.level{}", level + 1);
        if cfg.use_cgnl {
            for name in ["theta", "phi", "g", "out"] {
                report.conv(format!("{scope}.cgnl.{name}"), c, c, 1, side_h, side_w, false);
            }
            report.depthwise(format!("{scope}.cgnl.scale"), c, 1, side_h, side_w, false);
            // Two dot products of length C*H*W per sample.
            report.items.push(FlopItem {
                name: format!("{scope}.cgnl.bilinear"),
                kind: "attention",
                params: 0,
                flops: 2 * 2 * c * side_h * side_w,
            });
        }
        if cfg.use_se {
            let mid = c / cfg.se.reduction as u64;
            report.fc(format!("{scope}.se.fc1"), 1, c, mid, true);
            report.fc(format!("{scope}.se.fc2"), 1, mid, c, true);
        }
    }

    // Decoder: FSM per level, FAM per fusion, head conv.
    let d = cfg.decoder.width as u64;
    for level in 0..4 {
        let c = cfg.encoder.channels[level] as u64;
        let side_h = (h as u64) >> (level + 2);
        let side_w = (w as u64) >> (level + 2);
        let scope = format!("decoder.fsm{}", level + 1);
        report.fc(format!("{scope}.fc"), 1, c, c, true);
        report.conv(format!("{scope}.conv"), c, d, 1, side_h, side_w, true);
    }
    let taps = (cfg.decoder.deform_kernel * cfg.decoder.deform_kernel) as u64;
    for level in 0..3 {
        let side_h = (h as u64) >> (level + 2);
        let side_w = (w as u64) >> (level + 2);
        let scope = format!("decoder.fam{}", level + 1);
        report.conv(
            format!("{scope}.offset"),
            2 * d,
            2 * taps,
            cfg.decoder.offset_kernel as u64,
            side_h,
            side_w,
            true,
        );
        report.conv(
            format!("{scope}.align"),
            d,
            d,
            cfg.decoder.deform_kernel as u64,
            side_h,
            side_w,
            false,
        );
    }
    report.conv("decoder.head".into(), d, 1, 1, (h / 4) as u64, (w / 4) as u64, true);

    // Classification branch on pooled F4.
    report.fc("heads.pos".into(), 1, cfg.encoder.channels[3] as u64, POS_CLASSES as u64, true);
    report.fc("heads.le".into(), 1, cfg.encoder.channels[3] as u64, LE_CLASSES as u64, true);
    report.fc("heads.hp".into(), 1, cfg.encoder.channels[3] as u64, 1, true);
    report
}

/// Text table plus totals, with the published-configuration reference note.
pub fn format_report(report: &FlopReport, cfg: &ModelConfig, h: usize, w: usize) -> String {
    let mut out = format!(
        "model={} variant={} input={h}x{w}\n{:<40} {:>10} {:>14}\n",
        cfg.preset,
        cfg.variant_name(),
        "item",
        "params",
        "flops"
    );
    for item in &report.items {
        out.push_str(&format!(
            "{:<40} {:>10} {:>14}\n",
            item.name, item.params, item.flops
        ));
    }
    out.push_str(&format!(
        "TOTAL params={} ({:.2} M)  flops={} ({:.2} GFLOPs)\n",
        report.params(),
        report.params() as f64 / 1e6,
        report.flops(),
        report.flops() as f64 / 1e9
    ));
    out.push_str(
        "reference (informational): published full-width model reports 46.22 M params, 18.96 GFLOPs\n",
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::model::UgcaNet;

    #[test]
    fn single_1x1_conv_closed_form() {
        let mut report = FlopReport::default();
        report.conv("probe".into(), 4, 8, 1, 16, 16, false);
        assert_eq!(report.params(), 32);
        assert_eq!(report.flops(), 2 * 32 * 256);
    }

    #[test]
    fn analytic_params_match_store_exactly() {
        for preset in ["tiny", "b2-shape"] {
            let cfg = ModelConfig::from_preset(preset).unwrap();
            let model = UgcaNet::new(cfg.clone(), 1).unwrap();
            let report = count_model(&cfg, 64, 64);
            assert_eq!(
                report.params() as usize,
                model.store.total_params(),
                "{preset}: analytic count disagrees with the store"
            );
        }
    }

    #[test]
    fn ablated_variant_params_match_store() {
        let mut cfg = ModelConfig::tiny();
        cfg.use_cgnl = false;
        let model = UgcaNet::new(cfg.clone(), 1).unwrap();
        let report = count_model(&cfg, 64, 64);
        assert_eq!(report.params() as usize, model.store.total_params());
    }

    #[test]
    fn attention_flops_scale_by_r_squared() {
        let base = EncoderConfig::tiny();
        let mut reduced = base.clone();
        reduced.sr_ratios = [4, 1, 1, 1];
        let mut dense = base.clone();
        dense.sr_ratios = [1, 1, 1, 1];
        let mut rep_r = FlopReport::default();
        count_encoder(&reduced, 64, 64, &mut rep_r);
        let mut rep_d = FlopReport::default();
        count_encoder(&dense, 64, 64, &mut rep_d);
        // Only stage 1 differs (r=4 vs 1): its attention term drops by r^2.
        let stage1_r: u64 = rep_r
            .items
            .iter()
            .filter(|i| i.kind == "attention" && i.name.starts_with("encoder.stage1"))
            .map(|i| i.flops)
            .sum();
        let stage1_d: u64 = rep_d
            .items
            .iter()
            .filter(|i| i.kind == "attention" && i.name.starts_with("encoder.stage1"))
            .map(|i| i.flops)
            .sum();
        assert_eq!(stage1_d, stage1_r * 16);
    }

    #[test]
    fn b3_shape_encoder_is_the_published_order_of_magnitude() {
        let cfg = ModelConfig::from_preset("b3-shape").unwrap();
        let report = count_model(&cfg, 64, 64);
        let encoder_params = report.params_with_prefix("encoder.");
        println!(
            "b3-shape: encoder {:.2} M params, total {:.2} M (published total: 46.22 M)",
            encoder_params as f64 / 1e6,
            report.params() as f64 / 1e6
        );
        // Informational order-of-magnitude check, deliberately loose.
        assert!(
            (10_000_000..100_000_000).contains(&encoder_params),
            "encoder params {encoder_params}"
        );
    }
}
