//! Feature-aligned pyramid decoder.
//!
//! Top-down fusion starting at F4: each level is channel-selected (FSM) to a
//! uniform width, the running coarse map is upsampled x2 and aligned onto the
//! finer map with a deformable convolution whose offsets are predicted from
//! the concatenated pair (FAM), then fused by addition. A 1x1 head plus x4
//! bilinear upsample emits full-resolution segmentation logits. With the
//! offset conv zeroed the decoder degenerates to a plain FPN.

use super::encoder::FeaturePyramid;
use super::{Conv2dLayer, Init, Linear, ParamId, ParamStore};
use crate::tensor::{Graph, Result, TensorError, Value};

#[derive(Debug, Clone, Copy)]
pub struct DecoderConfig {
    /// Uniform decoder width D across levels.
    pub width: usize,
    /// Kernel of the conv that predicts offset fields.
    pub offset_kernel: usize,
    /// Kernel of the aligning deformable conv.
    pub deform_kernel: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            width: 32,
            offset_kernel: 3,
            deform_kernel: 3,
        }
    }
}

/// Feature selection: a squeeze-style channel importance gate with an input
/// shortcut before the 1x1 channel reduction — `conv(x * u + x)` rather than
/// `conv(x * u)`, which is what distinguishes it from plain SE gating.
pub struct Fsm {
    pub fc: Linear,
    pub conv: Conv2dLayer,
}

impl Fsm {
    pub fn new(init: &mut Init, scope: &str, cin: usize, width: usize) -> Self {
        Self {
            fc: Linear::new(init, &format!("{scope}.fc"), cin, cin, true),
            conv: Conv2dLayer::new(init, &format!("{scope}.conv"), cin, width, 1, 1, 0, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Value) -> Result<Value> {
        let pooled = g.global_avg_pool(x)?;
        let imp = self.fc.forward(g, store, pooled)?;
        let imp = g.sigmoid(imp)?;
        let scaled = g.scale_channels(x, imp)?;
        let shortcut = g.add(scaled, x)?;
        self.conv.forward(g, store, shortcut)
    }
}

/// Feature alignment: learned offset fields from the (fine, upsampled-coarse)
/// pair drive a deformable conv that re-samples the coarse map before fusion.
pub struct Fam {
    pub offset_conv: Conv2dLayer,
    pub deform_w: ParamId,
    deform_kernel: usize,
}

impl Fam {
    pub fn new(init: &mut Init, scope: &str, width: usize, cfg: &DecoderConfig) -> Self {
        let taps = cfg.deform_kernel * cfg.deform_kernel;
        Self {
            offset_conv: Conv2dLayer::new(
                init,
                &format!("{scope}.offset"),
                2 * width,
                2 * taps,
                cfg.offset_kernel,
                1,
                cfg.offset_kernel / 2,
                true,
            ),
            deform_w: init.uniform(
                format!("{scope}.align.weight"),
                &[width, width, cfg.deform_kernel, cfg.deform_kernel],
                width * taps,
            ),
            deform_kernel: cfg.deform_kernel,
        }
    }

    /// `coarse_up` must already be upsampled to `fine`'s spatial dims.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        coarse_up: Value,
        fine: Value,
    ) -> Result<Value> {
        if g.shape(coarse_up) != g.shape(fine) {
            return Err(TensorError::ShapeMismatch {
                op: "fam",
                lhs: g.shape(coarse_up).to_vec(),
                rhs: g.shape(fine).to_vec(),
            });
        }
        let paired = g.concat_channels(&[fine, coarse_up])?;
        let offsets = self.offset_conv.forward(g, store, paired)?;
        let w = g.param(self.deform_w.index(), store.get(self.deform_w));
        let aligned = g.deform_conv2d(coarse_up, w, offsets, 1, self.deform_kernel / 2)?;
        g.add(aligned, fine)
    }
}

/// FSM per level, FAM fusion top-down, 1x1 head, x4 upsample to input size.
pub struct FapnDecoder {
    pub cfg: DecoderConfig,
    fsm: [Fsm; 4],
    fam: [Fam; 3],
    pub head: Conv2dLayer,
}

impl FapnDecoder {
    pub fn new(init: &mut Init, channels: [usize; 4], cfg: DecoderConfig) -> Self {
        let fsm = [
            Fsm::new(init, "decoder.fsm1", channels[0], cfg.width),
            Fsm::new(init, "decoder.fsm2", channels[1], cfg.width),
            Fsm::new(init, "decoder.fsm3", channels[2], cfg.width),
            Fsm::new(init, "decoder.fsm4", channels[3], cfg.width),
        ];
        let fam = [
            Fam::new(init, "decoder.fam1", cfg.width, &cfg),
            Fam::new(init, "decoder.fam2", cfg.width, &cfg),
            Fam::new(init, "decoder.fam3", cfg.width, &cfg),
        ];
        let head = Conv2dLayer::new(init, "decoder.head", cfg.width, 1, 1, 1, 0, true);
        Self { cfg, fsm, fam, head }
    }

    /// Pyramid to segmentation logits `[N,1,H,W]` at the encoder input size.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pyramid: &FeaturePyramid,
    ) -> Result<Value> {
        let levels = pyramid.levels();
        let mut running = self.fsm[3].forward(g, store, levels[3])?;
        for i in (0..3).rev() {
            let fine = self.fsm[i].forward(g, store, levels[i])?;
            let coarse_up = g.bilinear_upsample(running, 2)?;
            running = self.fam[i].forward(g, store, coarse_up, fine)?;
        }
        let logits = self.head.forward(g, store, running)?;
        g.bilinear_upsample(logits, 4)
    }

    /// Handles to the three offset convolutions (test/ablation hook).
    pub fn offset_convs(&self) -> [&Conv2dLayer; 3] {
        [
            &self.fam[0].offset_conv,
            &self.fam[1].offset_conv,
            &self.fam[2].offset_conv,
        ]
    }

    /// Deformable alignment weights per level, coarsest-fused last.
    pub fn align_weights(&self) -> [ParamId; 3] {
        [self.fam[0].deform_w, self.fam[1].deform_w, self.fam[2].deform_w]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::rand_tensor;
    use crate::rng;
    use crate::tensor::Tensor;

    #[test]
    fn fsm_with_zero_fc_is_conv_of_1p5x() {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 3);
        let fsm = Fsm::new(&mut init, "fsm", 4, 8);
        store.get_mut(fsm.fc.w).data_mut().fill(0.0);
        store.get_mut(fsm.fc.b.unwrap()).data_mut().fill(0.0);
        let t = rand_tensor(&mut rng::stream(3, "x"), &[1, 4, 3, 3], -1.0, 1.0);

        let mut g = Graph::new();
        let x = g.input(t.clone());
        let y = fsm.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[1, 8, 3, 3]);

        let mut g2 = Graph::new();
        let mut scaled = t;
        for v in scaled.data_mut() {
            *v *= 1.5;
        }
        let xs = g2.input(scaled);
        let expected = fsm.conv.forward(&mut g2, &store, xs).unwrap();
        for (a, b) in g.data(y).iter().zip(g2.data(expected)) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn fsm_gradcheck() {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 5);
        let fsm = Fsm::new(&mut init, "fsm", 4, 4);
        let x = rand_tensor(&mut rng::stream(5, "gc"), &[1, 4, 2, 2], -1.0, 1.0);
        let report = crate::gradcheck::check_gradients(
            "fsm",
            &[x],
            &|g, v| fsm.forward(g, &store, v[0]),
            &crate::gradcheck::OP_SETTINGS,
            5,
            false,
        );
        assert!(report.passed, "worst_ratio={}", report.worst_ratio);
    }

    #[test]
    fn fam_zero_offsets_equals_plain_conv_add() {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 7);
        let cfg = DecoderConfig {
            width: 4,
            ..Default::default()
        };
        let fam = Fam::new(&mut init, "fam", 4, &cfg);
        store.get_mut(fam.offset_conv.w).data_mut().fill(0.0);
        store.get_mut(fam.offset_conv.b.unwrap()).data_mut().fill(0.0);

        let mut r = rng::stream(7, "x");
        let coarse = rand_tensor(&mut r, &[1, 4, 6, 6], -1.0, 1.0);
        let fine = rand_tensor(&mut r, &[1, 4, 6, 6], -1.0, 1.0);

        let mut g = Graph::new();
        let cu = g.input(coarse.clone());
        let fv = g.input(fine.clone());
        let fused = fam.forward(&mut g, &store, cu, fv).unwrap();

        // Standard FPN lateral fusion: plain conv + add, same weights.
        let mut g2 = Graph::new();
        let cu2 = g2.input(coarse);
        let fv2 = g2.input(fine);
        let w = g2.param(fam.deform_w.index(), store.get(fam.deform_w));
        let conv = g2.conv2d(cu2, w, None, 1, 1).unwrap();
        let expected = g2.add(conv, fv2).unwrap();
        for (a, b) in g.data(fused).iter().zip(g2.data(expected)) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn fam_constant_maps_fuse_to_constant() {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 9);
        let cfg = DecoderConfig {
            width: 2,
            ..Default::default()
        };
        let fam = Fam::new(&mut init, "fam", 2, &cfg);
        // Keep predicted offsets well under one pixel so no interior sample
        // strays into the zero padding.
        for v in store.get_mut(fam.offset_conv.w).data_mut() {
            *v *= 0.05;
        }
        // Identical constant maps stay constant on the interior: every
        // sampling position sees the same value. Borders touch the zero
        // padding, so compare the interior only.
        let mut g = Graph::new();
        let c = g.input(Tensor::full([1, 2, 8, 8], 0.5));
        let f = g.input(Tensor::full([1, 2, 8, 8], 0.5));
        let fused = fam.forward(&mut g, &store, c, f).unwrap();
        let d = g.data(fused);
        for ch in 0..2 {
            let expect = d[(ch * 8 + 3) * 8 + 3];
            for y in 2..6 {
                for x in 2..6 {
                    let v = d[(ch * 8 + y) * 8 + x];
                    assert!((v - expect).abs() < 1e-5, "interior not constant at {ch},{y},{x}");
                }
            }
        }
    }

    #[test]
    fn gradients_reach_offset_conv_weights() {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 11);
        let cfg = DecoderConfig {
            width: 4,
            ..Default::default()
        };
        let fam = Fam::new(&mut init, "fam", 4, &cfg);
        let mut r = rng::stream(11, "x");
        let mut g = Graph::new();
        let cu = g.input(rand_tensor(&mut r, &[1, 4, 6, 6], -1.0, 1.0));
        let fv = g.input(rand_tensor(&mut r, &[1, 4, 6, 6], -1.0, 1.0));
        let fused = fam.forward(&mut g, &store, cu, fv).unwrap();
        let loss = g.sum(fused).unwrap();
        g.backward(loss).unwrap();
        let offset_w_grad = g
            .param_grads()
            .find(|(tag, _)| *tag == fam.offset_conv.w.index())
            .and_then(|(_, grad)| grad)
            .expect("offset conv weight gradient");
        let norm: f64 = offset_w_grad.iter().map(|&v| (v as f64).powi(2)).sum();
        assert!(norm.sqrt() > 1e-8, "offset conv gradient vanished");
    }

    #[test]
    fn fam_rejects_mismatched_spatial_dims() {
        let mut store = ParamStore::new();
        let mut init = Init::new(&mut store, 13);
        let cfg = DecoderConfig {
            width: 2,
            ..Default::default()
        };
        let fam = Fam::new(&mut init, "fam", 2, &cfg);
        let mut g = Graph::new();
        let c = g.input(Tensor::zeros([1, 2, 4, 4]));
        let f = g.input(Tensor::zeros([1, 2, 8, 8]));
        assert!(fam.forward(&mut g, &store, c, f).is_err());
    }
}
