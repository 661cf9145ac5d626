//! Global context unit: a grouped compact non-local block followed by
//! squeeze-excitation gating, applied to the last three pyramid levels.

use super::encoder::FeaturePyramid;
use super::{Conv2dLayer, DepthwiseConv2dLayer, Init, Linear, ParamStore};
use crate::tensor::{Graph, Result, TensorError, Value};

/// Grouped compact non-local attention settings.
#[derive(Debug, Clone, Copy)]
pub struct CgnlConfig {
    /// Channel group count; must divide the channel count at every level the
    /// block is applied to.
    pub groups: usize,
    /// Taylor order of the dot-product kernel. Order p contributes
    /// `theta * (phi.g / M)^p / p!`; order 1 is the compact bilinear form.
    pub kernel_order: usize,
}

impl Default for CgnlConfig {
    fn default() -> Self {
        Self {
            groups: 4,
            kernel_order: 1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SeConfig {
    /// Bottleneck reduction ratio of the two gating FCs.
    pub reduction: usize,
}

impl Default for SeConfig {
    fn default() -> Self {
        Self { reduction: 4 }
    }
}

/// Compact generalized non-local block.
///
/// Per channel group, the 1x1-transformed maps theta/phi/g are flattened over
/// `(C/G)*H*W` positions and combined as `theta * (phi.g / M)` with
/// `M = C*H*W` — associativity turns the `M x M` pairwise interaction into
/// two O(M) dot products, and the G-independent normalisation keeps group
/// count a pure factorisation knob (a block-diagonal input gives identical
/// outputs for G=1 and G=2). Group outputs are concatenated, passed through a
/// 1x1 conv and a learnable per-channel scale, then added back to the input.
pub struct CgnlBlock {
    pub cfg: CgnlConfig,
    theta: Conv2dLayer,
    phi: Conv2dLayer,
    pub g_transform: Conv2dLayer,
    out: Conv2dLayer,
    scale: DepthwiseConv2dLayer,
    channels: usize,
}

impl CgnlBlock {
    pub fn new(init: &mut Init, scope: &str, channels: usize, cfg: CgnlConfig) -> Result<Self> {
        if cfg.groups == 0 || channels % cfg.groups != 0 {
            return Err(TensorError::InvalidShape {
                op: "cgnl",
                shape: vec![channels, cfg.groups],
                detail: "groups must divide the channel count".into(),
            });
        }
        if cfg.kernel_order == 0 {
            return Err(TensorError::InvalidShape {
                op: "cgnl",
                shape: vec![cfg.kernel_order],
                detail: "kernel order must be >= 1".into(),
            });
        }
        let block = Self {
            cfg,
            theta: Conv2dLayer::new(init, &format!("{scope}.theta"), channels, channels, 1, 1, 0, false),
            phi: Conv2dLayer::new(init, &format!("{scope}.phi"), channels, channels, 1, 1, 0, false),
            g_transform: Conv2dLayer::new(init, &format!("{scope}.g"), channels, channels, 1, 1, 0, false),
            out: Conv2dLayer::new(init, &format!("{scope}.out"), channels, channels, 1, 1, 0, false),
            scale: DepthwiseConv2dLayer::new(init, &format!("{scope}.scale"), channels, 1, 0, false),
            channels,
        };
        // The per-channel output scale starts at 1 (plain residual mixing).
        init.store.get_mut(block.scale.w).data_mut().fill(1.0);
        Ok(block)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Value) -> Result<Value> {
        let s = g.shape(x).to_vec();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if c != self.channels {
            return Err(TensorError::ShapeMismatch {
                op: "cgnl",
                lhs: s,
                rhs: vec![n, self.channels, h, w],
            });
        }
        let groups = self.cfg.groups;
        let cg = c / groups;
        let group_len = cg * h * w;
        let m_norm = (c * h * w) as f32;

        let theta = self.theta.forward(g, store, x)?;
        let phi = self.phi.forward(g, store, x)?;
        let gv = self.g_transform.forward(g, store, x)?;

        let mut group_outs = Vec::with_capacity(groups);
        for gi in 0..groups {
            let (lo, hi) = (gi * cg, (gi + 1) * cg);
            let t_g = g.slice_channels(theta, lo, hi)?;
            let p_g = g.slice_channels(phi, lo, hi)?;
            let g_g = g.slice_channels(gv, lo, hi)?;
            let t_row = g.reshape(t_g, vec![n, 1, group_len])?;
            let p_row = g.reshape(p_g, vec![n, 1, group_len])?;
            let g_col = g.reshape(g_g, vec![n, group_len, 1])?;
            // Normalised pairwise scalar per sample: phi.g / M.
            let dot = g.matmul(p_row, g_col)?;
            let s1 = g.affine(dot, 1.0 / m_norm, 0.0)?;
            // Taylor series in the scalar: sum_p s^p / p!.
            let mut series = s1;
            let mut power = s1;
            let mut factorial = 1.0f32;
            for p in 2..=self.cfg.kernel_order {
                power = g.mul(power, s1)?;
                factorial *= p as f32;
                let term = g.affine(power, 1.0 / factorial, 0.0)?;
                series = g.add(series, term)?;
            }
            let y = g.matmul(series, t_row)?;
            group_outs.push(g.reshape(y, vec![n, cg, h, w])?);
        }
        let merged = g.concat_channels(&group_outs)?;
        let merged = self.out.forward(g, store, merged)?;
        let merged = self.scale.forward(g, store, merged)?;
        g.add(x, merged)
    }
}

/// Squeeze-excitation: global average pool, bottleneck FC pair, sigmoid
/// gates in (0,1) broadcast over the spatial dims.
pub struct SeBlock {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl SeBlock {
    pub fn new(init: &mut Init, scope: &str, channels: usize, cfg: SeConfig) -> Result<Self> {
        if cfg.reduction == 0 || channels % cfg.reduction != 0 {
            return Err(TensorError::InvalidShape {
                op: "se",
                shape: vec![channels, cfg.reduction],
                detail: "reduction must divide the channel count".into(),
            });
        }
        let mid = channels / cfg.reduction;
        Ok(Self {
            fc1: Linear::new(init, &format!("{scope}.fc1"), channels, mid, true),
            fc2: Linear::new(init, &format!("{scope}.fc2"), mid, channels, true),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Value) -> Result<Value> {
        let squeezed = g.global_avg_pool(x)?;
        let hidden = self.fc1.forward(g, store, squeezed)?;
        let hidden = g.relu(hidden)?;
        let gates = self.fc2.forward(g, store, hidden)?;
        let gates = g.sigmoid(gates)?;
        g.scale_channels(x, gates)
    }

    /// Gate vector `[N,C]` for a given input; test hook.
    pub fn gates(&self, g: &mut Graph, store: &ParamStore, x: Value) -> Result<Value> {
        let squeezed = g.global_avg_pool(x)?;
        let hidden = self.fc1.forward(g, store, squeezed)?;
        let hidden = g.relu(hidden)?;
        let gates = self.fc2.forward(g, store, hidden)?;
        g.sigmoid(gates)
    }
}

/// One CGNL+SE stack per pyramid level F2..F4 with independent parameters;
/// F1 passes through unchanged. Either block can be ablated away.
pub struct GlobalContext {
    stacks: Vec<(Option<CgnlBlock>, Option<SeBlock>)>,
}

impl GlobalContext {
    pub fn new(
        init: &mut Init,
        channels: [usize; 4],
        cgnl: Option<CgnlConfig>,
        se: Option<SeConfig>,
    ) -> Result<Self> {
        let mut stacks = Vec::with_capacity(3);
        for (level, &c) in channels.iter().enumerate().skip(1) {
            let scope = format!("context.level{}", level + 1);
            let cgnl_block = match cgnl {
                Some(cfg) => Some(CgnlBlock::new(init, &format!("{scope}.cgnl"), c, cfg)?),
                None => None,
            };
            let se_block = match se {
                Some(cfg) => Some(SeBlock::new(init, &format!("{scope}.se"), c, cfg)?),
                None => None,
            };
            stacks.push((cgnl_block, se_block));
        }
        Ok(Self { stacks })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        pyramid: &FeaturePyramid,
    ) -> Result<FeaturePyramid> {
        let mut out = [pyramid.f1, pyramid.f2, pyramid.f3, pyramid.f4];
        for (i, level) in [pyramid.f2, pyramid.f3, pyramid.f4].into_iter().enumerate() {
            let mut v = level;
            if let Some(cgnl) = &self.stacks[i].0 {
                v = cgnl.forward(g, store, v)?;
            }
            if let Some(se) = &self.stacks[i].1 {
                v = se.forward(g, store, v)?;
            }
            out[i + 1] = v;
        }
        Ok(FeaturePyramid {
            f1: out[0],
            f2: out[1],
            f3: out[2],
            f4: out[3],
        })
    }
}
