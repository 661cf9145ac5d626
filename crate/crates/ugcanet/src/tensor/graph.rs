//! Define-by-run tape. A [`Graph`] is rebuilt for every forward pass; nodes
//! are appended in topological order (every operand index precedes its
//! consumer), and [`Graph::backward`] walks the tape once in reverse.

use super::kernels;
use super::{idx4, Result, Tensor, TensorError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

/// Names of every differentiable operation the tape can record. The gradient
/// check suite is required to cover each one.
pub const REGISTERED_DIFFERENTIABLE_OPS: &[&str] = &[
    "matmul",
    "conv2d",
    "depthwise_conv2d",
    "deform_conv2d",
    "bias_last",
    "add",
    "mul",
    "div",
    "affine",
    "relu",
    "gelu",
    "sigmoid",
    "softmax",
    "log_clamped",
    "layer_norm",
    "global_avg_pool",
    "bilinear_upsample",
    "reshape",
    "permute",
    "concat_channels",
    "slice_channels",
    "scale_channels",
    "sum",
    "mean",
    "bce_with_logits",
];

#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    Matmul {
        a: Value,
        b: Value,
    },
    Conv2d {
        x: Value,
        w: Value,
        bias: Option<Value>,
        stride: usize,
        padding: usize,
    },
    DepthwiseConv2d {
        x: Value,
        w: Value,
        bias: Option<Value>,
        padding: usize,
    },
    DeformConv2d {
        x: Value,
        w: Value,
        offsets: Value,
        stride: usize,
        padding: usize,
    },
    BiasLast {
        x: Value,
        b: Value,
    },
    Add {
        a: Value,
        b: Value,
    },
    Mul {
        a: Value,
        b: Value,
    },
    Div {
        a: Value,
        b: Value,
    },
    Affine {
        x: Value,
        alpha: f32,
        beta: f32,
    },
    Relu {
        x: Value,
    },
    Gelu {
        x: Value,
    },
    Sigmoid {
        x: Value,
    },
    Softmax {
        x: Value,
    },
    LogClamped {
        x: Value,
    },
    LayerNorm {
        x: Value,
        gamma: Value,
        beta: Value,
        eps: f32,
    },
    GlobalAvgPool {
        x: Value,
    },
    BilinearUpsample {
        x: Value,
        scale: usize,
    },
    Reshape {
        x: Value,
    },
    Permute {
        x: Value,
        axes: Vec<usize>,
    },
    ConcatChannels {
        xs: Vec<Value>,
    },
    SliceChannels {
        x: Value,
        start: usize,
        end: usize,
    },
    ScaleChannels {
        x: Value,
        s: Value,
    },
    Sum {
        x: Value,
    },
    Mean {
        x: Value,
    },
    BceWithLogits {
        x: Value,
        y: Value,
    },
}

struct Node {
    tensor: Tensor,
    op: Op,
    requires_grad: bool,
    param_tag: Option<usize>,
}

/// Recorded forward computation plus reverse-mode gradients.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: Vec<(usize, Value)>,
    backward_done: bool,
}

const LOG_CLAMP: f32 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let sech2 = 1.0 - t * t;
    let d_inner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * d_inner
}

fn sigmoid_value(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Value) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    pub fn data(&self, v: Value) -> &[f32] {
        self.nodes[v.0].tensor.data()
    }

    pub fn tensor(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].tensor
    }

    pub fn grad(&self, v: Value) -> Option<&[f32]> {
        self.nodes[v.0].tensor.grad()
    }

    /// Detach a node's current value into a plain tensor.
    pub fn detach(&self, v: Value) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.data(v).to_vec()).expect("node invariant")
    }

    fn push(&mut self, tensor: Tensor, op: Op, requires_grad: bool) -> Value {
        self.nodes.push(Node {
            tensor,
            op,
            requires_grad,
            param_tag: None,
        });
        Value(self.nodes.len() - 1)
    }

    fn req(&self, v: Value) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor) -> Value {
        self.push(t, Op::Leaf, false)
    }

    /// Trainable leaf tagged with the caller's parameter index. Gradients for
    /// all tagged leaves can be drained after [`Graph::backward`]. Each tag
    /// may be registered at most once per graph.
    pub fn param(&mut self, tag: usize, t: &Tensor) -> Value {
        debug_assert!(
            !self.param_leaves.iter().any(|&(existing, _)| existing == tag),
            "parameter tag {tag} registered twice in one graph"
        );
        let v = self.push(t.clone(), Op::Leaf, true);
        self.nodes[v.0].param_tag = Some(tag);
        self.param_leaves.push((tag, v));
        v
    }

    /// Leaf whose gradient is wanted but which is not a model parameter.
    pub fn variable(&mut self, t: Tensor) -> Value {
        self.push(t, Op::Leaf, true)
    }

    pub fn param_grads(&self) -> impl Iterator<Item = (usize, Option<&[f32]>)> {
        self.param_leaves
            .iter()
            .map(move |&(tag, v)| (tag, self.grad(v)))
    }

    // ── shape helpers ──────────────────────────────────────────────────

    fn expect_nchw(&self, v: Value, op: &'static str) -> Result<[usize; 4]> {
        let s = self.shape(v);
        if s.len() != 4 {
            return Err(TensorError::InvalidShape {
                op,
                shape: s.to_vec(),
                detail: "expected a rank-4 [N,C,H,W] tensor".into(),
            });
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    fn expect_same_shape(&self, a: Value, b: Value, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    // ── forward ops ────────────────────────────────────────────────────

    /// Batched matrix product `[.., M, K] x [.., K, P]`. Leading batch
    /// dimensions must match exactly, or one operand may be rank-2 and is
    /// then shared across the other's batch.
    pub fn matmul(&mut self, a: Value, b: Value) -> Result<Value> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, ka) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        let batch_ok = batch_a == batch_b || batch_a.is_empty() || batch_b.is_empty();
        if ka != kb || !batch_ok {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let batch_shape: Vec<usize> = if batch_a.is_empty() {
            batch_b.to_vec()
        } else {
            batch_a.to_vec()
        };
        let batches: usize = batch_shape.iter().product();
        let mut out_shape = batch_shape;
        out_shape.push(m);
        out_shape.push(p);
        let mut out = vec![0.0f32; batches * m * p];
        let ad = self.data(a);
        let bd = self.data(b);
        let a_step = if batch_a.is_empty() { 0 } else { m * ka };
        let b_step = if batch_b.is_empty() { 0 } else { ka * p };
        for i in 0..batches {
            kernels::matmul_2d(
                &ad[i * a_step..i * a_step + m * ka],
                &bd[i * b_step..i * b_step + ka * p],
                m,
                ka,
                p,
                &mut out[i * m * p..(i + 1) * m * p],
            );
        }
        let rg = self.req(a) || self.req(b);
        Ok(self.push(Tensor::new(out_shape, out)?, Op::Matmul { a, b }, rg))
    }

    pub fn conv2d(
        &mut self,
        x: Value,
        w: Value,
        bias: Option<Value>,
        stride: usize,
        padding: usize,
    ) -> Result<Value> {
        let [n, cin, h, wd] = self.expect_nchw(x, "conv2d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != cin {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape(x).to_vec(),
                rhs: ws,
            });
        }
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(TensorError::KernelTooLarge {
                kh,
                kw,
                h: h + 2 * padding,
                w: wd + 2 * padding,
            });
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(TensorError::ShapeMismatch {
                    op: "conv2d bias",
                    lhs: self.shape(b).to_vec(),
                    rhs: vec![cout],
                });
            }
        }
        let oh = kernels::conv2d_out_dim(h, kh, stride, padding);
        let ow = kernels::conv2d_out_dim(wd, kw, stride, padding);
        let mut out = vec![0.0f32; n * cout * oh * ow];
        kernels::conv2d(
            self.data(x),
            self.data(w),
            bias.map(|b| self.data(b)),
            n,
            cin,
            h,
            wd,
            cout,
            kh,
            kw,
            stride,
            padding,
            &mut out,
        );
        let rg = self.req(x) || self.req(w) || bias.map(|b| self.req(b)).unwrap_or(false);
        Ok(self.push(
            Tensor::new(vec![n, cout, oh, ow], out)?,
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// Depthwise convolution, stride 1; weight shape `[C,1,kh,kw]`.
    pub fn depthwise_conv2d(
        &mut self,
        x: Value,
        w: Value,
        bias: Option<Value>,
        padding: usize,
    ) -> Result<Value> {
        let [n, c, h, wd] = self.expect_nchw(x, "depthwise_conv2d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[0] != c || ws[1] != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "depthwise_conv2d",
                lhs: self.shape(x).to_vec(),
                rhs: ws,
            });
        }
        let (kh, kw) = (ws[2], ws[3]);
        if kh > h + 2 * padding || kw > wd + 2 * padding {
            return Err(TensorError::KernelTooLarge {
                kh,
                kw,
                h: h + 2 * padding,
                w: wd + 2 * padding,
            });
        }
        let oh = kernels::conv2d_out_dim(h, kh, 1, padding);
        let ow = kernels::conv2d_out_dim(wd, kw, 1, padding);
        let mut out = vec![0.0f32; n * c * oh * ow];
        kernels::depthwise_conv2d(
            self.data(x),
            self.data(w),
            bias.map(|b| self.data(b)),
            n,
            c,
            h,
            wd,
            kh,
            kw,
            padding,
            &mut out,
        );
        let rg = self.req(x) || self.req(w) || bias.map(|b| self.req(b)).unwrap_or(false);
        Ok(self.push(
            Tensor::new(vec![n, c, oh, ow], out)?,
            Op::DepthwiseConv2d { x, w, bias, padding },
            rg,
        ))
    }

    /// Deformable convolution with learned per-location offsets
    /// (`[N, 2*kh*kw, H', W']`, pixel units, bilinear sampling, zero outside
    /// bounds). With zero offsets this reduces exactly to [`Graph::conv2d`].
    pub fn deform_conv2d(
        &mut self,
        x: Value,
        w: Value,
        offsets: Value,
        stride: usize,
        padding: usize,
    ) -> Result<Value> {
        let [n, cin, h, wd] = self.expect_nchw(x, "deform_conv2d")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != cin {
            return Err(TensorError::ShapeMismatch {
                op: "deform_conv2d",
                lhs: self.shape(x).to_vec(),
                rhs: ws,
            });
        }
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = kernels::conv2d_out_dim(h, kh, stride, padding);
        let ow = kernels::conv2d_out_dim(wd, kw, stride, padding);
        let os = self.shape(offsets).to_vec();
        if os != [n, 2 * kh * kw, oh, ow] {
            return Err(TensorError::ShapeMismatch {
                op: "deform_conv2d offsets",
                lhs: os,
                rhs: vec![n, 2 * kh * kw, oh, ow],
            });
        }
        let mut out = vec![0.0f32; n * cout * oh * ow];
        kernels::deform_conv2d(
            self.data(x),
            self.data(w),
            self.data(offsets),
            n,
            cin,
            h,
            wd,
            cout,
            kh,
            kw,
            stride,
            padding,
            &mut out,
        );
        let rg = self.req(x) || self.req(w) || self.req(offsets);
        Ok(self.push(
            Tensor::new(vec![n, cout, oh, ow], out)?,
            Op::DeformConv2d {
                x,
                w,
                offsets,
                stride,
                padding,
            },
            rg,
        ))
    }

    /// Broadcast-add a vector over the trailing dimension.
    pub fn bias_last(&mut self, x: Value, b: Value) -> Result<Value> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if self.shape(b) != [d] || d == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "bias_last",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let bd = self.data(b).to_vec();
        let out: Vec<f32> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % d])
            .collect();
        let rg = self.req(x) || self.req(b);
        Ok(self.push(
            Tensor::new(self.shape(x).to_vec(), out)?,
            Op::BiasLast { x, b },
            rg,
        ))
    }

    pub fn add(&mut self, a: Value, b: Value) -> Result<Value> {
        self.expect_same_shape(a, b, "add")?;
        let out: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.req(a) || self.req(b);
        Ok(self.push(Tensor::new(self.shape(a).to_vec(), out)?, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Value, b: Value) -> Result<Value> {
        self.expect_same_shape(a, b, "mul")?;
        let out: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.req(a) || self.req(b);
        Ok(self.push(Tensor::new(self.shape(a).to_vec(), out)?, Op::Mul { a, b }, rg))
    }

    pub fn div(&mut self, a: Value, b: Value) -> Result<Value> {
        self.expect_same_shape(a, b, "div")?;
        let out: Vec<f32> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x / y)
            .collect();
        let rg = self.req(a) || self.req(b);
        Ok(self.push(Tensor::new(self.shape(a).to_vec(), out)?, Op::Div { a, b }, rg))
    }

    /// Elementwise `alpha * x + beta` with scalar constants.
    pub fn affine(&mut self, x: Value, alpha: f32, beta: f32) -> Result<Value> {
        let out: Vec<f32> = self.data(x).iter().map(|&v| alpha * v + beta).collect();
        let rg = self.req(x);
        Ok(self.push(
            Tensor::new(self.shape(x).to_vec(), out)?,
            Op::Affine { x, alpha, beta },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Value) -> Result<Value> {
        let out: Vec<f32> = self.data(x).iter().map(|&v| v.max(0.0)).collect();
        let rg = self.req(x);
        Ok(self.push(Tensor::new(self.shape(x).to_vec(), out)?, Op::Relu { x }, rg))
    }

    pub fn gelu(&mut self, x: Value) -> Result<Value> {
        let out: Vec<f32> = self
            .data(x)
            .iter()
            .map(|&v| gelu_value(v as f64) as f32)
            .collect();
        let rg = self.req(x);
        Ok(self.push(Tensor::new(self.shape(x).to_vec(), out)?, Op::Gelu { x }, rg))
    }

    pub fn sigmoid(&mut self, x: Value) -> Result<Value> {
        let out: Vec<f32> = self
            .data(x)
            .iter()
            .map(|&v| sigmoid_value(v as f64) as f32)
            .collect();
        let rg = self.req(x);
        Ok(self.push(Tensor::new(self.shape(x).to_vec(), out)?, Op::Sigmoid { x }, rg))
    }

    /// Softmax over the trailing dimension; each row sums to 1.
    pub fn softmax_last(&mut self, x: Value) -> Result<Value> {
        let last = *self.shape(x).last().unwrap_or(&0);
        if last == 0 {
            return Err(TensorError::InvalidShape {
                op: "softmax",
                shape: self.shape(x).to_vec(),
                detail: "empty trailing dimension".into(),
            });
        }
        let mut out = vec![0.0f32; self.data(x).len()];
        kernels::softmax_last(self.data(x), last, &mut out);
        let rg = self.req(x);
        Ok(self.push(Tensor::new(self.shape(x).to_vec(), out)?, Op::Softmax { x }, rg))
    }

    /// `ln(max(x, 1e-12))`; the clamp keeps saturated probabilities finite.
    pub fn log_clamped(&mut self, x: Value) -> Result<Value> {
        let out: Vec<f32> = self
            .data(x)
            .iter()
            .map(|&v| (v.max(LOG_CLAMP) as f64).ln() as f32)
            .collect();
        let rg = self.req(x);
        Ok(self.push(
            Tensor::new(self.shape(x).to_vec(), out)?,
            Op::LogClamped { x },
            rg,
        ))
    }

    pub fn layer_norm(&mut self, x: Value, gamma: Value, beta: Value, eps: f32) -> Result<Value> {
        let d = *self.shape(x).last().unwrap_or(&0);
        if d == 0 {
            return Err(TensorError::InvalidShape {
                op: "layer_norm",
                shape: self.shape(x).to_vec(),
                detail: "empty trailing dimension".into(),
            });
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let mut out = vec![0.0f32; self.data(x).len()];
        kernels::layer_norm_last(self.data(x), self.data(gamma), self.data(beta), eps, &mut out);
        let rg = self.req(x) || self.req(gamma) || self.req(beta);
        Ok(self.push(
            Tensor::new(self.shape(x).to_vec(), out)?,
            Op::LayerNorm { x, gamma, beta, eps },
            rg,
        ))
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&mut self, x: Value) -> Result<Value> {
        let [n, c, h, w] = self.expect_nchw(x, "global_avg_pool")?;
        let xd = self.data(x);
        let mut out = vec![0.0f32; n * c];
        for b in 0..n {
            for ch in 0..c {
                let base = idx4(b, ch, 0, 0, c, h, w);
                let acc: f64 = xd[base..base + h * w].iter().map(|&v| v as f64).sum();
                out[b * c + ch] = (acc / (h * w) as f64) as f32;
            }
        }
        let rg = self.req(x);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::GlobalAvgPool { x }, rg))
    }

    /// Bilinear upsample by an integer factor, half-pixel convention with
    /// edge clamping.
    pub fn bilinear_upsample(&mut self, x: Value, scale: usize) -> Result<Value> {
        let [n, c, h, w] = self.expect_nchw(x, "bilinear_upsample")?;
        if scale == 0 {
            return Err(TensorError::InvalidShape {
                op: "bilinear_upsample",
                shape: self.shape(x).to_vec(),
                detail: "scale must be >= 1".into(),
            });
        }
        let mut out = vec![0.0f32; n * c * h * scale * w * scale];
        kernels::bilinear_upsample(self.data(x), n, c, h, w, scale, &mut out);
        let rg = self.req(x);
        Ok(self.push(
            Tensor::new(vec![n, c, h * scale, w * scale], out)?,
            Op::BilinearUpsample { x, scale },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Value, shape: impl Into<Vec<usize>>) -> Result<Value> {
        let shape = shape.into();
        let expected: usize = shape.iter().product();
        if expected != self.data(x).len() {
            return Err(TensorError::DataLength {
                op: "reshape",
                shape,
                len: self.data(x).len(),
                expected,
            });
        }
        let out = self.data(x).to_vec();
        let rg = self.req(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Reshape { x }, rg))
    }

    pub fn permute(&mut self, x: Value, axes: &[usize]) -> Result<Value> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(TensorError::InvalidShape {
                op: "permute",
                shape,
                detail: format!("axes {axes:?} is not a permutation"),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        let mut out = vec![0.0f32; self.data(x).len()];
        kernels::permute(self.data(x), &shape, axes, &mut out);
        let rg = self.req(x);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenate `[N,C_i,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, xs: &[Value]) -> Result<Value> {
        let first = xs.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat_channels",
            shape: vec![],
            detail: "empty input list".into(),
        })?;
        let [n, _, h, w] = self.expect_nchw(*first, "concat_channels")?;
        let mut c_total = 0;
        for &v in xs {
            let [vn, vc, vh, vw] = self.expect_nchw(v, "concat_channels")?;
            if vn != n || vh != h || vw != w {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_channels",
                    lhs: self.shape(*first).to_vec(),
                    rhs: self.shape(v).to_vec(),
                });
            }
            c_total += vc;
        }
        let mut out = vec![0.0f32; n * c_total * h * w];
        for b in 0..n {
            let mut c_off = 0;
            for &v in xs {
                let vc = self.shape(v)[1];
                let src = self.data(v);
                let plane = vc * h * w;
                out[idx4(b, c_off, 0, 0, c_total, h, w)..][..plane]
                    .copy_from_slice(&src[b * plane..(b + 1) * plane]);
                c_off += vc;
            }
        }
        let rg = xs.iter().any(|&v| self.req(v));
        Ok(self.push(
            Tensor::new(vec![n, c_total, h, w], out)?,
            Op::ConcatChannels { xs: xs.to_vec() },
            rg,
        ))
    }

    /// Channel range `[start, end)` of an `[N,C,H,W]` tensor.
    pub fn slice_channels(&mut self, x: Value, start: usize, end: usize) -> Result<Value> {
        let [n, c, h, w] = self.expect_nchw(x, "slice_channels")?;
        if start >= end || end > c {
            return Err(TensorError::InvalidShape {
                op: "slice_channels",
                shape: self.shape(x).to_vec(),
                detail: format!("invalid channel range {start}..{end}"),
            });
        }
        let cs = end - start;
        let mut out = vec![0.0f32; n * cs * h * w];
        let xd = self.data(x);
        for b in 0..n {
            out[b * cs * h * w..(b + 1) * cs * h * w]
                .copy_from_slice(&xd[idx4(b, start, 0, 0, c, h, w)..][..cs * h * w]);
        }
        let rg = self.req(x);
        Ok(self.push(
            Tensor::new(vec![n, cs, h, w], out)?,
            Op::SliceChannels { x, start, end },
            rg,
        ))
    }

    /// Multiply each `[N,C,H,W]` channel plane by a per-sample gate `[N,C]`.
    pub fn scale_channels(&mut self, x: Value, s: Value) -> Result<Value> {
        let [n, c, h, w] = self.expect_nchw(x, "scale_channels")?;
        if self.shape(s) != [n, c] {
            return Err(TensorError::ShapeMismatch {
                op: "scale_channels",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let xd = self.data(x);
        let sd = self.data(s);
        let mut out = vec![0.0f32; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let gate = sd[b * c + ch];
                let base = idx4(b, ch, 0, 0, c, h, w);
                for i in 0..h * w {
                    out[base + i] = xd[base + i] * gate;
                }
            }
        }
        let rg = self.req(x) || self.req(s);
        Ok(self.push(
            Tensor::new(vec![n, c, h, w], out)?,
            Op::ScaleChannels { x, s },
            rg,
        ))
    }

    /// Full reduction to a scalar.
    pub fn sum(&mut self, x: Value) -> Result<Value> {
        let acc: f64 = self.data(x).iter().map(|&v| v as f64).sum();
        let rg = self.req(x);
        Ok(self.push(Tensor::new(vec![1], vec![acc as f32])?, Op::Sum { x }, rg))
    }

    pub fn mean(&mut self, x: Value) -> Result<Value> {
        let n = self.data(x).len();
        if n == 0 {
            return Err(TensorError::InvalidShape {
                op: "mean",
                shape: self.shape(x).to_vec(),
                detail: "empty tensor".into(),
            });
        }
        let acc: f64 = self.data(x).iter().map(|&v| v as f64).sum();
        let rg = self.req(x);
        Ok(self.push(
            Tensor::new(vec![1], vec![(acc / n as f64) as f32])?,
            Op::Mean { x },
            rg,
        ))
    }

    /// Per-element binary cross-entropy of logits `x` against targets `y`,
    /// in the numerically stable form
    /// `max(x,0) - x*y + ln(1 + exp(-|x|))`.
    pub fn bce_with_logits(&mut self, x: Value, y: Value) -> Result<Value> {
        self.expect_same_shape(x, y, "bce_with_logits")?;
        let out: Vec<f32> = self
            .data(x)
            .iter()
            .zip(self.data(y))
            .map(|(&l, &t)| {
                let l = l as f64;
                let t = t as f64;
                (l.max(0.0) - l * t + (1.0 + (-l.abs()).exp()).ln()) as f32
            })
            .collect();
        let rg = self.req(x);
        Ok(self.push(
            Tensor::new(self.shape(x).to_vec(), out)?,
            Op::BceWithLogits { x, y },
            rg,
        ))
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse pass from a scalar loss. Fills `grad` on every node that
    /// requires a gradient; can only run once per graph.
    pub fn backward(&mut self, loss: Value) -> Result<()> {
        if self.backward_done {
            return Err(TensorError::BackwardConsumed);
        }
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        self.backward_done = true;
        self.nodes[loss.0].tensor.grad_mut()[0] = 1.0;

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad || self.nodes[i].tensor.grad().is_none() {
                continue;
            }
            let contribs = self.node_backward(i);
            for (parent, contrib) in contribs {
                let g = self.nodes[parent.0].tensor.grad_mut();
                for (gi, ci) in g.iter_mut().zip(contrib) {
                    *gi += ci as f32;
                }
            }
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to each of its parents that
    /// require gradients.
    fn node_backward(&self, i: usize) -> Vec<(Value, Vec<f64>)> {
        let node = &self.nodes[i];
        let g = node.tensor.grad().expect("checked by caller");
        let out_shape = node.tensor.shape();
        let mut contribs: Vec<(Value, Vec<f64>)> = Vec::new();
        let want = |v: Value| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let p = sb[sb.len() - 1];
                let batches: usize = out_shape[..out_shape.len() - 2].iter().product();
                let a_step = if sa.len() == 2 { 0 } else { m * k };
                let b_step = if sb.len() == 2 { 0 } else { k * p };
                let mut da = vec![0.0f64; self.data(*a).len()];
                let mut db = vec![0.0f64; self.data(*b).len()];
                let ad = self.data(*a);
                let bd = self.data(*b);
                for t in 0..batches {
                    kernels::matmul_2d_backward(
                        &ad[t * a_step..t * a_step + m * k],
                        &bd[t * b_step..t * b_step + k * p],
                        &g[t * m * p..(t + 1) * m * p],
                        m,
                        k,
                        p,
                        &mut da[t * a_step..t * a_step + m * k],
                        &mut db[t * b_step..t * b_step + k * p],
                    );
                }
                if want(*a) {
                    contribs.push((*a, da));
                }
                if want(*b) {
                    contribs.push((*b, db));
                }
            }
            Op::Conv2d {
                x,
                w,
                bias,
                stride,
                padding,
            } => {
                let [n, cin, h, wd] = [
                    self.shape(*x)[0],
                    self.shape(*x)[1],
                    self.shape(*x)[2],
                    self.shape(*x)[3],
                ];
                let ws = self.shape(*w);
                let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                let mut dx = vec![0.0f64; self.data(*x).len()];
                let mut dw = vec![0.0f64; self.data(*w).len()];
                let mut db = bias.map(|b| vec![0.0f64; self.data(b).len()]);
                kernels::conv2d_backward(
                    self.data(*x),
                    self.data(*w),
                    g,
                    n,
                    cin,
                    h,
                    wd,
                    cout,
                    kh,
                    kw,
                    *stride,
                    *padding,
                    &mut dx,
                    &mut dw,
                    db.as_deref_mut(),
                );
                if want(*x) {
                    contribs.push((*x, dx));
                }
                if want(*w) {
                    contribs.push((*w, dw));
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    if want(*b) {
                        contribs.push((*b, db));
                    }
                }
            }
            Op::DepthwiseConv2d { x, w, bias, padding } => {
                let [n, c, h, wd] = [
                    self.shape(*x)[0],
                    self.shape(*x)[1],
                    self.shape(*x)[2],
                    self.shape(*x)[3],
                ];
                let ws = self.shape(*w);
                let (kh, kw) = (ws[2], ws[3]);
                let mut dx = vec![0.0f64; self.data(*x).len()];
                let mut dw = vec![0.0f64; self.data(*w).len()];
                let mut db = bias.map(|b| vec![0.0f64; self.data(b).len()]);
                kernels::depthwise_conv2d_backward(
                    self.data(*x),
                    self.data(*w),
                    g,
                    n,
                    c,
                    h,
                    wd,
                    kh,
                    kw,
                    *padding,
                    &mut dx,
                    &mut dw,
                    db.as_deref_mut(),
                );
                if want(*x) {
                    contribs.push((*x, dx));
                }
                if want(*w) {
                    contribs.push((*w, dw));
                }
                if let (Some(b), Some(db)) = (bias, db) {
                    if want(*b) {
                        contribs.push((*b, db));
                    }
                }
            }
            Op::DeformConv2d {
                x,
                w,
                offsets,
                stride,
                padding,
            } => {
                let [n, cin, h, wd] = [
                    self.shape(*x)[0],
                    self.shape(*x)[1],
                    self.shape(*x)[2],
                    self.shape(*x)[3],
                ];
                let ws = self.shape(*w);
                let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
                let mut dx = vec![0.0f64; self.data(*x).len()];
                let mut dw = vec![0.0f64; self.data(*w).len()];
                let mut doff = vec![0.0f64; self.data(*offsets).len()];
                kernels::deform_conv2d_backward(
                    self.data(*x),
                    self.data(*w),
                    self.data(*offsets),
                    g,
                    n,
                    cin,
                    h,
                    wd,
                    cout,
                    kh,
                    kw,
                    *stride,
                    *padding,
                    &mut dx,
                    &mut dw,
                    &mut doff,
                );
                if want(*x) {
                    contribs.push((*x, dx));
                }
                if want(*w) {
                    contribs.push((*w, dw));
                }
                if want(*offsets) {
                    contribs.push((*offsets, doff));
                }
            }
            Op::BiasLast { x, b } => {
                let d = self.shape(*b)[0];
                if want(*x) {
                    contribs.push((*x, g.iter().map(|&v| v as f64).collect()));
                }
                if want(*b) {
                    let mut db = vec![0.0f64; d];
                    for (i, &v) in g.iter().enumerate() {
                        db[i % d] += v as f64;
                    }
                    contribs.push((*b, db));
                }
            }
            Op::Add { a, b } => {
                if want(*a) {
                    contribs.push((*a, g.iter().map(|&v| v as f64).collect()));
                }
                if want(*b) {
                    contribs.push((*b, g.iter().map(|&v| v as f64).collect()));
                }
            }
            Op::Mul { a, b } => {
                if want(*a) {
                    let bd = self.data(*b);
                    contribs.push((
                        *a,
                        g.iter()
                            .zip(bd)
                            .map(|(&gv, &bv)| gv as f64 * bv as f64)
                            .collect(),
                    ));
                }
                if want(*b) {
                    let ad = self.data(*a);
                    contribs.push((
                        *b,
                        g.iter()
                            .zip(ad)
                            .map(|(&gv, &av)| gv as f64 * av as f64)
                            .collect(),
                    ));
                }
            }
            Op::Div { a, b } => {
                let ad = self.data(*a);
                let bd = self.data(*b);
                if want(*a) {
                    contribs.push((
                        *a,
                        g.iter()
                            .zip(bd)
                            .map(|(&gv, &bv)| gv as f64 / bv as f64)
                            .collect(),
                    ));
                }
                if want(*b) {
                    contribs.push((
                        *b,
                        g.iter()
                            .zip(ad.iter().zip(bd))
                            .map(|(&gv, (&av, &bv))| {
                                -(gv as f64) * av as f64 / (bv as f64 * bv as f64)
                            })
                            .collect(),
                    ));
                }
            }
            Op::Affine { x, alpha, .. } => {
                if want(*x) {
                    contribs.push((*x, g.iter().map(|&v| v as f64 * *alpha as f64).collect()));
                }
            }
            Op::Relu { x } => {
                if want(*x) {
                    let xd = self.data(*x);
                    contribs.push((
                        *x,
                        g.iter()
                            .zip(xd)
                            .map(|(&gv, &xv)| if xv > 0.0 { gv as f64 } else { 0.0 })
                            .collect(),
                    ));
                }
            }
            Op::Gelu { x } => {
                if want(*x) {
                    let xd = self.data(*x);
                    contribs.push((
                        *x,
                        g.iter()
                            .zip(xd)
                            .map(|(&gv, &xv)| gv as f64 * gelu_grad(xv as f64))
                            .collect(),
                    ));
                }
            }
            Op::Sigmoid { x } => {
                if want(*x) {
                    let sd = node.tensor.data();
                    contribs.push((
                        *x,
                        g.iter()
                            .zip(sd)
                            .map(|(&gv, &sv)| gv as f64 * sv as f64 * (1.0 - sv as f64))
                            .collect(),
                    ));
                }
            }
            Op::Softmax { x } => {
                if want(*x) {
                    let last = *out_shape.last().unwrap();
                    let mut dx = vec![0.0f64; g.len()];
                    kernels::softmax_last_backward(node.tensor.data(), g, last, &mut dx);
                    contribs.push((*x, dx));
                }
            }
            Op::LogClamped { x } => {
                if want(*x) {
                    let xd = self.data(*x);
                    contribs.push((
                        *x,
                        g.iter()
                            .zip(xd)
                            .map(|(&gv, &xv)| {
                                if xv > LOG_CLAMP {
                                    gv as f64 / xv as f64
                                } else {
                                    0.0
                                }
                            })
                            .collect(),
                    ));
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let d = self.shape(*gamma)[0];
                let mut dx = vec![0.0f64; self.data(*x).len()];
                let mut dgamma = vec![0.0f64; d];
                let mut dbeta = vec![0.0f64; d];
                kernels::layer_norm_last_backward(
                    self.data(*x),
                    self.data(*gamma),
                    g,
                    *eps,
                    &mut dx,
                    &mut dgamma,
                    &mut dbeta,
                );
                if want(*x) {
                    contribs.push((*x, dx));
                }
                if want(*gamma) {
                    contribs.push((*gamma, dgamma));
                }
                if want(*beta) {
                    contribs.push((*beta, dbeta));
                }
            }
            Op::GlobalAvgPool { x } => {
                if want(*x) {
                    let s = self.shape(*x);
                    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let mut dx = vec![0.0f64; self.data(*x).len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let gv = g[b * c + ch] as f64 / (h * w) as f64;
                            let base = idx4(b, ch, 0, 0, c, h, w);
                            for i in 0..h * w {
                                dx[base + i] = gv;
                            }
                        }
                    }
                    contribs.push((*x, dx));
                }
            }
            Op::BilinearUpsample { x, scale } => {
                if want(*x) {
                    let s = self.shape(*x);
                    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let mut dx = vec![0.0f64; self.data(*x).len()];
                    kernels::bilinear_upsample_backward(g, n, c, h, w, *scale, &mut dx);
                    contribs.push((*x, dx));
                }
            }
            Op::Reshape { x } => {
                if want(*x) {
                    contribs.push((*x, g.iter().map(|&v| v as f64).collect()));
                }
            }
            Op::Permute { x, axes } => {
                if want(*x) {
                    let mut inverse = vec![0usize; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inverse[a] = i;
                    }
                    let mut back = vec![0.0f32; g.len()];
                    kernels::permute(g, out_shape, &inverse, &mut back);
                    contribs.push((*x, back.iter().map(|&v| v as f64).collect()));
                }
            }
            Op::ConcatChannels { xs } => {
                let (n, c_total, h, w) = (out_shape[0], out_shape[1], out_shape[2], out_shape[3]);
                let mut c_off = 0;
                for &v in xs {
                    let vc = self.shape(v)[1];
                    if want(v) {
                        let mut dv = vec![0.0f64; self.data(v).len()];
                        for b in 0..n {
                            let dst = &mut dv[b * vc * h * w..(b + 1) * vc * h * w];
                            let src = &g[idx4(b, c_off, 0, 0, c_total, h, w)..][..vc * h * w];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d = s as f64;
                            }
                        }
                        contribs.push((v, dv));
                    }
                    c_off += vc;
                }
            }
            Op::SliceChannels { x, start, end } => {
                if want(*x) {
                    let s = self.shape(*x);
                    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let cs = end - start;
                    let mut dx = vec![0.0f64; self.data(*x).len()];
                    for b in 0..n {
                        let src = &g[b * cs * h * w..(b + 1) * cs * h * w];
                        let dst = &mut dx[idx4(b, *start, 0, 0, c, h, w)..][..cs * h * w];
                        for (d, &sv) in dst.iter_mut().zip(src) {
                            *d = sv as f64;
                        }
                    }
                    contribs.push((*x, dx));
                }
            }
            Op::ScaleChannels { x, s } => {
                let sh = self.shape(*x);
                let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                let xd = self.data(*x);
                let sd = self.data(*s);
                if want(*x) {
                    let mut dx = vec![0.0f64; xd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let gate = sd[b * c + ch] as f64;
                            let base = idx4(b, ch, 0, 0, c, h, w);
                            for i in 0..h * w {
                                dx[base + i] = g[base + i] as f64 * gate;
                            }
                        }
                    }
                    contribs.push((*x, dx));
                }
                if want(*s) {
                    let mut ds = vec![0.0f64; sd.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = idx4(b, ch, 0, 0, c, h, w);
                            let mut acc = 0.0f64;
                            for i in 0..h * w {
                                acc += g[base + i] as f64 * xd[base + i] as f64;
                            }
                            ds[b * c + ch] = acc;
                        }
                    }
                    contribs.push((*s, ds));
                }
            }
            Op::Sum { x } => {
                if want(*x) {
                    let gv = g[0] as f64;
                    contribs.push((*x, vec![gv; self.data(*x).len()]));
                }
            }
            Op::Mean { x } => {
                if want(*x) {
                    let n = self.data(*x).len();
                    let gv = g[0] as f64 / n as f64;
                    contribs.push((*x, vec![gv; n]));
                }
            }
            Op::BceWithLogits { x, y } => {
                if want(*x) {
                    let xd = self.data(*x);
                    let yd = self.data(*y);
                    contribs.push((
                        *x,
                        g.iter()
                            .zip(xd.iter().zip(yd))
                            .map(|(&gv, (&l, &t))| {
                                gv as f64 * (sigmoid_value(l as f64) - t as f64)
                            })
                            .collect(),
                    ));
                }
            }
        }
        contribs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares_is_2x() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_reruns() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new([2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(
            g.backward(x),
            Err(TensorError::NonScalarLoss { .. })
        ));
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(TensorError::BackwardConsumed)));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros([2, 3]));
        let b = g.input(Tensor::zeros([4, 5]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 5]"), "{msg}");
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(0.0));
        let y = g.sigmoid(x).unwrap();
        assert_eq!(g.data(y), &[0.5]);
    }

    #[test]
    fn softmax_rejects_empty_last_dim() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros([2, 0]));
        assert!(g.softmax_last(x).is_err());
    }

    #[test]
    fn registered_ops_unique() {
        let mut names: Vec<_> = REGISTERED_DIFFERENTIABLE_OPS.to_vec();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), REGISTERED_DIFFERENTIABLE_OPS.len());
    }
}
