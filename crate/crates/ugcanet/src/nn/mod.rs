//! Model building blocks on top of the tensor engine.
//!
//! All trainable tensors live in one [`ParamStore`]; layers hold [`ParamId`]
//! handles plus hyperparameters. A forward pass leafs each parameter into the
//! graph exactly once (tagged with its store index), so gradients drain back
//! to the optimizer by index after `backward`.

pub mod context;
pub mod decoder;
pub mod encoder;
pub mod heads;
pub mod model;

use crate::rng;
use crate::tensor::{Graph, Result, Tensor, Value};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Index of a parameter in its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: String, t: Tensor) -> ParamId {
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(t.with_requires_grad());
        ParamId(self.tensors.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_index_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|s| s.as_str()).zip(self.tensors.iter())
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total scalar parameter count.
    pub fn total_params(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    /// Scalar count across parameters whose name starts with `prefix`.
    pub fn params_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }
}

/// Deterministic weight initialisation: scaled uniform `U(-a, a)` with
/// `a = 1/sqrt(fan_in)`, drawn from the `init` substream of the run seed.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Self {
            store,
            rng: rng::stream(seed, "init"),
        }
    }

    pub fn uniform(&mut self, name: impl Into<String>, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..bound)).collect();
        self.store
            .add(name.into(), Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    pub fn constant(&mut self, name: impl Into<String>, shape: &[usize], value: f32) -> ParamId {
        self.store.add(name.into(), Tensor::full(shape.to_vec(), value))
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.constant(name, shape, 0.0)
    }
}

/// Fully-connected layer acting on the trailing dimension.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(init: &mut Init, scope: &str, in_dim: usize, out_dim: usize, bias: bool) -> Self {
        let w = init.uniform(format!("{scope}.weight"), &[in_dim, out_dim], in_dim);
        let b = bias.then(|| init.zeros(format!("{scope}.bias"), &[out_dim]));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Value) -> Result<Value> {
        let w = g.param(self.w.index(), store.get(self.w));
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let bv = g.param(b.index(), store.get(b));
                g.bias_last(y, bv)
            }
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        init: &mut Init,
        scope: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let w = init.uniform(
            format!("{scope}.weight"),
            &[cout, cin, kernel, kernel],
            cin * kernel * kernel,
        );
        let b = bias.then(|| init.zeros(format!("{scope}.bias"), &[cout]));
        Self { w, b, stride, padding }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Value) -> Result<Value> {
        let w = g.param(self.w.index(), store.get(self.w));
        let b = self.b.map(|b| g.param(b.index(), store.get(b)));
        g.conv2d(x, w, b, self.stride, self.padding)
    }
}

/// Depthwise convolution layer, stride 1.
#[derive(Debug, Clone)]
pub struct DepthwiseConv2dLayer {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub padding: usize,
}

impl DepthwiseConv2dLayer {
    pub fn new(
        init: &mut Init,
        scope: &str,
        channels: usize,
        kernel: usize,
        padding: usize,
        bias: bool,
    ) -> Self {
        let w = init.uniform(
            format!("{scope}.weight"),
            &[channels, 1, kernel, kernel],
            kernel * kernel,
        );
        let b = bias.then(|| init.zeros(format!("{scope}.bias"), &[channels]));
        Self { w, b, padding }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Value) -> Result<Value> {
        let w = g.param(self.w.index(), store.get(self.w));
        let b = self.b.map(|b| g.param(b.index(), store.get(b)));
        g.depthwise_conv2d(x, w, b, self.padding)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f32,
}

impl LayerNormLayer {
    pub fn new(init: &mut Init, scope: &str, dim: usize) -> Self {
        Self {
            gamma: init.constant(format!("{scope}.gamma"), &[dim], 1.0),
            beta: init.zeros(format!("{scope}.beta"), &[dim]),
            eps: 1e-6,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Value) -> Result<Value> {
        let gamma = g.param(self.gamma.index(), store.get(self.gamma));
        let beta = g.param(self.beta.index(), store.get(self.beta));
        g.layer_norm(x, gamma, beta, self.eps)
    }
}

/// `[B,N,C]` tokens -> `[B,C,H,W]` map (layout change only).
pub fn tokens_to_map(g: &mut Graph, tokens: Value, h: usize, w: usize) -> Result<Value> {
    let s = g.shape(tokens).to_vec();
    let (b, n, c) = (s[0], s[1], s[2]);
    if n != h * w {
        return Err(crate::tensor::TensorError::InvalidShape {
            op: "tokens_to_map",
            shape: s,
            detail: format!("token count {n} != {h}x{w}"),
        });
    }
    let t = g.permute(tokens, &[0, 2, 1])?;
    g.reshape(t, vec![b, c, h, w])
}

/// `[B,C,H,W]` map -> `[B,N,C]` tokens.
pub fn map_to_tokens(g: &mut Graph, map: Value) -> Result<Value> {
    let s = g.shape(map).to_vec();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let flat = g.reshape(map, vec![b, c, h * w])?;
    g.permute(flat, &[0, 2, 1])
}
