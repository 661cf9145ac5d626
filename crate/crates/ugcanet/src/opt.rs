//! Adam optimizer and learning-rate schedules.

use crate::nn::ParamStore;
use crate::tensor::Graph;

/// Standard Adam with bias correction; state is keyed by parameter index.
pub struct Adam {
    pub lr: f32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f32, param_count: usize) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![Vec::new(); param_count],
            v: vec![Vec::new(); param_count],
        }
    }

    /// Apply one update from the gradients recorded on `graph`. `lr_scale`
    /// multiplies the base learning rate (schedule hook).
    pub fn step(&mut self, store: &mut ParamStore, graph: &Graph, lr_scale: f32) {
        self.step += 1;
        let t = self.step as f64;
        let lr = (self.lr * lr_scale) as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for (tag, grad) in graph.param_grads() {
            let Some(grad) = grad else { continue };
            if self.m[tag].is_empty() {
                self.m[tag] = vec![0.0; grad.len()];
                self.v[tag] = vec![0.0; grad.len()];
            }
            let m = &mut self.m[tag];
            let v = &mut self.v[tag];
            let data = store.by_index_mut(tag).data_mut();
            for i in 0..grad.len() {
                let gi = grad[i] as f64;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                data[i] = (data[i] as f64 - lr * m_hat / (v_hat.sqrt() + self.eps)) as f32;
            }
        }
    }
}

/// Learning-rate multiplier over training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Linear warmup over the first `warmup` steps, then cosine annealing
    /// to zero across the remainder.
    WarmupCosine { warmup: usize, total: usize },
}

impl LrSchedule {
    pub fn scale(&self, step: usize) -> f32 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::WarmupCosine { warmup, total } => {
                if warmup > 0 && step < warmup {
                    (step + 1) as f32 / warmup as f32
                } else {
                    let span = total.saturating_sub(warmup).max(1) as f32;
                    let progress = (step - warmup) as f32 / span;
                    0.5 * (1.0 + (std::f32::consts::PI * progress.min(1.0)).cos())
                }
            }
        }
    }
}
