//! Adam with bias correction, keyed by parameter name.

use std::collections::BTreeMap;

use crate::diffcore::graph::GradMap;
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// First/second moment estimates plus the shared step counter.
pub struct AdamState {
    cfg: AdamConfig,
    step: u64,
    slots: BTreeMap<String, Moments>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig) -> Self {
        Self { cfg, step: 0, slots: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.cfg.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    /// One update over every parameter that has a gradient. Parameters
    /// missing from `grads` are left untouched (their moments don't advance).
    pub fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &GradMap) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, grad) in grads {
            let Some(p) = params.get_mut(name) else {
                return Err(Error::UnknownParam(name.clone()));
            };
            if p.shape() != grad.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adam-step",
                    lhs: p.shape().to_vec(),
                    rhs: grad.shape().to_vec(),
                });
            }
            let n = p.numel();
            let slot = self
                .slots
                .entry(name.clone())
                .or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
            let prec = p.precision();
            let data = p.data_mut();
            for i in 0..n {
                let g = grad.data()[i];
                slot.m[i] = c.beta1 * slot.m[i] + (1.0 - c.beta1) * g;
                slot.v[i] = c.beta2 * slot.v[i] + (1.0 - c.beta2) * g * g;
                let mhat = slot.m[i] / bc1;
                let vhat = slot.v[i] / bc2;
                data[i] = prec.quantize(data[i] - c.lr * mhat / (vhat.sqrt() + c.eps));
            }
        }
        Ok(())
    }
}
