//! Conditional flow matching: linear paths between noise and data, a
//! data-prediction loss, ODE sampling, and the teacher training loop.

mod loss;
mod sampler;
mod train;

pub use loss::{cfm_loss, mask_probability, BatchItem};
pub use sampler::{sample_ode, sample_ode_trace, DataPredictor, OdeMethod};
pub use train::{train_teacher, EpochStats, TeacherBundle, TrainConfig};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::Tensor;
use crate::encoder::RawObservation;
use crate::error::{Error, Result};

/// Velocity denominator floor: v = (pred − τ_t) / max(1 − t, EPS).
pub const T_EPS: f64 = 1e-3;

/// One expert demonstration: what was seen and what the expert did next.
#[derive(Debug, Clone)]
pub struct Demo {
    pub obs: RawObservation,
    /// `[H, A]` per-step deltas in task units.
    pub target: Tensor,
}

/// Logit-normal time sampler: t = sigmoid(μ + σ·n), n ~ N(0, 1).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSchedule {
    pub mu: f64,
    pub sigma: f64,
}

impl Default for FlowSchedule {
    fn default() -> Self {
        Self { mu: 0.0, sigma: 1.0 }
    }
}

impl FlowSchedule {
    pub fn sample_time(&self, rng: &mut ChaCha8Rng) -> f64 {
        let n: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
        sigmoid(self.mu + self.sigma * n)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// τ_t = (1 − t)·τ_0 + t·τ_1, all same shape.
pub fn interpolate_path(tau0: &Tensor, tau1: &Tensor, t: f64) -> Result<Tensor> {
    if tau0.shape() != tau1.shape() {
        return Err(Error::ShapeMismatch {
            op: "interpolate-path",
            lhs: tau0.shape().to_vec(),
            rhs: tau1.shape().to_vec(),
        });
    }
    let data: Vec<f64> = tau0
        .data()
        .iter()
        .zip(tau1.data())
        .map(|(a, b)| (1.0 - t) * a + t * b)
        .collect();
    Tensor::new(tau0.shape().to_vec(), data, tau0.precision())
}

/// v = (pred − τ_t) / max(1 − t, T_EPS).
pub fn velocity_from_data_pred(pred: &Tensor, tau_t: &Tensor, t: f64) -> Result<Tensor> {
    if pred.shape() != tau_t.shape() {
        return Err(Error::ShapeMismatch {
            op: "velocity",
            lhs: pred.shape().to_vec(),
            rhs: tau_t.shape().to_vec(),
        });
    }
    let denom = (1.0 - t).max(T_EPS);
    let data: Vec<f64> = pred
        .data()
        .iter()
        .zip(tau_t.data())
        .map(|(p, x)| (p - x) / denom)
        .collect();
    Tensor::new(pred.shape().to_vec(), data, pred.precision())
}

/// Standard-normal draw shaped like a trajectory.
pub fn sample_tau0<R: Rng>(rng: &mut R, horizon: usize, action_dim: usize, precision: crate::diffcore::Precision) -> Tensor {
    crate::nets::gaussian_tensor(rng, &[horizon, action_dim], precision)
}
