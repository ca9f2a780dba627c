//! ODE integration from noise to trajectory using data predictions.

use crate::cfm::velocity_from_data_pred;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::nets::TeacherNet;

/// Anything that maps (τ_t, t, e_obs) to a data prediction τ̂_1.
pub trait DataPredictor {
    fn predict_data(&self, tau_t: &Tensor, t: f64, e_obs: &Tensor) -> Result<Tensor>;
}

impl DataPredictor for TeacherNet {
    fn predict_data(&self, tau_t: &Tensor, t: f64, e_obs: &Tensor) -> Result<Tensor> {
        self.predict(tau_t, t, e_obs)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OdeMethod {
    /// N predictor calls: N−1 Euler updates plus a final jump to the
    /// prediction.
    Euler,
    /// 2N−1 calls: Heun (trapezoid) on each interior interval, same final
    /// jump.
    Heun,
}

impl OdeMethod {
    pub fn nfe(&self, n_steps: usize) -> u64 {
        match self {
            OdeMethod::Euler => n_steps as u64,
            OdeMethod::Heun => (2 * n_steps - 1) as u64,
        }
    }
}

/// Integrates τ from t=0 (τ = z) to t=1. Grid t_n = n/N; the last step
/// replaces integration with the model's own data prediction.
pub fn sample_ode<P: DataPredictor>(
    predictor: &P,
    z: &Tensor,
    e_obs: &Tensor,
    n_steps: usize,
    method: OdeMethod,
) -> Result<Tensor> {
    Ok(sample_ode_trace(predictor, z, e_obs, n_steps, method)?.pop().unwrap())
}

/// Like [`sample_ode`] but returns the state after every update
/// (`trace[k]` = τ at t = (k+1)/N; the last entry is the final sample).
pub fn sample_ode_trace<P: DataPredictor>(
    predictor: &P,
    z: &Tensor,
    e_obs: &Tensor,
    n_steps: usize,
    method: OdeMethod,
) -> Result<Vec<Tensor>> {
    if n_steps == 0 {
        return Err(Error::Config {
            field: "n_steps".to_string(),
            reason: "must be at least 1".to_string(),
        });
    }
    let n = n_steps as f64;
    let dt = 1.0 / n;
    let mut tau = z.clone();
    let mut trace = Vec::with_capacity(n_steps);
    for step in 0..n_steps - 1 {
        let t = step as f64 / n;
        match method {
            OdeMethod::Euler => {
                let pred = predictor.predict_data(&tau, t, e_obs)?;
                let v = velocity_from_data_pred(&pred, &tau, t)?;
                tau = axpy(&tau, &v, dt)?;
            }
            OdeMethod::Heun => {
                let pred1 = predictor.predict_data(&tau, t, e_obs)?;
                let v1 = velocity_from_data_pred(&pred1, &tau, t)?;
                let probe = axpy(&tau, &v1, dt)?;
                let t2 = (step + 1) as f64 / n;
                let pred2 = predictor.predict_data(&probe, t2, e_obs)?;
                let v2 = velocity_from_data_pred(&pred2, &probe, t2)?;
                let half = axpy(&tau, &v1, dt / 2.0)?;
                tau = axpy(&half, &v2, dt / 2.0)?;
            }
        }
        trace.push(tau.clone());
    }
    // final jump: τ(1) := D(τ, t_{N−1})
    let t_last = (n_steps - 1) as f64 / n;
    tau = predictor.predict_data(&tau, t_last, e_obs)?;
    trace.push(tau);
    Ok(trace)
}

fn axpy(x: &Tensor, v: &Tensor, a: f64) -> Result<Tensor> {
    let data: Vec<f64> = x.data().iter().zip(v.data()).map(|(xi, vi)| xi + a * vi).collect();
    Tensor::new(x.shape().to_vec(), data, x.precision())
}
