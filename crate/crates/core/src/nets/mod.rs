//! Network building blocks on top of the autodiff graph.
//!
//! All activations are rank-2 `[rows, channels]`; conditioning vectors ride
//! as `[1, dim]` row vectors. Parameters live in a [`ParamSet`] and are
//! initialized deterministically from `(seed, name)`, so construction order
//! never changes the weights.

mod blocks;
mod student;
mod teacher;
mod time_embed;

pub use blocks::{avg_pool2, broadcast_scalar, conv3, film, linear, row_broadcast, time_mix, upsample2};
pub use student::StudentNet;
pub use teacher::{NetDims, TeacherNet};
pub use time_embed::{sinusoidal_time_features, TIME_FEATURES};

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{Graph, Precision, Tensor, ValueId};
use crate::error::{Error, Result};
use crate::rng::{rng_for, tag};

/// How a parameter tensor is filled at construction.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Normal with std √(2/(fan_in+fan_out)).
    Xavier { fan_in: usize, fan_out: usize },
    Normal { std: f64 },
    Zeros,
    /// Identity plus small noise; square shapes only.
    NearIdentity { noise: f64 },
}

/// Named parameter tensors plus the seed they were drawn from.
pub struct ParamSet {
    seed: u64,
    precision: Precision,
    map: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new(seed: u64, precision: Precision) -> Self {
        Self { seed, precision, map: BTreeMap::new() }
    }

    pub fn from_map(map: BTreeMap<String, Tensor>, seed: u64, precision: Precision) -> Self {
        Self { seed, precision, map }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn map(&self) -> &BTreeMap<String, Tensor> {
        &self.map
    }

    pub fn map_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.map
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.map
    }

    pub fn names(&self) -> Vec<String> {
        self.map.keys().cloned().collect()
    }

    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// Creates (or keeps, if already present with the right shape) a named
    /// parameter. Initialization depends only on `(seed, name)`.
    pub fn init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<()> {
        if let Some(existing) = self.map.get(name) {
            if existing.shape() == shape {
                return Ok(());
            }
            return Err(Error::ParamConflict { name: name.to_string() });
        }
        let n: usize = shape.iter().product();
        let mut rng = rng_for(self.seed, &[tag(name)]);
        let data: Vec<f64> = match init {
            Init::Xavier { fan_in, fan_out } => {
                let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Normal::new(0.0, std).unwrap();
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std).unwrap();
                (0..n).map(|_| dist.sample(&mut rng)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::NearIdentity { noise } => {
                let (r, c) = (shape[0], shape[1]);
                let mut data = vec![0.0; n];
                for i in 0..r.min(c) {
                    data[i * c + i] = 1.0;
                }
                if noise > 0.0 {
                    let dist = Normal::new(0.0, noise).unwrap();
                    for x in data.iter_mut() {
                        *x += dist.sample(&mut rng);
                    }
                }
                data
            }
        };
        let t = Tensor::new(shape.to_vec(), data, self.precision)?;
        self.map.insert(name.to_string(), t);
        Ok(())
    }

    /// Registers every parameter on `g` and returns name → handle.
    pub fn register(&self, g: &mut Graph) -> Result<BTreeMap<String, ValueId>> {
        let mut ids = BTreeMap::new();
        for (name, t) in &self.map {
            ids.insert(name.clone(), g.param(name, t)?);
        }
        Ok(ids)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// Replaces the tensors with a loaded map; names and shapes must match
    /// exactly (extra or missing entries are an error).
    pub fn load(&mut self, loaded: BTreeMap<String, Tensor>) -> Result<()> {
        if loaded.len() != self.map.len() {
            let missing: Vec<&String> = self.map.keys().filter(|k| !loaded.contains_key(*k)).collect();
            let extra: Vec<&String> = loaded.keys().filter(|k| !self.map.contains_key(*k)).collect();
            return Err(Error::Format {
                format: "FDCK",
                reason: format!("parameter set mismatch: missing {missing:?} extra {extra:?}"),
            });
        }
        for (name, t) in loaded {
            let Some(slot) = self.map.get_mut(&name) else {
                return Err(Error::UnknownParam(name));
            };
            if slot.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load-checkpoint",
                    lhs: slot.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            *slot = t.to_precision(self.precision);
        }
        Ok(())
    }

    /// Draws a standard-normal tensor from the set's seed and extra tags
    /// without touching the parameters.
    pub fn noise(&self, tags: &[u64], shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let mut rng = rng_for(self.seed, tags);
        let dist = Normal::new(0.0, 1.0).unwrap();
        let data: Vec<f64> = (0..n).map(|_| dist.sample(&mut rng)).collect();
        Tensor::new(shape.to_vec(), data, self.precision).unwrap()
    }
}

/// Standard-normal tensor from any RNG, at the given precision.
pub fn gaussian_tensor<R: Rng>(rng: &mut R, shape: &[usize], precision: Precision) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, 1.0).unwrap();
    let data: Vec<f64> = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data, precision).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_order_independent() {
        let mut a = ParamSet::new(9, Precision::Standard32);
        a.init("x.w", &[3, 3], Init::Normal { std: 1.0 }).unwrap();
        a.init("y.w", &[2, 2], Init::Normal { std: 1.0 }).unwrap();
        let mut b = ParamSet::new(9, Precision::Standard32);
        b.init("y.w", &[2, 2], Init::Normal { std: 1.0 }).unwrap();
        b.init("x.w", &[3, 3], Init::Normal { std: 1.0 }).unwrap();
        for name in ["x.w", "y.w"] {
            assert!(crate::diffcore::bit_equal(a.get(name).unwrap(), b.get(name).unwrap()));
        }
    }

    #[test]
    fn near_identity_starts_at_identity() {
        let mut p = ParamSet::new(0, Precision::Extended64);
        p.init("m", &[3, 3], Init::NearIdentity { noise: 0.0 }).unwrap();
        assert_eq!(
            p.get("m").unwrap().data(),
            &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]
        );
    }

    #[test]
    fn load_rejects_shape_and_name_drift() {
        let mut p = ParamSet::new(1, Precision::Standard32);
        p.init("w", &[2, 2], Init::Zeros).unwrap();
        let mut wrong_shape = BTreeMap::new();
        wrong_shape.insert(
            "w".to_string(),
            Tensor::zeros(vec![2, 3], Precision::Standard32),
        );
        assert!(p.load(wrong_shape).is_err());
        let mut wrong_name = BTreeMap::new();
        wrong_name.insert(
            "v".to_string(),
            Tensor::zeros(vec![2, 2], Precision::Standard32),
        );
        assert!(p.load(wrong_name).is_err());
    }
}
