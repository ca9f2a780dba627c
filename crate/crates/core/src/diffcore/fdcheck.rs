//! Central finite-difference verification of analytic gradients.
//!
//! A check builds the graph twice per probed entry (θ±ε) in Extended64 and
//! compares the slope against the analytic gradient from one backward pass.
//! Builders must be deterministic; we verify that by evaluating the unperturbed
//! loss twice and demanding bit equality.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffcore::graph::{Graph, ValueId};
use crate::diffcore::tensor::{Precision, Tensor};
use crate::error::{Error, Result};

pub const FD_EPSILON: f64 = 1e-4;
pub const FD_REL_TOL: f64 = 1e-3;

/// Worst relative error over all probed entries, plus where it occurred.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub entries_checked: usize,
}

impl FdReport {
    pub fn passes(&self) -> bool {
        self.max_rel_err < FD_REL_TOL
    }
}

/// Checks analytic gradients of `build` against central differences.
///
/// `build` receives the parameter set and must record a full graph and return
/// the scalar loss id. At most `max_entries_per_param` coordinates per
/// parameter are probed (all of them when the cap is larger), chosen by a
/// seeded shuffle so runs are reproducible.
pub fn finite_diff_check<F>(
    params: &BTreeMap<String, Tensor>,
    max_entries_per_param: usize,
    seed: u64,
    mut build: F,
) -> Result<FdReport>
where
    F: FnMut(&mut Graph, &BTreeMap<String, Tensor>) -> Result<ValueId>,
{
    let params: BTreeMap<String, Tensor> = params
        .iter()
        .map(|(k, v)| (k.clone(), v.to_precision(Precision::Extended64)))
        .collect();

    let eval = |build: &mut F, p: &BTreeMap<String, Tensor>| -> Result<f64> {
        let mut g = Graph::new(Precision::Extended64);
        let loss = build(&mut g, p)?;
        let t = g.value(loss);
        t.scalar_value().ok_or_else(|| Error::NonScalarLoss { shape: t.shape().to_vec() })
    };

    let base = eval(&mut build, &params)?;
    if eval(&mut build, &params)? != base {
        return Err(Error::NonDeterministicBuilder);
    }

    let mut g = Graph::new(Precision::Extended64);
    let loss = build(&mut g, &params)?;
    let grads = g.backward(loss)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        entries_checked: 0,
    };

    for (name, tensor) in &params {
        // A param the builder never registered contributes nothing; its
        // analytic gradient is zero and the FD probes should agree.
        let zero = Tensor::zeros(tensor.shape().to_vec(), Precision::Extended64);
        let grad = grads.get(name).unwrap_or(&zero);
        let n = tensor.numel();
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        idx.truncate(max_entries_per_param.min(n));
        idx.sort_unstable();

        for &i in &idx {
            let probe = |delta: f64, build: &mut F| -> Result<f64> {
                let mut p = params.clone();
                let t = p.get_mut(name).unwrap();
                t.data_mut()[i] += delta;
                eval(build, &p)
            };
            let up = probe(FD_EPSILON, &mut build)?;
            let down = probe(-FD_EPSILON, &mut build)?;
            let fd = (up - down) / (2.0 * FD_EPSILON);
            let analytic = grad.data()[i];
            let rel = (analytic - fd).abs() / (fd.abs() + 1e-12);
            report.entries_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
            }
        }
    }
    Ok(report)
}
