//! One-step generator distilled from the teacher.
//!
//! Same backbone, but the input is a latent draw z (shape `[H, A]`, standard
//! normal) instead of a noisy trajectory, and there is no flow-time branch:
//! one forward pass maps (z, observation) straight to a trajectory.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};

use super::teacher::{backbone, NetDims, TeacherNet};
use crate::diffcore::{Graph, Precision, Tensor, ValueId};
use crate::error::Result;
use crate::nets::ParamSet;

pub struct StudentNet {
    dims: NetDims,
    params: ParamSet,
    nfe: AtomicU64,
}

impl StudentNet {
    pub fn new(dims: NetDims, seed: u64, precision: Precision) -> Result<Self> {
        dims.validate()?;
        let mut ps = ParamSet::new(seed, precision);
        super::teacher::init_backbone(&mut ps, &dims, false)?;
        Ok(Self { dims, params: ps, nfe: AtomicU64::new(0) })
    }

    pub fn dims(&self) -> &NetDims {
        &self.dims
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    pub fn nfe(&self) -> u64 {
        self.nfe.load(Ordering::Relaxed)
    }

    pub fn reset_nfe(&self) {
        self.nfe.store(0, Ordering::Relaxed);
    }

    pub fn count_forward(&self) {
        self.nfe.fetch_add(1, Ordering::Relaxed);
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ids: &BTreeMap<String, ValueId>,
        z: ValueId,
        e_obs: ValueId,
    ) -> Result<ValueId> {
        self.count_forward();
        backbone(g, ids, z, e_obs, None)
    }

    /// Inference convenience: one latent in, one trajectory out.
    pub fn generate(&self, z: &Tensor, e_obs: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(self.params.precision());
        let ids = self.params.register(&mut g)?;
        let zi = g.input(z);
        let ei = g.input(e_obs);
        let out = self.forward(&mut g, &ids, zi, ei)?;
        Ok(g.value(out).clone())
    }

    /// Copies backbone weights from a trained teacher, dropping its
    /// time-conditioning parameters. Every student name must be covered.
    pub fn init_from_teacher(&mut self, teacher: &TeacherNet) -> Result<()> {
        let student_names: BTreeSet<String> = self.params.names().into_iter().collect();
        let mut copied = BTreeMap::new();
        for (name, t) in teacher.params().map() {
            if student_names.contains(name) {
                copied.insert(name.clone(), t.clone());
            }
        }
        self.params.load(copied)
    }
}
