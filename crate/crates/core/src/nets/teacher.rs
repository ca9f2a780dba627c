//! Trajectory denoiser: a small conditioned U-Net over the time axis.
//!
//! Input `[H, A]` (noisy trajectory for the teacher, latent for the student),
//! conditioning via FiLM from the observation embedding and — teacher only —
//! a flow-time embedding. Output is a data prediction of the same shape.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::diffcore::{Graph, Precision, Tensor, ValueId};
use crate::error::{Error, Result};
use crate::nets::blocks::{avg_pool2, broadcast_scalar, conv3, film, linear, time_mix, upsample2};
use crate::nets::time_embed::{sinusoidal_time_features, TIME_FEATURES};
use crate::nets::{Init, ParamSet};

/// Width/depth description shared by teacher and student.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetDims {
    pub horizon: usize,
    pub action_dim: usize,
    pub c1: usize,
    pub c2: usize,
    pub obs_dim: usize,
    pub time_dim: usize,
}

impl NetDims {
    pub fn validate(&self) -> Result<()> {
        let fields: [(&str, usize); 6] = [
            ("horizon", self.horizon),
            ("action_dim", self.action_dim),
            ("c1", self.c1),
            ("c2", self.c2),
            ("obs_dim", self.obs_dim),
            ("time_dim", self.time_dim),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config {
                    field: format!("dims.{name}"),
                    reason: "must be positive".to_string(),
                });
            }
        }
        if self.horizon % 2 != 0 {
            return Err(Error::Config {
                field: "dims.horizon".to_string(),
                reason: "must be even (one pooling stage)".to_string(),
            });
        }
        Ok(())
    }
}

fn init_conv(ps: &mut ParamSet, name: &str, c_in: usize, c_out: usize) -> Result<()> {
    let xavier = Init::Xavier { fan_in: 3 * c_in, fan_out: c_out };
    ps.init(&format!("{name}.w_m1"), &[c_in, c_out], xavier)?;
    ps.init(&format!("{name}.w_0"), &[c_in, c_out], xavier)?;
    ps.init(&format!("{name}.w_p1"), &[c_in, c_out], xavier)?;
    ps.init(&format!("{name}.b"), &[c_out], Init::Zeros)
}

fn init_film(ps: &mut ParamSet, name: &str, dims: &NetDims, c: usize, with_time: bool) -> Result<()> {
    // Small but nonzero so conditioning matters from the first step.
    ps.init(&format!("{name}.film_obs.w"), &[dims.obs_dim, 2 * c], Init::Normal { std: 0.05 })?;
    if with_time {
        ps.init(&format!("{name}.film_time.w"), &[dims.time_dim, 2 * c], Init::Normal { std: 0.05 })?;
    }
    ps.init(&format!("{name}.film.b"), &[2 * c], Init::Zeros)
}

pub(crate) fn init_backbone(ps: &mut ParamSet, dims: &NetDims, with_time: bool) -> Result<()> {
    let (c1, c2) = (dims.c1, dims.c2);
    init_conv(ps, "in", dims.action_dim, c1)?;
    init_conv(ps, "enc1", c1, c1)?;
    init_film(ps, "enc1", dims, c1, with_time)?;
    init_conv(ps, "enc2", c1, c2)?;
    init_film(ps, "enc2", dims, c2, with_time)?;
    let h2 = dims.horizon / 2;
    ps.init("mix.w", &[h2, h2], Init::NearIdentity { noise: 0.02 })?;
    init_conv(ps, "mid", c2, c2)?;
    init_film(ps, "mid", dims, c2, with_time)?;
    init_conv(ps, "dec1", c2 + c1, c1)?;
    init_film(ps, "dec1", dims, c1, with_time)?;
    init_conv(ps, "out", c1, dims.action_dim)?;
    // gated input residual: out = gate·x + Δ; starts as identity-plus-delta
    ps.init("res.gate", &[1, 1], Init::NearIdentity { noise: 0.0 })
}

/// Shared U-Net pass. `t_emb` present iff the FiLM time branches exist.
pub(crate) fn backbone(
    g: &mut Graph,
    ids: &BTreeMap<String, ValueId>,
    x: ValueId,
    e_obs: ValueId,
    t_emb: Option<ValueId>,
) -> Result<ValueId> {
    let h0 = conv3(g, ids, "in", x)?;

    let e1 = conv3(g, ids, "enc1", h0)?;
    let e1 = g.layernorm(e1)?;
    let e1 = film(g, ids, "enc1", e1, e_obs, t_emb)?;
    let e1 = g.gelu(e1)?;

    let d = avg_pool2(g, e1)?;
    let e2 = conv3(g, ids, "enc2", d)?;
    let e2 = g.layernorm(e2)?;
    let e2 = film(g, ids, "enc2", e2, e_obs, t_emb)?;
    let e2 = g.gelu(e2)?;

    let m = time_mix(g, ids, "mix", e2)?;
    let m = conv3(g, ids, "mid", m)?;
    let m = g.layernorm(m)?;
    let m = film(g, ids, "mid", m, e_obs, t_emb)?;
    let m = g.gelu(m)?;

    let u = upsample2(g, m)?;
    let cat = g.concat(&[u, e1], 1)?;
    let d1 = conv3(g, ids, "dec1", cat)?;
    let d1 = g.layernorm(d1)?;
    let d1 = film(g, ids, "dec1", d1, e_obs, t_emb)?;
    let d1 = g.gelu(d1)?;

    let delta = conv3(g, ids, "out", d1)?;
    let (rows, cols) = g.value(x).dims2().unwrap();
    let gate = broadcast_scalar(g, ids["res.gate"], rows, cols)?;
    let skip = g.mul(x, gate)?;
    g.add(skip, delta)
}

/// CFM data-prediction network conditioned on observation and flow time.
pub struct TeacherNet {
    dims: NetDims,
    params: ParamSet,
    nfe: AtomicU64,
}

impl TeacherNet {
    pub fn new(dims: NetDims, seed: u64, precision: Precision) -> Result<Self> {
        dims.validate()?;
        let mut ps = ParamSet::new(seed, precision);
        init_backbone(&mut ps, &dims, true)?;
        ps.init("time_mlp.l1.w", &[TIME_FEATURES, dims.time_dim], Init::Xavier {
            fan_in: TIME_FEATURES,
            fan_out: dims.time_dim,
        })?;
        ps.init("time_mlp.l1.b", &[dims.time_dim], Init::Zeros)?;
        ps.init("time_mlp.l2.w", &[dims.time_dim, dims.time_dim], Init::Xavier {
            fan_in: dims.time_dim,
            fan_out: dims.time_dim,
        })?;
        ps.init("time_mlp.l2.b", &[dims.time_dim], Init::Zeros)?;
        ps.init("mask.embed", &[1, dims.action_dim], Init::Normal { std: 0.5 })?;
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

    /// Records one denoising pass on `g`. `t_feats` is the `[1, TIME_FEATURES]`
    /// sinusoidal input; params register idempotently so repeated calls batch.
    pub fn forward(
        &self,
        g: &mut Graph,
        ids: &BTreeMap<String, ValueId>,
        tau_t: ValueId,
        t_feats: ValueId,
        e_obs: ValueId,
    ) -> Result<ValueId> {
        self.count_forward();
        let t1 = linear(g, ids, "time_mlp.l1", t_feats)?;
        let t1 = g.gelu(t1)?;
        let t_emb = linear(g, ids, "time_mlp.l2", t1)?;
        backbone(g, ids, tau_t, e_obs, Some(t_emb))
    }

    /// Inference convenience: fresh graph, returns the data prediction.
    pub fn predict(&self, tau_t: &Tensor, t: f64, e_obs: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new(self.params.precision());
        let ids = self.params.register(&mut g)?;
        let feats = sinusoidal_time_features(t)?;
        let tf = g.constant(vec![1, TIME_FEATURES], feats)?;
        let tau = g.input(tau_t);
        let e = g.input(e_obs);
        let out = self.forward(&mut g, &ids, tau, tf, e)?;
        Ok(g.value(out).clone())
    }

    pub fn mask_row(&self) -> Result<&Tensor> {
        self.params.get("mask.embed")
    }
}
