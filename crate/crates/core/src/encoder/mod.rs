//! Observation encoder: RGB/depth rasters fused by symmetric cross-attention
//! and a learned gate, a point-cloud branch, and a proprioceptive branch,
//! concatenated into one conditioning vector.

mod attention;
mod points;

pub use attention::cross_attend;
pub use points::encode_points;

use std::collections::BTreeMap;

use crate::diffcore::{Graph, Precision, Tensor, ValueId};
use crate::error::{Error, Result};
use crate::nets::{linear, Init, ParamSet};

/// Raw per-step sensor bundle produced by the task renderers.
#[derive(Debug, Clone, PartialEq)]
pub struct RawObservation {
    /// Row-major `raster × raster × 3`, values in [0, 1].
    pub rgb: Vec<f64>,
    /// Row-major `raster × raster`, signed-distance style depth in [-1, 1].
    pub depth: Vec<f64>,
    /// `n_points` × xyz.
    pub points: Vec<[f64; 3]>,
    /// Proprioceptive vector.
    pub state: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderDims {
    pub raster: usize,
    pub patch: usize,
    pub d_model: usize,
    pub n_points: usize,
    pub pcd_hidden: usize,
    pub pcd_dim: usize,
    pub state_dim: usize,
    pub state_hidden: usize,
    pub state_out: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            raster: 16,
            patch: 4,
            d_model: 16,
            n_points: 64,
            pcd_hidden: 32,
            pcd_dim: 16,
            state_dim: 4,
            state_hidden: 16,
            state_out: 8,
        }
    }
}

impl EncoderDims {
    pub fn tokens(&self) -> usize {
        let side = self.raster / self.patch;
        side * side
    }

    pub fn rgb_patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn depth_patch_dim(&self) -> usize {
        self.patch * self.patch
    }

    /// Width of the final conditioning vector.
    pub fn obs_dim(&self) -> usize {
        self.d_model + self.pcd_dim + self.state_out
    }

    pub fn validate(&self) -> Result<()> {
        if self.raster == 0 || self.patch == 0 || self.raster % self.patch != 0 {
            return Err(Error::Config {
                field: "encoder.patch".to_string(),
                reason: format!("patch {} must divide raster {}", self.patch, self.raster),
            });
        }
        if self.n_points == 0 {
            return Err(Error::Config {
                field: "encoder.n_points".to_string(),
                reason: "need at least one point".to_string(),
            });
        }
        Ok(())
    }
}

/// Pieces of the embedding exposed for diagnostics and tests.
pub struct EncodeOut {
    pub e_obs: ValueId,
    /// `[1, 2]` softmax gate over (rgb, depth).
    pub alpha: ValueId,
}

pub struct ObsEncoder {
    dims: EncoderDims,
    params: ParamSet,
}

impl ObsEncoder {
    pub fn new(dims: EncoderDims, seed: u64, precision: Precision) -> Result<Self> {
        dims.validate()?;
        let mut ps = ParamSet::new(seed, precision);
        let d = dims.d_model;
        let xav = |i: usize, o: usize| Init::Xavier { fan_in: i, fan_out: o };

        ps.init("enc.rgb_proj.w", &[dims.rgb_patch_dim(), d], xav(dims.rgb_patch_dim(), d))?;
        ps.init("enc.rgb_proj.b", &[d], Init::Zeros)?;
        ps.init("enc.depth_proj.w", &[dims.depth_patch_dim(), d], xav(dims.depth_patch_dim(), d))?;
        ps.init("enc.depth_proj.b", &[d], Init::Zeros)?;
        for dir in ["rgb", "depth"] {
            for m in ["q", "k", "v", "o"] {
                ps.init(&format!("enc.xattn_{dir}.w{m}"), &[d, d], xav(d, d))?;
            }
        }
        ps.init("enc.gate.l1.w", &[2 * d, d], xav(2 * d, d))?;
        ps.init("enc.gate.l1.b", &[d], Init::Zeros)?;
        // zero-init output: the gate starts exactly balanced
        ps.init("enc.gate.l2.w", &[d, 2], Init::Zeros)?;
        ps.init("enc.gate.l2.b", &[2], Init::Zeros)?;

        ps.init("enc.pcd.l1.w", &[3, dims.pcd_hidden], xav(3, dims.pcd_hidden))?;
        ps.init("enc.pcd.l1.b", &[dims.pcd_hidden], Init::Zeros)?;
        ps.init("enc.pcd.l2.w", &[dims.pcd_hidden, dims.pcd_dim], xav(dims.pcd_hidden, dims.pcd_dim))?;
        ps.init("enc.pcd.l2.b", &[dims.pcd_dim], Init::Zeros)?;

        ps.init("enc.state.l1.w", &[dims.state_dim, dims.state_hidden], xav(dims.state_dim, dims.state_hidden))?;
        ps.init("enc.state.l1.b", &[dims.state_hidden], Init::Zeros)?;
        ps.init("enc.state.l2.w", &[dims.state_hidden, dims.state_out], xav(dims.state_hidden, dims.state_out))?;
        ps.init("enc.state.l2.b", &[dims.state_out], Init::Zeros)?;

        Ok(Self { dims, params: ps })
    }

    pub fn dims(&self) -> &EncoderDims {
        &self.dims
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn validate_obs(&self, obs: &RawObservation) -> Result<()> {
        let d = &self.dims;
        let checks = [
            ("rgb", obs.rgb.len(), d.raster * d.raster * 3),
            ("depth", obs.depth.len(), d.raster * d.raster),
            ("points", obs.points.len(), d.n_points),
            ("state", obs.state.len(), d.state_dim),
        ];
        for (field, got, want) in checks {
            if got != want {
                return Err(Error::Config {
                    field: format!("observation.{field}"),
                    reason: format!("length {got}, expected {want}"),
                });
            }
        }
        Ok(())
    }

    /// Cuts a raster into non-overlapping `patch × patch` tokens.
    fn patchify(&self, raster: &[f64], channels: usize) -> (Vec<usize>, Vec<f64>) {
        let d = &self.dims;
        let side = d.raster / d.patch;
        let tokens = side * side;
        let dim = d.patch * d.patch * channels;
        let mut out = Vec::with_capacity(tokens * dim);
        for ty in 0..side {
            for tx in 0..side {
                for py in 0..d.patch {
                    for px in 0..d.patch {
                        let y = ty * d.patch + py;
                        let x = tx * d.patch + px;
                        let base = (y * d.raster + x) * channels;
                        out.extend_from_slice(&raster[base..base + channels]);
                    }
                }
            }
        }
        (vec![tokens, dim], out)
    }

    /// Records the full encoder on `g`.
    pub fn forward(
        &self,
        g: &mut Graph,
        ids: &BTreeMap<String, ValueId>,
        obs: &RawObservation,
    ) -> Result<EncodeOut> {
        self.validate_obs(obs)?;
        let d = &self.dims;

        // visual tokens
        let (rs, rd) = self.patchify(&obs.rgb, 3);
        let rgb_tokens = g.constant(rs, rd)?;
        let (ds, dd) = self.patchify(&obs.depth, 1);
        let depth_tokens = g.constant(ds, dd)?;
        let rgb = linear(g, ids, "enc.rgb_proj", rgb_tokens)?;
        let depth = linear(g, ids, "enc.depth_proj", depth_tokens)?;

        // each modality attends to the other, residual form
        let rgb_f = cross_attend(g, ids, "enc.xattn_rgb", rgb, depth)?;
        let depth_f = cross_attend(g, ids, "enc.xattn_depth", depth, rgb)?;

        // mean-pool tokens to a row each
        let pool_rgb = mean_rows(g, rgb_f)?;
        let pool_depth = mean_rows(g, depth_f)?;

        // gate on the pooled pair
        let both = g.concat(&[pool_rgb, pool_depth], 1)?;
        let h = linear(g, ids, "enc.gate.l1", both)?;
        let h = g.gelu(h)?;
        let logits = linear(g, ids, "enc.gate.l2", h)?;
        let alpha = g.softmax_lastdim(logits)?;
        let a_rgb = g.slice(alpha, 1, 0, 1)?;
        let a_depth = g.slice(alpha, 1, 1, 1)?;
        let a_rgb = broadcast_cols(g, a_rgb, d.d_model)?;
        let a_depth = broadcast_cols(g, a_depth, d.d_model)?;
        let wr = g.mul(pool_rgb, a_rgb)?;
        let wd = g.mul(pool_depth, a_depth)?;
        let h_vis = g.add(wr, wd)?;

        // point cloud
        let flat: Vec<f64> = obs.points.iter().flat_map(|p| p.iter().copied()).collect();
        let pts = g.constant(vec![d.n_points, 3], flat)?;
        let h_pcd = encode_points(g, ids, "enc.pcd", pts)?;

        // proprio
        let st = g.constant(vec![1, d.state_dim], obs.state.clone())?;
        let s = linear(g, ids, "enc.state.l1", st)?;
        let s = g.gelu(s)?;
        let h_state = linear(g, ids, "enc.state.l2", s)?;

        let cat = g.concat(&[h_vis, h_pcd, h_state], 1)?;
        let e_obs = g.layernorm(cat)?;
        Ok(EncodeOut { e_obs, alpha })
    }

    /// Fresh-graph convenience: returns `(e_obs [1, obs_dim], alpha [1, 2])`.
    pub fn encode(&self, obs: &RawObservation) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new(self.params.precision());
        let ids = self.params.register(&mut g)?;
        let out = self.forward(&mut g, &ids, obs)?;
        Ok((g.value(out.e_obs).clone(), g.value(out.alpha).clone()))
    }
}

/// Mean over rows: `[T, C] → [1, C]` via a constant 1/T row.
fn mean_rows(g: &mut Graph, x: ValueId) -> Result<ValueId> {
    let rows = g.value(x).shape()[0];
    let w = g.constant(vec![1, rows], vec![1.0 / rows as f64; rows])?;
    g.matmul(w, x)
}

/// Repeats a `[1, 1]` scalar across `[1, n]`.
fn broadcast_cols(g: &mut Graph, x: ValueId, n: usize) -> Result<ValueId> {
    let ones = g.constant(vec![1, n], vec![1.0; n])?;
    let xt = g.matmul(x, ones)?;
    Ok(xt)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::diffcore::{bit_equal, finite_diff_check};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_dims() -> EncoderDims {
        EncoderDims {
            raster: 8,
            patch: 4,
            d_model: 6,
            n_points: 10,
            pcd_hidden: 8,
            pcd_dim: 5,
            state_dim: 4,
            state_hidden: 6,
            state_out: 3,
        }
    }

    pub(crate) fn random_obs(dims: &EncoderDims, seed: u64) -> RawObservation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RawObservation {
            rgb: (0..dims.raster * dims.raster * 3).map(|_| rng.gen_range(0.0..1.0)).collect(),
            depth: (0..dims.raster * dims.raster).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            points: (0..dims.n_points)
                .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.0..0.2)])
                .collect(),
            state: (0..dims.state_dim).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn embedding_shape_and_determinism() {
        let dims = tiny_dims();
        let enc = ObsEncoder::new(dims, 2, Precision::Standard32).unwrap();
        let obs = random_obs(&dims, 3);
        let (e1, a1) = enc.encode(&obs).unwrap();
        let (e2, _) = enc.encode(&obs).unwrap();
        assert_eq!(e1.shape(), &[1, dims.obs_dim()]);
        assert_eq!(a1.shape(), &[1, 2]);
        assert!(bit_equal(&e1, &e2));
    }

    #[test]
    fn gate_starts_exactly_balanced() {
        let dims = tiny_dims();
        let enc = ObsEncoder::new(dims, 5, Precision::Standard32).unwrap();
        let obs = random_obs(&dims, 7);
        let (_, alpha) = enc.encode(&obs).unwrap();
        assert_eq!(alpha.data(), &[0.5, 0.5]);
    }

    #[test]
    fn observation_length_validation() {
        let dims = tiny_dims();
        let enc = ObsEncoder::new(dims, 5, Precision::Standard32).unwrap();
        let mut obs = random_obs(&dims, 7);
        obs.state.push(0.0);
        assert!(enc.encode(&obs).is_err());
        let mut obs2 = random_obs(&dims, 7);
        obs2.points.pop();
        assert!(enc.encode(&obs2).is_err());
    }

    #[test]
    fn modalities_all_reach_the_embedding() {
        let dims = tiny_dims();
        let enc = ObsEncoder::new(dims, 11, Precision::Standard32).unwrap();
        let base = random_obs(&dims, 13);
        let (e0, _) = enc.encode(&base).unwrap();
        let mut m = base.clone();
        m.rgb[0] += 0.7;
        let (e_rgb, _) = enc.encode(&m).unwrap();
        assert!(!bit_equal(&e0, &e_rgb), "rgb ignored");
        let mut m = base.clone();
        m.depth[5] -= 0.9;
        let (e_depth, _) = enc.encode(&m).unwrap();
        assert!(!bit_equal(&e0, &e_depth), "depth ignored");
        let mut m = base.clone();
        m.points[3][1] += 1.5;
        let (e_pts, _) = enc.encode(&m).unwrap();
        assert!(!bit_equal(&e0, &e_pts), "points ignored");
        let mut m = base.clone();
        m.state[0] += 0.4;
        let (e_state, _) = enc.encode(&m).unwrap();
        assert!(!bit_equal(&e0, &e_state), "state ignored");
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let dims = tiny_dims();
        let enc = ObsEncoder::new(dims, 17, Precision::Extended64).unwrap();
        let obs = random_obs(&dims, 19);
        let report = finite_diff_check(enc.params().map(), 2, 23, |g, p| {
            let mut ids = BTreeMap::new();
            for (name, t) in p {
                ids.insert(name.clone(), g.param(name, t)?);
            }
            let out = enc.forward(g, &ids, &obs)?;
            let sq = g.mul(out.e_obs, out.e_obs)?;
            g.sum(sq)
        })
        .unwrap();
        assert!(
            report.passes(),
            "rel err {} at {}[{}]",
            report.max_rel_err,
            report.worst_param,
            report.worst_index
        );
    }
}
