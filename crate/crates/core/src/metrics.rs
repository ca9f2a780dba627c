//! Mode coverage, fidelity, collapse, and inference-cost metrics.
//!
//! All trajectory distances here are Euclidean on the path embedding (see
//! `distill::path_embed`). δ_mode comes from an expert pre-pass, never from
//! a hand-picked constant.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::distill::{chamfer_distance, path_embed, squared_dist};
use crate::error::{Error, Result};
use crate::io::write_csv;
use crate::rng::{rng_for, tag};
use crate::tasks::{expert_set, Scene, TaskSpec};

/// Fresh expert demos drawn per mode when building `ModeStats`.
pub const EXPERT_POOL_PER_MODE: usize = 256;
pub const BOOTSTRAP_RESAMPLES: usize = 1000;

fn embed(t: &Tensor) -> Result<Vec<f64>> {
    Ok(path_embed(t)?.data().to_vec())
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    squared_dist(a, b).sqrt()
}

/// Nearest-rank percentile of an unsorted sample, q in [0,1].
fn percentile(mut xs: Vec<f64>, q: f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let idx = ((q * xs.len() as f64).ceil() as usize).saturating_sub(1);
    xs[idx.min(xs.len() - 1)]
}

/// Ground-truth mode geometry for one observation: embedded expert pools,
/// their centroids, and the membership threshold δ_mode (99th percentile of
/// the pairwise intra-mode distances, pooled over modes).
pub struct ModeStats {
    pools: Vec<Vec<Vec<f64>>>,
    centroids: Vec<Vec<f64>>,
    pub delta_mode: f64,
}

impl ModeStats {
    pub fn build(task: &TaskSpec, scene: &Scene, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, &[tag("mode-stats")]);
        let mut pools = Vec::with_capacity(task.modes());
        for mode in 0..task.modes() {
            let set = expert_set(task, scene, mode, EXPERT_POOL_PER_MODE, &mut rng)?;
            pools.push(set.iter().map(embed).collect::<Result<Vec<_>>>()?);
        }
        let centroids = pools
            .iter()
            .map(|pool| {
                let mut c = vec![0.0; pool[0].len()];
                for x in pool {
                    for (ci, xi) in c.iter_mut().zip(x) {
                        *ci += xi / pool.len() as f64;
                    }
                }
                c
            })
            .collect();
        let mut intra = Vec::new();
        for pool in &pools {
            for (i, x) in pool.iter().enumerate() {
                for y in &pool[i + 1..] {
                    intra.push(euclid(x, y));
                }
            }
        }
        Ok(Self { pools, centroids, delta_mode: percentile(intra, 0.99) })
    }

    pub fn modes(&self) -> usize {
        self.pools.len()
    }

    /// Index of the nearest mode centroid (ties → lowest index).
    pub fn classify(&self, embedded: &[f64]) -> usize {
        let mut best = (0usize, f64::INFINITY);
        for (m, c) in self.centroids.iter().enumerate() {
            let d = squared_dist(embedded, c);
            if d < best.1 {
                best = (m, d);
            }
        }
        best.0
    }

    /// Distance from an embedded trajectory to its nearest expert in `mode`.
    pub fn nn_to_pool(&self, mode: usize, embedded: &[f64]) -> f64 {
        self.pools[mode]
            .iter()
            .map(|y| euclid(embedded, y))
            .fold(f64::INFINITY, f64::min)
    }

    fn union_pool(&self) -> Vec<&Vec<f64>> {
        self.pools.iter().flatten().collect()
    }
}

/// Fraction of ground-truth modes hit: a mode counts when some generated
/// trajectory classifies to it and sits within δ_mode of its expert pool.
pub fn mode_coverage(genset: &[Tensor], stats: &ModeStats) -> Result<f64> {
    if genset.is_empty() {
        return Err(Error::EmptySet("mode_coverage"));
    }
    let mut hit = vec![false; stats.modes()];
    for t in genset {
        let e = embed(t)?;
        let m = stats.classify(&e);
        if stats.nn_to_pool(m, &e) <= stats.delta_mode {
            hit[m] = true;
        }
    }
    Ok(hit.iter().filter(|h| **h).count() as f64 / stats.modes() as f64)
}

/// Fraction of generated trajectories within `delta` of the expert pool.
pub fn mode_fidelity(genset: &[Tensor], pool: &[Vec<f64>], delta: f64) -> Result<f64> {
    if genset.is_empty() || pool.is_empty() {
        return Err(Error::EmptySet("mode_fidelity"));
    }
    let mut ok = 0usize;
    for t in genset {
        let e = embed(t)?;
        let nn = pool.iter().map(|y| euclid(&e, y)).fold(f64::INFINITY, f64::min);
        ok += (nn <= delta) as usize;
    }
    Ok(ok as f64 / genset.len() as f64)
}

/// Fidelity against the stats' own pools at δ_mode.
pub fn fidelity_at_delta(genset: &[Tensor], stats: &ModeStats) -> Result<f64> {
    let union: Vec<Vec<f64>> = stats.union_pool().into_iter().cloned().collect();
    mode_fidelity(genset, &union, stats.delta_mode)
}

/// Mean pairwise Euclidean distance among the set, embedded. K < 2 errors.
pub fn collapse_score(genset: &[Tensor]) -> Result<f64> {
    if genset.len() < 2 {
        return Err(Error::EmptySet("collapse_score needs K >= 2"));
    }
    let es: Vec<Vec<f64>> = genset.iter().map(embed).collect::<Result<_>>()?;
    let mut dists = Vec::with_capacity(es.len() * (es.len() - 1) / 2);
    for i in 0..es.len() {
        for j in i + 1..es.len() {
            dists.push(euclid(&es[i], &es[j]));
        }
    }
    // value-sorted sum so the score is exactly permutation invariant
    dists.sort_by(f64::total_cmp);
    let pairs = dists.len();
    Ok(dists.into_iter().sum::<f64>() / pairs as f64)
}

/// `collapse_score(genset) / collapse_score(reference)`.
pub fn normalized_collapse(genset: &[Tensor], reference: &[Tensor]) -> Result<f64> {
    let r = collapse_score(reference)?;
    if r <= 0.0 {
        return Err(Error::Config {
            field: "collapse.reference".into(),
            reason: "reference set has zero spread".into(),
        });
    }
    Ok(collapse_score(genset)? / r)
}

/// Chamfer distance between the embedded genset and the union expert pool.
pub fn chamfer_to_expert(genset: &[Tensor], stats: &ModeStats) -> Result<f64> {
    let gens: Vec<Vec<f64>> = genset.iter().map(embed).collect::<Result<_>>()?;
    let pool: Vec<Vec<f64>> = stats.union_pool().into_iter().cloned().collect();
    chamfer_distance(&gens, &pool)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InferenceTiming {
    pub median_ms: f64,
    pub nfe: f64,
    pub hz: f64,
}

/// Times `plan` (which returns the NFE it spent) over `repeats` calls.
pub fn measure_inference(
    repeats: usize,
    mut plan: impl FnMut() -> Result<u64>,
) -> Result<InferenceTiming> {
    if repeats == 0 {
        return Err(Error::EmptySet("measure_inference"));
    }
    let mut times = Vec::with_capacity(repeats);
    let mut nfe_total = 0u64;
    for _ in 0..repeats {
        let t0 = Instant::now();
        nfe_total += plan()?;
        times.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let median_ms = if times.len() % 2 == 1 {
        times[times.len() / 2]
    } else {
        0.5 * (times[times.len() / 2 - 1] + times[times.len() / 2])
    };
    Ok(InferenceTiming {
        median_ms,
        nfe: nfe_total as f64 / repeats as f64,
        hz: 1000.0 / median_ms,
    })
}

/// Mean plus a percentile-bootstrap 95% CI (deterministic per seed).
pub fn bootstrap_mean_ci(values: &[f64], resamples: usize, seed: u64) -> Result<Aggregate> {
    use rand::Rng;
    if values.is_empty() {
        return Err(Error::EmptySet("bootstrap_mean_ci"));
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let mut rng = rng_for(seed, &[tag("bootstrap")]);
    let mut means = Vec::with_capacity(resamples);
    for _ in 0..resamples {
        let s: f64 = (0..values.len())
            .map(|_| values[rng.gen_range(0..values.len())])
            .sum();
        means.push(s / values.len() as f64);
    }
    let lo = percentile(means.clone(), 0.025);
    let hi = percentile(means, 0.975);
    Ok(Aggregate { mean, lo, hi })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub lo: f64,
    pub hi: f64,
}

/// Per-observation metric row of an evaluation run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObsRow {
    pub obs: usize,
    pub coverage: f64,
    pub fidelity: f64,
    pub collapse_raw: f64,
    pub collapse_norm: f64,
    pub chamfer_to_expert: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ObsRow>,
    pub coverage: Aggregate,
    pub fidelity: Aggregate,
    pub collapse_norm: Aggregate,
    pub chamfer: Aggregate,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub timing: Option<InferenceTiming>,
}

impl EvalReport {
    pub fn from_rows(rows: Vec<ObsRow>, seed: u64) -> Result<Self> {
        let col = |f: fn(&ObsRow) -> f64| -> Vec<f64> { rows.iter().map(f).collect() };
        Ok(Self {
            coverage: bootstrap_mean_ci(&col(|r| r.coverage), BOOTSTRAP_RESAMPLES, seed)?,
            fidelity: bootstrap_mean_ci(&col(|r| r.fidelity), BOOTSTRAP_RESAMPLES, seed + 1)?,
            collapse_norm: bootstrap_mean_ci(&col(|r| r.collapse_norm), BOOTSTRAP_RESAMPLES, seed + 2)?,
            chamfer: bootstrap_mean_ci(&col(|r| r.chamfer_to_expert), BOOTSTRAP_RESAMPLES, seed + 3)?,
            timing: None,
            rows,
        })
    }

    /// One row per observation; columns documented in docs/metrics.md.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let rows: Vec<Vec<f64>> = self
            .rows
            .iter()
            .map(|r| {
                vec![r.obs as f64, r.coverage, r.fidelity, r.collapse_raw, r.collapse_norm, r.chamfer_to_expert]
            })
            .collect();
        write_csv(
            path,
            &["obs", "coverage", "fidelity", "collapse_raw", "collapse_norm", "chamfer_to_expert"],
            &rows,
        )
    }

    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s.as_bytes())?;
        Ok(())
    }
}
