//! Teacher sample-set generation for distillation.
//!
//! Each observation gets its own latent streams keyed by (seed, obs index,
//! sample index), so a dataset built with a larger K contains any smaller-K
//! dataset as an exact prefix.

use rand_chacha::ChaCha8Rng;

use crate::cfm::{sample_ode, OdeMethod, TeacherBundle};
use crate::diffcore::Tensor;
use crate::encoder::RawObservation;
use crate::error::{Error, Result};
use crate::io::{EmbeddingFile, TrajSetFile};
use crate::nets::gaussian_tensor;
use crate::rng::{derive_seed, tag};

#[derive(Debug, Clone, Copy)]
pub struct DatasetConfig {
    /// Teacher samples per observation.
    pub k: usize,
    pub n_steps: usize,
    pub method: OdeMethod,
    pub action_scale: f64,
}

/// Latent stream for one (observation, sample) slot.
pub fn sample_rng(seed: u64, obs_idx: usize, k_idx: usize) -> ChaCha8Rng {
    use rand::SeedableRng;
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[tag("distill-z"), obs_idx as u64, k_idx as u64]))
}

/// Runs the teacher over every observation, K samples each. Returns the
/// trajectory sets (task units) and the frozen embeddings.
pub fn build_distill_dataset(
    bundle: &TeacherBundle,
    observations: &[RawObservation],
    cfg: &DatasetConfig,
    seed: u64,
    mut on_obs: impl FnMut(usize, usize),
) -> Result<(TrajSetFile, EmbeddingFile)> {
    if observations.is_empty() {
        return Err(Error::EmptySet("build_distill_dataset"));
    }
    if cfg.k == 0 {
        return Err(Error::Config {
            field: "k".to_string(),
            reason: "need at least one sample per observation".to_string(),
        });
    }
    let dims = *bundle.teacher.dims();
    let precision = bundle.teacher.params().precision();
    let mut sets = Vec::with_capacity(observations.len());
    let mut rows = Vec::with_capacity(observations.len());
    for (i, obs) in observations.iter().enumerate() {
        let e_obs = bundle.embed(obs)?;
        let mut set = Vec::with_capacity(cfg.k);
        for k in 0..cfg.k {
            let mut rng = sample_rng(seed, i, k);
            let z = gaussian_tensor(&mut rng, &[dims.horizon, dims.action_dim], precision);
            let traj = sample_ode(&bundle.teacher, &z, &e_obs, cfg.n_steps, cfg.method)?;
            set.push(traj.data().iter().map(|x| x * cfg.action_scale).collect());
        }
        sets.push(set);
        rows.push(e_obs.data().to_vec());
        on_obs(i + 1, observations.len());
    }
    let dim = rows[0].len();
    Ok((
        TrajSetFile { k: cfg.k, horizon: dims.horizon, dim: dims.action_dim, sets },
        EmbeddingFile { dim, rows },
    ))
}

/// Pairs a trajectory-set file with its embeddings as in-memory items.
pub fn dataset_items(
    trajs: &TrajSetFile,
    embeds: &EmbeddingFile,
    precision: crate::diffcore::Precision,
) -> Result<Vec<super::DistillItem>> {
    if trajs.sets.len() != embeds.rows.len() {
        return Err(Error::Format {
            format: "TSET",
            reason: format!(
                "{} trajectory sets but {} embeddings",
                trajs.sets.len(),
                embeds.rows.len()
            ),
        });
    }
    trajs
        .sets
        .iter()
        .zip(&embeds.rows)
        .map(|(set, row)| {
            let e_obs = Tensor::new(vec![1, row.len()], row.clone(), precision)?;
            let targets = set
                .iter()
                .map(|t| Tensor::new(vec![trajs.horizon, trajs.dim], t.clone(), precision))
                .collect::<Result<_>>()?;
            Ok(super::DistillItem { e_obs, targets })
        })
        .collect()
}
