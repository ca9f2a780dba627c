//! Set-level IMLE distillation: per observation, the student generates a set
//! from fresh latents and is pulled toward the teacher's sample set by the
//! bi-directional Chamfer loss. Matching runs on the path embedding (see
//! `path_matrix`), where distinct modes are far apart.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::cfm::EpochStats;
use crate::diffcore::{AdamConfig, AdamState, Graph, Tensor, ValueId};
use crate::distill::chamfer::{chamfer_loss, path_embed, path_matrix};
use crate::error::{Error, Result};
use crate::nets::{gaussian_tensor, StudentNet};
use crate::rng::{rng_for, tag};

/// One conditioning point: the frozen observation embedding and the teacher's
/// sample set for it (task units).
#[derive(Debug, Clone)]
pub struct DistillItem {
    pub e_obs: Tensor,
    pub targets: Vec<Tensor>,
}

#[derive(Debug, Clone)]
pub struct DistillConfig {
    pub epochs: usize,
    /// Observations per optimizer step.
    pub obs_per_step: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub early_stop_patience: usize,
    pub early_stop_rel: f64,
    /// Targets are divided by this inside the loss (same scale the teacher
    /// trained with).
    pub action_scale: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            obs_per_step: 8,
            lr: 1e-3,
            lr_min: 1e-4,
            early_stop_patience: 25,
            early_stop_rel: 1e-3,
            action_scale: 1.0,
        }
    }
}

/// Trains the student in place. Latents are redrawn every epoch; the set
/// size the student generates always matches the target set size.
pub fn imle_train_student(
    student: &mut StudentNet,
    data: &[DistillItem],
    cfg: &DistillConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    if data.is_empty() {
        return Err(Error::EmptySet("imle_train_student"));
    }
    let precision = student.params().precision();
    let (h, a) = (student.dims().horizon, student.dims().action_dim);
    let scale = 1.0 / cfg.action_scale;
    let norm_targets: Vec<Vec<Tensor>> = data
        .iter()
        .map(|item| {
            item.targets
                .iter()
                .map(|t| {
                    let d: Vec<f64> = t.data().iter().map(|x| x * scale).collect();
                    path_embed(&Tensor::new(t.shape().to_vec(), d, precision)?)
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let mut adam = AdamState::new(AdamConfig { lr: cfg.lr, ..Default::default() });
    let mut stats = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = cosine(cfg.lr, cfg.lr_min, epoch, cfg.epochs);
        adam.set_lr(lr);
        let mut rng = rng_for(seed, &[tag("imle-train"), epoch as u64]);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.obs_per_step.max(1)).enumerate() {
            let mut g = Graph::new(precision);
            let ids = student.params().register(&mut g)?;
            let lmat = g.input(&path_matrix(h, precision));
            let mut total: Option<ValueId> = None;
            for &i in chunk {
                let e = g.input(&data[i].e_obs);
                let m = norm_targets[i].len();
                let gens: Vec<ValueId> = (0..m)
                    .map(|_| {
                        let z = gaussian_tensor(&mut rng, &[h, a], precision);
                        let zi = g.input(&z);
                        let out = student.forward(&mut g, &ids, zi, e)?;
                        g.matmul(lmat, out)
                    })
                    .collect::<Result<_>>()?;
                let li = chamfer_loss(&mut g, &gens, &norm_targets[i])
                    .map_err(|e| diverged(e, epoch, step))?;
                total = Some(match total {
                    Some(acc) => g.add(acc, li)?,
                    None => li,
                });
            }
            let loss = g.scale(total.unwrap(), 1.0 / chunk.len() as f64)?;
            let loss_val = g.value(loss).scalar_value().unwrap();
            if !loss_val.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            let grads = g.backward(loss).map_err(|e| diverged(e, epoch, step))?;
            adam.step(student.params_mut().map_mut(), &grads)?;
            epoch_loss += loss_val;
            steps += 1;
        }

        let stat = EpochStats { epoch, loss: epoch_loss / steps as f64, lr };
        on_epoch(&stat);
        stats.push(stat.clone());
        if stat.loss < best * (1.0 - cfg.early_stop_rel) {
            best = stat.loss;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                break;
            }
        }
    }
    Ok(stats)
}

/// Draws `m` samples from the student for one observation (task units).
pub fn student_sample_set(
    student: &StudentNet,
    e_obs: &Tensor,
    m: usize,
    action_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Tensor>> {
    if m == 0 {
        return Err(Error::EmptySet("student_sample_set"));
    }
    let (h, a) = (student.dims().horizon, student.dims().action_dim);
    let precision = student.params().precision();
    (0..m)
        .map(|_| {
            let z = gaussian_tensor(rng, &[h, a], precision);
            let out = student.generate(&z, e_obs)?;
            let data: Vec<f64> = out.data().iter().map(|x| x * action_scale).collect();
            Tensor::new(out.shape().to_vec(), data, precision)
        })
        .collect()
}

fn cosine(lr: f64, lr_min: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return lr;
    }
    let phase = epoch as f64 / (epochs - 1) as f64;
    lr_min + 0.5 * (lr - lr_min) * (1.0 + (std::f64::consts::PI * phase).cos())
}

fn diverged(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { epoch, step },
        other => other,
    }
}
