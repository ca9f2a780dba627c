//! Joint teacher + encoder training.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Distribution;

use crate::cfm::loss::{cfm_loss, mask_probability, BatchItem};
use crate::cfm::{interpolate_path, sample_tau0, Demo, FlowSchedule};
use crate::diffcore::{
    load_checkpoint, save_checkpoint, AdamConfig, AdamState, Graph, Tensor,
};
use crate::encoder::{EncoderDims, ObsEncoder, RawObservation};
use crate::error::{Error, Result};
use crate::nets::{NetDims, TeacherNet};
use crate::rng::{rng_for, tag};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub schedule: FlowSchedule,
    pub mask: bool,
    /// Std of raster noise injected into one modality at a time.
    pub aug_noise: f64,
    /// Per-modality probability of injecting that noise.
    pub aug_prob: f64,
    pub early_stop_patience: usize,
    pub early_stop_rel: f64,
    /// Targets are divided by this before entering the flow.
    pub action_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 16,
            lr: 2e-3,
            lr_min: 2e-4,
            schedule: FlowSchedule::default(),
            mask: true,
            aug_noise: 0.05,
            aug_prob: 0.3,
            early_stop_patience: 10,
            early_stop_rel: 1e-3,
            action_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Teacher network plus the encoder it was trained with; they share one
/// checkpoint file (encoder names carry the `enc.` prefix).
pub struct TeacherBundle {
    pub teacher: TeacherNet,
    pub encoder: ObsEncoder,
}

impl TeacherBundle {
    pub fn new(nd: NetDims, ed: EncoderDims, seed: u64, precision: crate::diffcore::Precision) -> Result<Self> {
        if nd.obs_dim != ed.obs_dim() {
            return Err(Error::Config {
                field: "dims.obs_dim".to_string(),
                reason: format!("teacher expects {}, encoder produces {}", nd.obs_dim, ed.obs_dim()),
            });
        }
        Ok(Self {
            teacher: TeacherNet::new(nd, crate::rng::derive_seed(seed, &[tag("teacher")]), precision)?,
            encoder: ObsEncoder::new(ed, crate::rng::derive_seed(seed, &[tag("encoder")]), precision)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut all = self.teacher.params().map().clone();
        all.extend(self.encoder.params().map().clone());
        save_checkpoint(path, &all)
    }

    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let all = load_checkpoint(path)?;
        let (mut enc, mut tch) = (BTreeMap::new(), BTreeMap::new());
        for (name, t) in all {
            if name.starts_with("enc.") {
                enc.insert(name, t);
            } else {
                tch.insert(name, t);
            }
        }
        self.teacher.params_mut().load(tch)?;
        self.encoder.params_mut().load(enc)
    }

    /// Embeds an observation with the bundled encoder.
    pub fn embed(&self, obs: &RawObservation) -> Result<Tensor> {
        Ok(self.encoder.encode(obs)?.0)
    }
}

fn add_raster_noise<R: Rng>(raster: &mut [f64], std: f64, rng: &mut R) {
    let dist = rand_distr::Normal::new(0.0, std).unwrap();
    for x in raster.iter_mut() {
        *x += dist.sample(rng);
    }
}

/// Runs the CFM objective over `demos`, updating the bundle in place.
/// Deterministic in `(bundle seeds, demos, cfg, seed)`.
pub fn train_teacher(
    bundle: &mut TeacherBundle,
    demos: &[Demo],
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    if demos.is_empty() {
        return Err(Error::EmptySet("train_teacher"));
    }
    let precision = bundle.teacher.params().precision();
    let (h, a) = (bundle.teacher.dims().horizon, bundle.teacher.dims().action_dim);

    // Normalize targets once.
    let scale = 1.0 / cfg.action_scale;
    let targets: Vec<Tensor> = demos
        .iter()
        .map(|d| {
            let data: Vec<f64> = d.target.data().iter().map(|x| x * scale).collect();
            Tensor::new(vec![h, a], data, precision)
        })
        .collect::<Result<_>>()?;

    // Pull every parameter into one map for joint optimization.
    let mut all: BTreeMap<String, Tensor> = BTreeMap::new();
    all.append(bundle.teacher.params_mut().map_mut());
    all.append(bundle.encoder.params_mut().map_mut());

    let result = train_loop(bundle, demos, &targets, cfg, seed, &mut all, &mut on_epoch);

    // Hand parameters back to their owners whatever happened.
    for (name, t) in all {
        let owner = if name.starts_with("enc.") {
            bundle.encoder.params_mut().map_mut()
        } else {
            bundle.teacher.params_mut().map_mut()
        };
        owner.insert(name, t);
    }
    result
}

fn train_loop(
    bundle: &TeacherBundle,
    demos: &[Demo],
    targets: &[Tensor],
    cfg: &TrainConfig,
    seed: u64,
    all: &mut BTreeMap<String, Tensor>,
    on_epoch: &mut impl FnMut(&EpochStats),
) -> Result<Vec<EpochStats>> {
    let precision = bundle.teacher.params().precision();
    let (h, a) = (bundle.teacher.dims().horizon, bundle.teacher.dims().action_dim);
    let mut adam = AdamState::new(AdamConfig { lr: cfg.lr, ..Default::default() });
    let mut stats = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg, epoch);
        adam.set_lr(lr);
        let mut rng = rng_for(seed, &[tag("teacher-train"), epoch as u64]);
        let mut order: Vec<usize> = (0..demos.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut items = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let t = cfg.schedule.sample_time(&mut rng);
                let tau0 = sample_tau0(&mut rng, h, a, precision);
                let masked = cfg.mask && rng.gen_bool(mask_probability(t));
                let mut obs = demos[i].obs.clone();
                if cfg.aug_noise > 0.0 {
                    if rng.gen_bool(cfg.aug_prob) {
                        add_raster_noise(&mut obs.rgb, cfg.aug_noise, &mut rng);
                    }
                    if rng.gen_bool(cfg.aug_prob) {
                        add_raster_noise(&mut obs.depth, cfg.aug_noise, &mut rng);
                    }
                }
                let tau_t = interpolate_path(&tau0, &targets[i], t)?;
                items.push(BatchItem { obs, tau_t, t, masked, target: targets[i].clone() });
            }
            let mut g = Graph::new(precision);
            let mut ids = BTreeMap::new();
            for (name, tsr) in all.iter() {
                ids.insert(name.clone(), g.param(name, tsr)?);
            }
            let loss = cfm_loss(&mut g, &ids, &bundle.teacher, &bundle.encoder, &items)
                .map_err(|e| diverged(e, epoch, step))?;
            let loss_val = g.value(loss).scalar_value().unwrap();
            if !loss_val.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            let grads = g.backward(loss).map_err(|e| diverged(e, epoch, step))?;
            adam.step(all, &grads)?;
            epoch_loss += loss_val;
            steps += 1;
        }

        let stat = EpochStats { epoch, loss: epoch_loss / steps as f64, lr };
        on_epoch(&stat);
        stats.push(stat.clone());

        // plateau-based early stop; never wall-clock, so runs stay reproducible
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

fn cosine_lr(cfg: &TrainConfig, epoch: usize) -> f64 {
    if cfg.epochs <= 1 {
        return cfg.lr;
    }
    let phase = epoch as f64 / (cfg.epochs - 1) as f64;
    cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + (std::f64::consts::PI * phase).cos())
}

fn diverged(e: Error, epoch: usize, step: usize) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Diverged { epoch, step },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{bit_equal, Precision};
    use crate::nets::NetDims;

    fn tiny_bundle(seed: u64) -> TeacherBundle {
        let ed = crate::encoder::tests::tiny_dims();
        let nd = NetDims {
            horizon: 8,
            action_dim: 2,
            c1: 4,
            c2: 6,
            obs_dim: ed.obs_dim(),
            time_dim: 6,
        };
        TeacherBundle::new(nd, ed, seed, Precision::Standard32).unwrap()
    }

    fn tiny_demos(n: usize) -> Vec<Demo> {
        let ed = crate::encoder::tests::tiny_dims();
        (0..n)
            .map(|i| {
                let obs = crate::encoder::tests::random_obs(&ed, 100 + i as u64);
                // target: straight line toward a per-demo corner
                let sgn = if i % 2 == 0 { 1.0 } else { -1.0 };
                let data: Vec<f64> = (0..8)
                    .flat_map(|k| {
                        let s = (k + 1) as f64 / 8.0;
                        [s * sgn, 0.5 * s]
                    })
                    .collect();
                Demo {
                    obs,
                    target: Tensor::new(vec![8, 2], data, Precision::Standard32).unwrap(),
                }
            })
            .collect()
    }

    #[test]
    fn loss_drops_and_training_is_deterministic() {
        let cfg = TrainConfig {
            epochs: 8,
            batch_size: 4,
            lr: 3e-3,
            lr_min: 1e-3,
            aug_noise: 0.02,
            early_stop_patience: 50,
            ..Default::default()
        };
        let demos = tiny_demos(8);
        let mut b1 = tiny_bundle(7);
        let s1 = train_teacher(&mut b1, &demos, &cfg, 13, |_| {}).unwrap();
        assert!(
            s1.last().unwrap().loss < s1[0].loss,
            "loss did not drop: {} → {}",
            s1[0].loss,
            s1.last().unwrap().loss
        );
        let mut b2 = tiny_bundle(7);
        let s2 = train_teacher(&mut b2, &demos, &cfg, 13, |_| {}).unwrap();
        assert_eq!(s1.len(), s2.len());
        for (x, y) in s1.iter().zip(&s2) {
            assert_eq!(x.loss.to_bits(), y.loss.to_bits(), "epoch {} loss drift", x.epoch);
        }
        for name in b1.teacher.params().names() {
            assert!(bit_equal(
                b1.teacher.params().get(&name).unwrap(),
                b2.teacher.params().get(&name).unwrap()
            ));
        }
    }

    #[test]
    fn early_stop_kicks_in_on_plateau() {
        // demanding a 99% drop per epoch ⇒ every epoch after the first is
        // "stale" ⇒ stop after 1 + patience epochs
        let cfg = TrainConfig {
            epochs: 50,
            batch_size: 4,
            lr: 0.0,
            lr_min: 0.0,
            early_stop_patience: 3,
            early_stop_rel: 0.99,
            ..Default::default()
        };
        let demos = tiny_demos(4);
        let mut b = tiny_bundle(3);
        let stats = train_teacher(&mut b, &demos, &cfg, 5, |_| {}).unwrap();
        assert_eq!(stats.len(), 4);
    }

    #[test]
    fn bundle_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("teacher.fdck");
        let b = tiny_bundle(21);
        b.save(&path).unwrap();
        let mut b2 = tiny_bundle(99);
        b2.load_into(&path).unwrap();
        for name in b.teacher.params().names() {
            assert!(bit_equal(
                b.teacher.params().get(&name).unwrap(),
                b2.teacher.params().get(&name).unwrap()
            ));
        }
        for name in b.encoder.params().names() {
            assert!(bit_equal(
                b.encoder.params().get(&name).unwrap(),
                b2.encoder.params().get(&name).unwrap()
            ));
        }
    }

    #[test]
    fn empty_demo_set_rejected() {
        let mut b = tiny_bundle(1);
        let cfg = TrainConfig::default();
        assert!(matches!(
            train_teacher(&mut b, &[], &cfg, 1, |_| {}),
            Err(Error::EmptySet(_))
        ));
    }
}
