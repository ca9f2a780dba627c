//! The artifact pipeline behind the CLI. Every stage reads its upstream
//! files from the run directory, writes its own, and records content
//! hashes in `manifest.json` so whole runs can be verified and compared.

use std::path::{Path, PathBuf};
use std::time::SystemTime;

use serde::{Deserialize, Serialize};

use crate::cfm::{train_teacher, Demo, TeacherBundle};
use crate::config::{ExperimentConfig, LatencyMode};
use crate::diffcore::{load_checkpoint, save_checkpoint};
use crate::distill::{dataset_items, imle_train_student, student_sample_set, build_distill_dataset};
use crate::encoder::RawObservation;
use crate::error::{Error, Result};
use crate::io::{hash_file, EmbeddingFile, ObservationFile, TrajSetFile};
use crate::io::write_csv;
use crate::metrics::{
    chamfer_to_expert, collapse_score, fidelity_at_delta, measure_inference, mode_coverage,
    normalized_collapse, EvalReport, ModeStats, ObsRow,
};
use crate::nets::StudentNet;
use crate::rng::{derive_seed, rng_for, tag};
use crate::simloop::{
    run_episodes, speed_monotone_violations, sweep_dynamics, BatchStats, EpisodeResult,
    LatencyModel, OraclePolicy, Policy, RolloutConfig, StudentPolicy, SweepRow, TeacherPolicy,
};
use crate::tasks::{render_observation, sample_scene, sample_expert_demo, Scene, TaskKind};
use crate::diffcore::Tensor;

/// Wall-clock repeats for latency measurement inside `simulate`.
const MEASURE_REPEATS: usize = 25;
/// Distillation set sizes swept by `ablate`.
pub const ABLATE_KS: [usize; 4] = [1, 4, 10, 16];
/// Replan intervals swept by `ablate`.
pub const ABLATE_TES: [usize; 5] = [2, 4, 8, 16, 32];

/// Numeric policy ids used in CSV artifacts (see docs/metrics.md).
pub const POLICY_IDS: [(usize, &str); 3] = [(0, "oracle"), (1, "teacher"), (2, "student")];

// ── artifact layout ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct RunPaths {
    pub dir: PathBuf,
}

macro_rules! artifact {
    ($fn:ident, $name:expr) => {
        pub fn $fn(&self) -> PathBuf {
            self.dir.join($name)
        }
    };
}

impl RunPaths {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    artifact!(config, "config.json");
    artifact!(demos, "demos.tset");
    artifact!(demo_obs, "demos.robs");
    artifact!(demo_meta, "demos.meta.json");
    artifact!(holdout, "holdout.json");
    artifact!(teacher, "teacher.ckpt");
    artifact!(teacher_log, "teacher_train.json");
    artifact!(tsets, "teacher_sets.tset");
    artifact!(embeds, "holdout.eobs");
    artifact!(student, "student.ckpt");
    artifact!(student_log, "student_train.json");
    artifact!(eval_teacher_csv, "eval_teacher.csv");
    artifact!(eval_teacher_json, "eval_teacher.json");
    artifact!(eval_student_csv, "eval_student.csv");
    artifact!(eval_student_json, "eval_student.json");
    artifact!(episodes_csv, "episodes.csv");
    artifact!(sweep_csv, "sweep.csv");
    artifact!(sim_summary, "summary.json");
    artifact!(speed_csv, "speed.csv");
    artifact!(ablate_k_csv, "ablate_k.csv");
    artifact!(ablate_te_csv, "ablate_te.csv");
    artifact!(manifest, "manifest.json");
}

// ── run manifest ─────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub cmd: String,
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
    /// Timing artifacts are exempt from cross-run determinism.
    pub timing: bool,
    /// Unix seconds when the entry was recorded.
    pub timestamp: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_sha256: String,
    pub entries: Vec<ManifestEntry>,
}

impl RunManifest {
    pub fn new(config_sha256: String) -> Self {
        Self {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256,
            entries: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        f.lock_shared()?;
        let m = serde_json::from_reader(&f)?;
        f.unlock()?;
        Ok(m)
    }

    /// Writes the whole manifest under an exclusive lock.
    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        f.lock()?;
        serde_json::to_writer_pretty(&f, self)?;
        f.unlock()?;
        Ok(())
    }

    /// Hashes `rel` under the run dir and records it, replacing any previous
    /// entry for the same path.
    pub fn record(&mut self, dir: &Path, cmd: &str, rel: &str, timing: bool) -> Result<()> {
        let full = dir.join(rel);
        let entry = ManifestEntry {
            cmd: cmd.to_string(),
            path: rel.to_string(),
            sha256: hash_file(&full)?,
            bytes: std::fs::metadata(&full)?.len(),
            timing,
            timestamp: SystemTime::now()
                .duration_since(SystemTime::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        };
        match self.entries.iter_mut().find(|e| e.path == rel) {
            Some(slot) => *slot = entry,
            None => self.entries.push(entry),
        }
        Ok(())
    }

    /// Digest over the sorted (path, hash) pairs of non-timing entries; two
    /// runs with equal signatures produced byte-identical artifacts.
    pub fn content_signature(&self) -> String {
        let mut lines: Vec<String> = self
            .entries
            .iter()
            .filter(|e| !e.timing)
            .map(|e| format!("{} {}\n", e.path, e.sha256))
            .collect();
        lines.sort();
        crate::io::sha256_hex(lines.concat().as_bytes())
    }

    /// Checks that every recorded artifact is still present and unmodified.
    pub fn verify(&self, dir: &Path) -> Result<()> {
        for e in &self.entries {
            let full = dir.join(&e.path);
            if !full.exists() {
                return Err(Error::MissingArtifact {
                    path: e.path.clone(),
                    producer: e.cmd.clone(),
                });
            }
            let h = hash_file(&full)?;
            if h != e.sha256 {
                return Err(Error::HashMismatch {
                    path: e.path.clone(),
                    expected: e.sha256.clone(),
                    actual: h,
                });
            }
        }
        Ok(())
    }
}

// ── the pipeline ─────────────────────────────────────────────────────

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub paths: RunPaths,
    pub manifest: RunManifest,
}

impl Pipeline {
    /// Binds a config to a run directory, picking up the existing manifest.
    /// A manifest written under a different config is refused.
    pub fn new(cfg: ExperimentConfig, out_dir: impl Into<PathBuf>) -> Result<Self> {
        let paths = RunPaths::new(out_dir);
        let sha = cfg.sha256();
        let manifest = if paths.manifest().exists() {
            let m = RunManifest::load(&paths.manifest())?;
            if m.config_sha256 != sha {
                return Err(Error::Config {
                    field: "config".to_string(),
                    reason: format!(
                        "run dir {} was produced with a different config; use a fresh --out or gen-data --force",
                        paths.dir.display()
                    ),
                });
            }
            m
        } else {
            RunManifest::new(sha)
        };
        Ok(Self { cfg, paths, manifest })
    }

    fn need(&self, path: &Path, producer: &str) -> Result<()> {
        if !path.exists() {
            return Err(Error::MissingArtifact {
                path: path.display().to_string(),
                producer: producer.to_string(),
            });
        }
        Ok(())
    }

    fn commit(&mut self, cmd: &str, files: &[(&Path, bool)]) -> Result<()> {
        for (path, timing) in files {
            let rel = path
                .strip_prefix(&self.paths.dir)
                .unwrap_or(path)
                .to_string_lossy()
                .into_owned();
            self.manifest.record(&self.paths.dir, cmd, &rel, *timing)?;
        }
        self.manifest.save(&self.paths.manifest())
    }

    fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(value)?;
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    // ── gen-data ─────────────────────────────────────────────────────

    /// Expert demo corpus plus held-out evaluation scenes.
    pub fn gen_data(&mut self, force: bool) -> Result<()> {
        let dir = self.paths.dir.clone();
        if dir.exists() && dir.read_dir()?.next().is_some() {
            if !force {
                return Err(Error::OutputNotEmpty(dir.display().to_string()));
            }
            std::fs::remove_dir_all(&dir)?;
            self.manifest = RunManifest::new(self.cfg.sha256());
        }
        std::fs::create_dir_all(&dir)?;
        std::fs::write(self.paths.config(), self.cfg.canonical_json())?;

        let task = &self.cfg.task;
        let ed = &self.cfg.network.encoder;
        let mut rng = rng_for(self.cfg.seed, &[tag("gen-data")]);
        let n = self.cfg.data.n_demos;
        let mut sets = Vec::with_capacity(n);
        let mut observations = Vec::with_capacity(n);
        let mut mode_counts = vec![0usize; task.modes()];
        for _ in 0..n {
            let d = sample_expert_demo(task, ed, &mut rng)?;
            sets.push(vec![d.traj.data().to_vec()]);
            observations.push(d.obs);
            mode_counts[d.mode] += 1;
        }
        TrajSetFile { k: 1, horizon: task.horizon, dim: 2, sets }.save(&self.paths.demos())?;
        ObservationFile {
            raster: ed.raster,
            n_points: ed.n_points,
            state_dim: ed.state_dim,
            observations,
        }
        .save(&self.paths.demo_obs())?;

        let mut hrng = rng_for(self.cfg.seed, &[tag("holdout")]);
        let scenes: Vec<Scene> =
            (0..self.cfg.data.n_holdout).map(|_| sample_scene(task, &mut hrng)).collect();
        Self::write_json(&self.paths.holdout(), &scenes)?;
        Self::write_json(
            &self.paths.demo_meta(),
            &serde_json::json!({
                "n_demos": n,
                "n_holdout": scenes.len(),
                "horizon": task.horizon,
                "mode_counts": mode_counts,
                "seed": self.cfg.seed,
            }),
        )?;

        eprintln!("gen-data: {n} demos, {} holdout scenes → {}", scenes.len(), dir.display());
        self.commit(
            "gen-data",
            &[
                (&self.paths.config(), false),
                (&self.paths.demos(), false),
                (&self.paths.demo_obs(), false),
                (&self.paths.demo_meta(), false),
                (&self.paths.holdout(), false),
            ],
        )
    }

    // ── train-teacher ────────────────────────────────────────────────

    pub fn train_teacher(&mut self) -> Result<()> {
        self.need(&self.paths.demos(), "gen-data")?;
        self.need(&self.paths.demo_obs(), "gen-data")?;
        let trajs = TrajSetFile::load(&self.paths.demos())?;
        let obs = ObservationFile::load(&self.paths.demo_obs())?;
        if trajs.sets.len() != obs.observations.len() {
            return Err(Error::Format {
                format: "TSET",
                reason: format!(
                    "{} demos but {} observations",
                    trajs.sets.len(),
                    obs.observations.len()
                ),
            });
        }
        let precision = self.cfg.network.precision;
        let demos: Vec<Demo> = trajs
            .sets
            .iter()
            .zip(obs.observations)
            .map(|(set, o)| {
                Ok(Demo {
                    obs: o,
                    target: Tensor::new(
                        vec![trajs.horizon, trajs.dim],
                        set[0].clone(),
                        precision,
                    )?,
                })
            })
            .collect::<Result<_>>()?;

        let mut bundle = self.fresh_bundle()?;
        let t0 = std::time::Instant::now();
        let stats = train_teacher(
            &mut bundle,
            &demos,
            &self.cfg.cfm.train_config(),
            derive_seed(self.cfg.seed, &[tag("teacher-train")]),
            |s| {
                if s.epoch % 5 == 0 {
                    eprintln!("train-teacher: epoch {:3}  loss {:.5}  lr {:.2e}", s.epoch, s.loss, s.lr);
                }
            },
        )?;
        eprintln!(
            "train-teacher: {} epochs in {:.1}s, final loss {:.5}",
            stats.len(),
            t0.elapsed().as_secs_f64(),
            stats.last().map(|s| s.loss).unwrap_or(f64::NAN)
        );
        bundle.save(&self.paths.teacher())?;
        Self::write_json(&self.paths.teacher_log(), &stats)?;
        self.commit(
            "train-teacher",
            &[(&self.paths.teacher(), false), (&self.paths.teacher_log(), false)],
        )
    }

    fn fresh_bundle(&self) -> Result<TeacherBundle> {
        TeacherBundle::new(
            self.cfg.network.dims,
            self.cfg.network.encoder,
            derive_seed(self.cfg.seed, &[tag("teacher-init")]),
            self.cfg.network.precision,
        )
    }

    pub fn load_bundle(&self) -> Result<TeacherBundle> {
        self.need(&self.paths.teacher(), "train-teacher")?;
        let mut b = self.fresh_bundle()?;
        b.load_into(&self.paths.teacher())?;
        Ok(b)
    }

    pub fn load_student(&self) -> Result<StudentNet> {
        self.need(&self.paths.student(), "distill")?;
        let mut s = StudentNet::new(
            self.cfg.network.dims,
            derive_seed(self.cfg.seed, &[tag("student-init")]),
            self.cfg.network.precision,
        )?;
        s.params_mut().load(load_checkpoint(&self.paths.student())?)?;
        Ok(s)
    }

    pub fn load_holdout(&self) -> Result<Vec<Scene>> {
        self.need(&self.paths.holdout(), "gen-data")?;
        Ok(serde_json::from_str(&std::fs::read_to_string(self.paths.holdout())?)?)
    }

    fn render_scenes(&self, scenes: &[Scene]) -> Vec<RawObservation> {
        scenes
            .iter()
            .map(|s| render_observation(&self.cfg.task, &self.cfg.network.encoder, s))
            .collect()
    }

    // ── sample-teacher ───────────────────────────────────────────────

    /// Teacher sample sets over the holdout scenes: the distillation corpus.
    pub fn sample_teacher(&mut self) -> Result<()> {
        let bundle = self.load_bundle()?;
        let scenes = self.load_holdout()?;
        let observations = self.render_scenes(&scenes);
        let t0 = std::time::Instant::now();
        let n = observations.len();
        let (tsets, embeds) = build_distill_dataset(
            &bundle,
            &observations,
            &self.cfg.cfm.dataset_config(),
            derive_seed(self.cfg.seed, &[tag("sample-teacher")]),
            |i, total| {
                if (i + 1) % 50 == 0 || i + 1 == total {
                    eprintln!("sample-teacher: obs {}/{}", i + 1, total);
                }
            },
        )?;
        eprintln!(
            "sample-teacher: {} sets of K={} in {:.1}s",
            n,
            tsets.k,
            t0.elapsed().as_secs_f64()
        );
        tsets.save(&self.paths.tsets())?;
        embeds.save(&self.paths.embeds())?;
        self.commit(
            "sample-teacher",
            &[(&self.paths.tsets(), false), (&self.paths.embeds(), false)],
        )
    }

    // ── distill ──────────────────────────────────────────────────────

    pub fn distill(&mut self) -> Result<()> {
        self.need(&self.paths.tsets(), "sample-teacher")?;
        self.need(&self.paths.embeds(), "sample-teacher")?;
        let bundle = self.load_bundle()?;
        let trajs = TrajSetFile::load(&self.paths.tsets())?;
        let embeds = EmbeddingFile::load(&self.paths.embeds())?;
        let precision = self.cfg.network.precision;
        let items = dataset_items(&trajs, &embeds, precision)?;

        let mut student = StudentNet::new(
            self.cfg.network.dims,
            derive_seed(self.cfg.seed, &[tag("student-init")]),
            precision,
        )?;
        student.init_from_teacher(&bundle.teacher)?;
        let t0 = std::time::Instant::now();
        let stats = imle_train_student(
            &mut student,
            &items,
            &self.cfg.distill.distill_config(self.cfg.cfm.action_scale),
            derive_seed(self.cfg.seed, &[tag("distill-train")]),
            |s| {
                if s.epoch % 10 == 0 {
                    eprintln!("distill: epoch {:3}  loss {:.5}  lr {:.2e}", s.epoch, s.loss, s.lr);
                }
            },
        )?;
        eprintln!(
            "distill: {} epochs in {:.1}s, final loss {:.5}",
            stats.len(),
            t0.elapsed().as_secs_f64(),
            stats.last().map(|s| s.loss).unwrap_or(f64::NAN)
        );
        save_checkpoint(&self.paths.student(), student.params().map())?;
        Self::write_json(&self.paths.student_log(), &stats)?;
        self.commit(
            "distill",
            &[(&self.paths.student(), false), (&self.paths.student_log(), false)],
        )
    }

    // ── eval ─────────────────────────────────────────────────────────

    /// Set-level metrics for teacher and student over the holdout scenes.
    /// The teacher's sample sets double as the collapse reference, so its
    /// own normalized collapse is 1 by construction.
    pub fn eval(&mut self) -> Result<()> {
        self.need(&self.paths.tsets(), "sample-teacher")?;
        self.need(&self.paths.embeds(), "sample-teacher")?;
        let student = self.load_student()?;
        let scenes = self.load_holdout()?;
        let trajs = TrajSetFile::load(&self.paths.tsets())?;
        let embeds = EmbeddingFile::load(&self.paths.embeds())?;
        let precision = self.cfg.network.precision;
        let h = self.cfg.task.horizon;
        let seed = self.cfg.seed;

        let mut trows = Vec::with_capacity(scenes.len());
        let mut srows = Vec::with_capacity(scenes.len());
        for (i, scene) in scenes.iter().enumerate() {
            let stats = ModeStats::build(
                &self.cfg.task,
                scene,
                derive_seed(seed, &[tag("eval-pools"), i as u64]),
            )?;
            let tset: Vec<Tensor> = trajs.sets[i]
                .iter()
                .map(|v| Tensor::new(vec![h, 2], v.clone(), precision))
                .collect::<Result<_>>()?;
            let e = Tensor::new(vec![1, embeds.dim], embeds.rows[i].clone(), precision)?;
            let mut rng = rng_for(seed, &[tag("eval-student"), i as u64]);
            let sset = student_sample_set(
                &student,
                &e,
                self.cfg.distill.k,
                self.cfg.cfm.action_scale,
                &mut rng,
            )?;
            trows.push(obs_row(i, &tset, &tset, &stats)?);
            srows.push(obs_row(i, &sset, &tset, &stats)?);
            if (i + 1) % 50 == 0 || i + 1 == scenes.len() {
                eprintln!("eval: obs {}/{}", i + 1, scenes.len());
            }
        }
        let teacher_report = EvalReport::from_rows(trows, derive_seed(seed, &[tag("eval-agg-t")]))?;
        let student_report = EvalReport::from_rows(srows, derive_seed(seed, &[tag("eval-agg-s")]))?;
        for (who, report) in [("teacher", &teacher_report), ("student", &student_report)] {
            eprintln!(
                "eval[{who}]: coverage {:.3}  fidelity {:.3}  collapse_norm {:.3}  chamfer {:.4}",
                report.coverage.mean, report.fidelity.mean, report.collapse_norm.mean,
                report.chamfer.mean
            );
        }
        teacher_report.write_csv(&self.paths.eval_teacher_csv())?;
        teacher_report.write_json(&self.paths.eval_teacher_json())?;
        student_report.write_csv(&self.paths.eval_student_csv())?;
        student_report.write_json(&self.paths.eval_student_json())?;
        self.commit(
            "eval",
            &[
                (&self.paths.eval_teacher_csv(), false),
                (&self.paths.eval_teacher_json(), false),
                (&self.paths.eval_student_csv(), false),
                (&self.paths.eval_student_json(), false),
            ],
        )
    }

    // ── simulate ─────────────────────────────────────────────────────

    /// Closed-loop rollouts for oracle, teacher and student. Static tasks
    /// get one batch per policy; dynamic-target tasks sweep the configured
    /// orbit speeds. Scene seeds are shared so policies face identical
    /// episodes.
    pub fn simulate(&mut self) -> Result<()> {
        let bundle = self.load_bundle()?;
        let student = self.load_student()?;
        let scenes = self.load_holdout()?;
        let cfg = &self.cfg;
        let task = cfg.task.clone();
        let ed = cfg.network.encoder;
        let seed = cfg.seed;
        let measured = cfg.simloop.latency.mode == LatencyMode::Measured;

        let mut oracle = OraclePolicy::new(derive_seed(seed, &[tag("sim-oracle")]));
        let mut teacher = TeacherPolicy::new(
            &bundle,
            cfg.cfm.n_steps,
            cfg.cfm.method,
            cfg.cfm.action_scale,
            derive_seed(seed, &[tag("sim-teacher")]),
        );
        let mut student_pi = StudentPolicy::new(
            &bundle,
            &student,
            cfg.cfm.action_scale,
            derive_seed(seed, &[tag("sim-student")]),
        );

        // Per-policy latency: the synthetic model scales with each plan's
        // NFE on its own; measured mode pins each policy to its wall-clock
        // median instead.
        let probe = render_observation(&task, &ed, &scenes[0]);
        let mut policies: Vec<(usize, &mut dyn Policy, LatencyModel)> = Vec::new();
        let base = cfg.simloop.latency.model();
        for (id, pi) in [
            (0usize, &mut oracle as &mut dyn Policy),
            (1, &mut teacher as &mut dyn Policy),
            (2, &mut student_pi as &mut dyn Policy),
        ] {
            let latency = if measured {
                let t = measure_inference(MEASURE_REPEATS, || {
                    pi.plan(&task, &probe).map(|(_, nfe)| nfe)
                })?;
                eprintln!(
                    "simulate: measured {} at {:.2} ms/plan (NFE {})",
                    pi.name(),
                    t.median_ms,
                    t.nfe
                );
                LatencyModel { ms_per_nfe: 0.0, overhead_ms: t.median_ms }
            } else {
                base
            };
            policies.push((id, pi, latency));
        }

        let episodes = cfg.simloop.episodes;
        let mut episode_rows: Vec<Vec<f64>> = Vec::new();
        let mut summary_policies = Vec::new();
        let mut sweep_rows_all: Vec<SweepRow> = Vec::new();

        if task.kind == TaskKind::DynamicTarget {
            for (id, pi, latency) in policies.iter_mut() {
                let rcfg = cfg.simloop.rollout_config(*latency);
                let name = pi.name().to_string();
                let rows = sweep_dynamics(
                    &mut [(name.as_str(), *pi)],
                    &task,
                    &ed,
                    &cfg.simloop.speeds,
                    &rcfg,
                    episodes,
                    derive_seed(seed, &[tag("sim-sweep")]),
                )?;
                for row in &rows {
                    eprintln!(
                        "simulate: {}  speed {:.2}  success {:.2}",
                        row.policy, row.speed, row.stats.success_rate
                    );
                    for (ei, ep) in row.episodes.iter().enumerate() {
                        episode_rows.push(episode_row(ei, *id, row.speed, ep));
                    }
                }
                summary_policies.push(policy_summary(*id, &name, latency, None));
                sweep_rows_all.extend(rows);
            }
        } else {
            for (id, pi, latency) in policies.iter_mut() {
                let rcfg = cfg.simloop.rollout_config(*latency);
                let name = pi.name().to_string();
                let eps = run_episodes(
                    *pi,
                    &task,
                    &ed,
                    &rcfg,
                    episodes,
                    derive_seed(seed, &[tag("sim-scenes")]),
                )?;
                let stats = BatchStats::from_results(&eps)?;
                eprintln!("simulate: {}  success {:.2}", name, stats.success_rate);
                for (ei, ep) in eps.iter().enumerate() {
                    episode_rows.push(episode_row(ei, *id, 0.0, ep));
                }
                summary_policies.push(policy_summary(*id, &name, latency, Some(stats)));
            }
        }

        write_csv(
            &self.paths.episodes_csv(),
            &["episode", "policy", "speed", "success", "replans", "sim_latency_ms"],
            &episode_rows,
        )?;

        let violations = speed_monotone_violations(&sweep_rows_all, 0.05);
        for v in &violations {
            eprintln!("simulate: warning: {v}");
        }
        let mut files: Vec<(PathBuf, bool)> =
            vec![(self.paths.episodes_csv(), measured), (self.paths.sim_summary(), measured)];
        if !sweep_rows_all.is_empty() {
            let rows: Vec<Vec<f64>> = sweep_rows_all
                .iter()
                .map(|r| {
                    vec![
                        policy_id(&r.policy) as f64,
                        r.speed,
                        r.stats.success_rate,
                        r.stats.mean_steps,
                        r.stats.mean_replans,
                        r.stats.mean_inference_ms,
                    ]
                })
                .collect();
            write_csv(
                &self.paths.sweep_csv(),
                &["policy", "speed", "success_rate", "mean_steps", "mean_replans", "mean_sim_latency_ms"],
                &rows,
            )?;
            files.push((self.paths.sweep_csv(), measured));
        }

        let summary = serde_json::json!({
            "task": task.kind,
            "hold": cfg.simloop.hold,
            "episodes_per_cell": episodes,
            "latency_mode": cfg.simloop.latency.mode,
            "policies": summary_policies,
            "sweep": sweep_rows_all.iter().map(|r| serde_json::json!({
                "policy": r.policy,
                "speed": r.speed,
                "stats": r.stats,
            })).collect::<Vec<_>>(),
            "monotonicity_warnings": violations,
        });
        Self::write_json(&self.paths.sim_summary(), &summary)?;
        let file_refs: Vec<(&Path, bool)> =
            files.iter().map(|(p, t)| (p.as_path(), *t)).collect();
        self.commit("simulate", &file_refs)
    }

    // ── speed ────────────────────────────────────────────────────────

    /// Wall-clock planning latency, teacher vs student, on one observation.
    pub fn speed(&mut self, repeats: usize) -> Result<()> {
        let bundle = self.load_bundle()?;
        let student = self.load_student()?;
        let scenes = self.load_holdout()?;
        let cfg = &self.cfg;
        let task = cfg.task.clone();
        let obs = render_observation(&task, &cfg.network.encoder, &scenes[0]);

        let mut teacher = TeacherPolicy::new(
            &bundle,
            cfg.cfm.n_steps,
            cfg.cfm.method,
            cfg.cfm.action_scale,
            derive_seed(cfg.seed, &[tag("speed-teacher")]),
        );
        let mut student_pi = StudentPolicy::new(
            &bundle,
            &student,
            cfg.cfm.action_scale,
            derive_seed(cfg.seed, &[tag("speed-student")]),
        );
        let t = measure_inference(repeats, || teacher.plan(&task, &obs).map(|(_, n)| n))?;
        let s = measure_inference(repeats, || student_pi.plan(&task, &obs).map(|(_, n)| n))?;
        eprintln!(
            "speed: teacher {:.2} ms (NFE {}), student {:.2} ms (NFE {}), speedup {:.1}×",
            t.median_ms,
            t.nfe,
            s.median_ms,
            s.nfe,
            t.median_ms / s.median_ms
        );
        write_csv(
            &self.paths.speed_csv(),
            &["policy", "repeats", "median_ms", "nfe", "hz"],
            &[
                vec![1.0, repeats as f64, t.median_ms, t.nfe, t.hz],
                vec![2.0, repeats as f64, s.median_ms, s.nfe, s.hz],
            ],
        )?;
        self.commit("speed", &[(&self.paths.speed_csv(), true)])
    }

    // ── ablate ───────────────────────────────────────────────────────

    /// Two sweeps: distillation set size K (students retrained on sliced
    /// corpora, all evaluated with the same sample count) and replan
    /// interval T_e (the distilled student in the closed loop).
    pub fn ablate(&mut self) -> Result<()> {
        self.need(&self.paths.tsets(), "sample-teacher")?;
        self.need(&self.paths.embeds(), "sample-teacher")?;
        let bundle = self.load_bundle()?;
        let scenes = self.load_holdout()?;
        let trajs = TrajSetFile::load(&self.paths.tsets())?;
        let embeds = EmbeddingFile::load(&self.paths.embeds())?;
        let cfg = &self.cfg;
        let precision = cfg.network.precision;
        let seed = cfg.seed;

        let pools: Vec<ModeStats> = scenes
            .iter()
            .enumerate()
            .map(|(i, s)| {
                ModeStats::build(&cfg.task, s, derive_seed(seed, &[tag("eval-pools"), i as u64]))
            })
            .collect::<Result<_>>()?;
        let e_rows: Vec<Tensor> = embeds
            .rows
            .iter()
            .map(|r| Tensor::new(vec![1, embeds.dim], r.clone(), precision))
            .collect::<Result<_>>()?;

        let ks: Vec<usize> = ABLATE_KS.iter().copied().filter(|k| *k <= trajs.k).collect();
        let m = cfg.distill.k;
        let mut k_rows = Vec::with_capacity(ks.len());
        for &k in &ks {
            let items = dataset_items(&trajs.truncate_k(k)?, &embeds, precision)?;
            let mut student = StudentNet::new(
                cfg.network.dims,
                derive_seed(seed, &[tag("ablate-init"), k as u64]),
                precision,
            )?;
            student.init_from_teacher(&bundle.teacher)?;
            let t0 = std::time::Instant::now();
            imle_train_student(
                &mut student,
                &items,
                &cfg.distill.distill_config(cfg.cfm.action_scale),
                derive_seed(seed, &[tag("ablate-train"), k as u64]),
                |_| {},
            )?;
            let (mut cov, mut fid, mut cham) = (0.0, 0.0, 0.0);
            for i in 0..scenes.len() {
                let mut rng = rng_for(seed, &[tag("ablate-eval"), k as u64, i as u64]);
                let set =
                    student_sample_set(&student, &e_rows[i], m, cfg.cfm.action_scale, &mut rng)?;
                cov += mode_coverage(&set, &pools[i])?;
                fid += fidelity_at_delta(&set, &pools[i])?;
                cham += chamfer_to_expert(&set, &pools[i])?;
            }
            let n = scenes.len() as f64;
            eprintln!(
                "ablate: K={k:2}  coverage {:.3}  fidelity {:.3}  ({:.1}s)",
                cov / n,
                fid / n,
                t0.elapsed().as_secs_f64()
            );
            k_rows.push(vec![k as f64, cov / n, fid / n, cham / n]);
        }
        write_csv(
            &self.paths.ablate_k_csv(),
            &["k", "coverage", "fidelity", "chamfer_to_expert"],
            &k_rows,
        )?;

        // T_e sweep always uses the synthetic latency fields so the CSV
        // stays deterministic.
        let student = self.load_student()?;
        let tes: Vec<usize> =
            ABLATE_TES.iter().copied().filter(|t| *t <= cfg.task.horizon).collect();
        let mut te_rows = Vec::with_capacity(tes.len());
        for &te in &tes {
            let rcfg = RolloutConfig {
                execute_steps: te,
                max_steps: cfg.simloop.max_steps,
                latency: cfg.simloop.latency.model(),
                hold: cfg.simloop.hold,
            };
            let mut pi = StudentPolicy::new(
                &bundle,
                &student,
                cfg.cfm.action_scale,
                derive_seed(seed, &[tag("ablate-te"), te as u64]),
            );
            let stats = crate::simloop::run_batch(
                &mut pi,
                &cfg.task,
                &cfg.network.encoder,
                &rcfg,
                cfg.simloop.episodes,
                derive_seed(seed, &[tag("ablate-te-scenes")]),
            )?;
            eprintln!("ablate: T_e={te:2}  success {:.2}", stats.success_rate);
            te_rows.push(vec![
                te as f64,
                stats.success_rate,
                stats.mean_steps,
                stats.mean_replans,
                stats.mean_inference_ms,
            ]);
        }
        write_csv(
            &self.paths.ablate_te_csv(),
            &["execute_steps", "success_rate", "mean_steps", "mean_replans", "mean_sim_latency_ms"],
            &te_rows,
        )?;
        self.commit(
            "ablate",
            &[(&self.paths.ablate_k_csv(), false), (&self.paths.ablate_te_csv(), false)],
        )
    }
}

/// Per-observation metric row; collapse needs at least two samples and is
/// reported as 0 for singleton sets.
pub fn obs_row(i: usize, genset: &[Tensor], reference: &[Tensor], stats: &ModeStats) -> Result<ObsRow> {
    let (collapse_raw, collapse_norm) = if genset.len() >= 2 && reference.len() >= 2 {
        (collapse_score(genset)?, normalized_collapse(genset, reference)?)
    } else {
        (0.0, 0.0)
    };
    Ok(ObsRow {
        obs: i,
        coverage: mode_coverage(genset, stats)?,
        fidelity: fidelity_at_delta(genset, stats)?,
        collapse_raw,
        collapse_norm,
        chamfer_to_expert: chamfer_to_expert(genset, stats)?,
    })
}

fn episode_row(episode: usize, policy: usize, speed: f64, ep: &EpisodeResult) -> Vec<f64> {
    vec![
        episode as f64,
        policy as f64,
        speed,
        if ep.success { 1.0 } else { 0.0 },
        ep.replans as f64,
        ep.inference_ms,
    ]
}

fn policy_id(name: &str) -> usize {
    POLICY_IDS.iter().find(|(_, n)| *n == name).map(|(i, _)| *i).unwrap_or(usize::MAX)
}

fn policy_summary(
    id: usize,
    name: &str,
    latency: &LatencyModel,
    stats: Option<BatchStats>,
) -> serde_json::Value {
    serde_json::json!({
        "id": id,
        "name": name,
        "latency": latency,
        "stats": stats,
    })
}
