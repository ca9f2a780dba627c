//! Latency-aware closed-loop rollouts.
//!
//! A rollout alternates plan → hold → execute: the policy plans from a
//! rendered observation, the world advances `ceil(inference_ms / (dt·1000))`
//! steps while the plan "computes" (holding position by default, or running
//! out the stale plan under [`HoldMode::ContinuePlan`]), then the first
//! `execute_steps` actions of the new plan run. Slow planners therefore act
//! on stale observations — the whole point of the simulator.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cfm::{sample_ode, OdeMethod, TeacherBundle};
use crate::diffcore::Tensor;
use crate::distill::student_sample_set;
use crate::encoder::{EncoderDims, RawObservation};
use crate::error::{Error, Result};
use crate::nets::{gaussian_tensor, StudentNet};
use crate::rng::{derive_seed, rng_for, tag};
use crate::tasks::{
    expert_plan, init_episode, is_success, nearest_progress, render_observation, sample_scene,
    step_env, Scene, TaskKind, TaskSpec, DT,
};

/// Plans H×2 position deltas (task units) from an observation; also reports
/// the NFE the call spent.
pub trait Policy {
    fn name(&self) -> &str;
    fn plan(&mut self, task: &TaskSpec, obs: &RawObservation) -> Result<(Tensor, u64)>;
}

/// Maps NFE to simulated inference milliseconds.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LatencyModel {
    pub ms_per_nfe: f64,
    pub overhead_ms: f64,
}

impl LatencyModel {
    pub const fn zero() -> Self {
        Self { ms_per_nfe: 0.0, overhead_ms: 0.0 }
    }

    /// 2 ms per function evaluation, no overhead.
    pub const fn synthetic() -> Self {
        Self { ms_per_nfe: 2.0, overhead_ms: 0.0 }
    }

    pub fn inference_ms(&self, nfe: u64) -> f64 {
        self.overhead_ms + self.ms_per_nfe * nfe as f64
    }

    /// World steps that pass while the plan computes.
    pub fn hold_steps(&self, nfe: u64, dt: f64) -> usize {
        (self.inference_ms(nfe) / (dt * 1000.0)).ceil() as usize
    }
}

/// What the agent does during the hold phase while a plan computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HoldMode {
    /// Hold position (zero-order hold on null action).
    ZeroOrder,
    /// Keep executing the stale plan's remaining actions.
    ContinuePlan,
}

#[derive(Debug, Clone, Copy)]
pub struct RolloutConfig {
    /// Actions executed per replan (T_e).
    pub execute_steps: usize,
    /// World-step budget per episode.
    pub max_steps: usize,
    pub latency: LatencyModel,
    pub hold: HoldMode,
}

impl Default for RolloutConfig {
    fn default() -> Self {
        Self {
            execute_steps: 8,
            max_steps: 400,
            latency: LatencyModel::synthetic(),
            hold: HoldMode::ZeroOrder,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    pub collided: bool,
    pub steps: usize,
    pub replans: usize,
    /// Total simulated planning time, ms.
    pub inference_ms: f64,
    pub final_pos: [f64; 2],
}

pub fn run_episode(
    policy: &mut dyn Policy,
    task: &TaskSpec,
    dims: &EncoderDims,
    scene: &Scene,
    cfg: &RolloutConfig,
) -> Result<EpisodeResult> {
    if cfg.execute_steps == 0 {
        return Err(Error::Config {
            field: "simloop.execute_steps".to_string(),
            reason: "must be at least 1".to_string(),
        });
    }
    let mut state = init_episode(task, scene);
    let mut replans = 0usize;
    let mut inference_ms = 0.0;
    // stale plan + rows of it already executed, for HoldMode::ContinuePlan
    let mut stale: Option<Tensor> = None;
    let mut cursor = 0usize;
    while !state.done && state.step < cfg.max_steps {
        let obs =
            render_observation(task, dims, &Scene { agent: state.pos, phase: state.phase });
        let (plan, nfe) = policy.plan(task, &obs)?;
        replans += 1;
        inference_ms += cfg.latency.inference_ms(nfe);
        for _ in 0..cfg.latency.hold_steps(nfe, DT) {
            if state.done || state.step >= cfg.max_steps {
                break;
            }
            let a = match (cfg.hold, &stale) {
                (HoldMode::ContinuePlan, Some(p)) if cursor < p.shape()[0] => {
                    let d = p.data();
                    cursor += 1;
                    [d[2 * (cursor - 1)], d[2 * cursor - 1]]
                }
                _ => [0.0, 0.0],
            };
            state = step_env(task, &state, a, DT);
        }
        let rows = plan.shape()[0];
        let d = plan.data();
        cursor = 0;
        for k in 0..cfg.execute_steps.min(rows) {
            if state.done || state.step >= cfg.max_steps {
                break;
            }
            state = step_env(task, &state, [d[2 * k], d[2 * k + 1]], DT);
            cursor = k + 1;
        }
        stale = Some(plan);
    }
    Ok(EpisodeResult {
        success: is_success(&state),
        collided: state.collided,
        steps: state.step,
        replans,
        inference_ms,
        final_pos: state.pos,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BatchStats {
    pub episodes: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub mean_steps: f64,
    pub mean_replans: f64,
    pub mean_inference_ms: f64,
}

impl BatchStats {
    pub fn from_results(rs: &[EpisodeResult]) -> Result<Self> {
        if rs.is_empty() {
            return Err(Error::EmptySet("BatchStats::from_results"));
        }
        let n = rs.len() as f64;
        Ok(Self {
            episodes: rs.len(),
            successes: rs.iter().filter(|r| r.success).count(),
            success_rate: rs.iter().filter(|r| r.success).count() as f64 / n,
            mean_steps: rs.iter().map(|r| r.steps as f64).sum::<f64>() / n,
            mean_replans: rs.iter().map(|r| r.replans as f64).sum::<f64>() / n,
            mean_inference_ms: rs.iter().map(|r| r.inference_ms).sum::<f64>() / n,
        })
    }
}

/// Rolls `episodes` fresh scenes. Scene seeds depend only on `seed`, so two
/// policies given the same seed face identical scenes.
pub fn run_episodes(
    policy: &mut dyn Policy,
    task: &TaskSpec,
    dims: &EncoderDims,
    cfg: &RolloutConfig,
    episodes: usize,
    seed: u64,
) -> Result<Vec<EpisodeResult>> {
    if episodes == 0 {
        return Err(Error::EmptySet("run_episodes"));
    }
    let mut rng = rng_for(seed, &[tag("scenes")]);
    (0..episodes)
        .map(|_| {
            let scene = sample_scene(task, &mut rng);
            run_episode(policy, task, dims, &scene, cfg)
        })
        .collect()
}

pub fn run_batch(
    policy: &mut dyn Policy,
    task: &TaskSpec,
    dims: &EncoderDims,
    cfg: &RolloutConfig,
    episodes: usize,
    seed: u64,
) -> Result<BatchStats> {
    BatchStats::from_results(&run_episodes(policy, task, dims, cfg, episodes, seed)?)
}

/// One grid point of a dynamics sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub policy: String,
    pub speed: f64,
    pub stats: BatchStats,
    pub episodes: Vec<EpisodeResult>,
}

/// Crosses every policy with every target speed on a dynamic-target task.
/// Scenes per speed are shared across policies.
pub fn sweep_dynamics(
    policies: &mut [(&str, &mut dyn Policy)],
    task: &TaskSpec,
    dims: &EncoderDims,
    speeds: &[f64],
    cfg: &RolloutConfig,
    episodes: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if task.kind != TaskKind::DynamicTarget {
        return Err(Error::Config {
            field: "task.kind".to_string(),
            reason: "dynamics sweep needs a dynamic-target task".to_string(),
        });
    }
    let mut rows = Vec::with_capacity(policies.len() * speeds.len());
    for (si, &speed) in speeds.iter().enumerate() {
        let mut t = task.clone();
        t.orbit.as_mut().unwrap().speed = speed;
        let scene_seed = derive_seed(seed, &[tag("sweep"), si as u64]);
        for (name, policy) in policies.iter_mut() {
            let eps = run_episodes(*policy, &t, dims, cfg, episodes, scene_seed)?;
            rows.push(SweepRow {
                policy: name.to_string(),
                speed,
                stats: BatchStats::from_results(&eps)?,
                episodes: eps,
            });
        }
    }
    Ok(rows)
}

/// Success rates should not rise with target speed; returns a message per
/// (policy, speed step) where the rate climbs by more than `slack`.
pub fn speed_monotone_violations(rows: &[SweepRow], slack: f64) -> Vec<String> {
    let mut names: Vec<&str> = Vec::new();
    for r in rows {
        if !names.contains(&r.policy.as_str()) {
            names.push(&r.policy);
        }
    }
    let mut out = Vec::new();
    for name in names {
        let mut per: Vec<&SweepRow> = rows.iter().filter(|r| r.policy == name).collect();
        per.sort_by(|a, b| a.speed.total_cmp(&b.speed));
        for w in per.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b.stats.success_rate > a.stats.success_rate + slack {
                out.push(format!(
                    "policy `{name}`: success rate rises {:.3} -> {:.3} between speeds {} and {}",
                    a.stats.success_rate, b.stats.success_rate, a.speed, b.speed
                ));
            }
        }
    }
    out
}

/// Samples one teacher trajectory per plan via the probability-flow ODE.
pub struct TeacherPolicy<'a> {
    bundle: &'a TeacherBundle,
    n_steps: usize,
    method: OdeMethod,
    action_scale: f64,
    rng: ChaCha8Rng,
}

impl<'a> TeacherPolicy<'a> {
    pub fn new(
        bundle: &'a TeacherBundle,
        n_steps: usize,
        method: OdeMethod,
        action_scale: f64,
        seed: u64,
    ) -> Self {
        Self { bundle, n_steps, method, action_scale, rng: rng_for(seed, &[tag("teacher-pi")]) }
    }
}

impl Policy for TeacherPolicy<'_> {
    fn name(&self) -> &str {
        "teacher"
    }

    fn plan(&mut self, _task: &TaskSpec, obs: &RawObservation) -> Result<(Tensor, u64)> {
        let e = self.bundle.embed(obs)?;
        let dims = self.bundle.teacher.dims();
        let precision = self.bundle.teacher.params().precision();
        let z = gaussian_tensor(&mut self.rng, &[dims.horizon, dims.action_dim], precision);
        let traj = sample_ode(&self.bundle.teacher, &z, &e, self.n_steps, self.method)?;
        let data: Vec<f64> = traj.data().iter().map(|x| x * self.action_scale).collect();
        let plan = Tensor::new(traj.shape().to_vec(), data, precision)?;
        Ok((plan, self.method.nfe(self.n_steps)))
    }
}

/// One student forward pass per plan (NFE 1); the latent is the mode choice.
pub struct StudentPolicy<'a> {
    bundle: &'a TeacherBundle,
    student: &'a StudentNet,
    action_scale: f64,
    rng: ChaCha8Rng,
}

impl<'a> StudentPolicy<'a> {
    pub fn new(
        bundle: &'a TeacherBundle,
        student: &'a StudentNet,
        action_scale: f64,
        seed: u64,
    ) -> Self {
        Self { bundle, student, action_scale, rng: rng_for(seed, &[tag("student-pi")]) }
    }
}

impl Policy for StudentPolicy<'_> {
    fn name(&self) -> &str {
        "student"
    }

    fn plan(&mut self, _task: &TaskSpec, obs: &RawObservation) -> Result<(Tensor, u64)> {
        let e = self.bundle.embed(obs)?;
        let mut set = student_sample_set(self.student, &e, 1, self.action_scale, &mut self.rng)?;
        Ok((set.pop().unwrap(), 1))
    }
}

/// Privileged noise-free expert, NFE 0. Recovers the scene from the
/// proprioceptive state (orbit phase from the observed target), picks a mode
/// at random near the start, then sticks with whichever path it is on.
pub struct OraclePolicy {
    rng: ChaCha8Rng,
}

impl OraclePolicy {
    pub fn new(seed: u64) -> Self {
        Self { rng: rng_for(seed, &[tag("oracle-pi")]) }
    }
}

impl Policy for OraclePolicy {
    fn name(&self) -> &str {
        "oracle"
    }

    fn plan(&mut self, task: &TaskSpec, obs: &RawObservation) -> Result<(Tensor, u64)> {
        let agent = [obs.state[0], obs.state[1]];
        let phase = match (&task.kind, &task.orbit) {
            (TaskKind::DynamicTarget, Some(o)) => {
                (obs.state[3] - o.center[1]).atan2(obs.state[2] - o.center[0])
            }
            _ => 0.0,
        };
        let scene = Scene { agent, phase };
        let mode = match task.kind {
            TaskKind::DynamicTarget => 0,
            _ => {
                let per: Vec<(f64, f64)> =
                    (0..task.modes()).map(|m| nearest_progress(task, m, agent)).collect();
                let near = (0..per.len())
                    .min_by(|&a, &b| per[a].1.total_cmp(&per[b].1))
                    .unwrap();
                if per[near].0 < 0.05 {
                    self.rng.gen_range(0..task.modes())
                } else {
                    near
                }
            }
        };
        Ok((expert_plan(task, &scene, mode)?, 0))
    }
}

/// Replans toward wherever the target was observed, with no motion
/// prediction. Useful as a latency probe: its only information channel is
/// the replan rate.
pub struct GreedyChaser {
    pub step: f64,
}

impl Policy for GreedyChaser {
    fn name(&self) -> &str {
        "greedy-chaser"
    }

    fn plan(&mut self, task: &TaskSpec, obs: &RawObservation) -> Result<(Tensor, u64)> {
        let mut pos = [obs.state[0], obs.state[1]];
        let goal = match task.kind {
            TaskKind::DynamicTarget => [obs.state[2], obs.state[3]],
            _ => task.goals[0],
        };
        let mut data = Vec::with_capacity(task.horizon * 2);
        for _ in 0..task.horizon {
            let d = [goal[0] - pos[0], goal[1] - pos[1]];
            let n = (d[0] * d[0] + d[1] * d[1]).sqrt();
            let s = if n > self.step { self.step / n } else { 1.0 };
            let a = [d[0] * s, d[1] * s];
            pos = [pos[0] + a[0], pos[1] + a[1]];
            data.extend_from_slice(&a);
        }
        let t = Tensor::new(vec![task.horizon, 2], data, crate::diffcore::Precision::Extended64)?;
        Ok((t, 1))
    }
}
