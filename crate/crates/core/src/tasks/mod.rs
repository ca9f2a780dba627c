//! Synthetic 2-D manipulation tasks: multimodal expert demos, rasterized
//! observations, and the stepped environment for closed-loop rollouts.
//!
//! Actions are per-step position deltas in task units; the workspace is
//! [-1,1]². Leaving it counts as a fault, same as hitting the obstacle.

mod expert;
mod render;

pub use expert::{
    expert_plan, expert_set, nearest_progress, sample_expert_demo, DemoSample, EXPERT_STEP,
};
pub use render::render_observation;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// World seconds per environment step.
pub const DT: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Fork2d,
    Multigoal,
    DynamicTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
}

/// Constant-speed circular orbit traced by the dynamic target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Orbit {
    pub center: [f64; 2],
    pub radius: f64,
    /// Linear speed, task units per second.
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub horizon: usize,
    /// Expert waypoint jitter std, task units.
    pub noise: f64,
    /// Componentwise per-step action cap; `step_env` clamps to it.
    pub action_bound: f64,
    pub success_radius: f64,
    pub start: [f64; 2],
    /// Episode/demo starts are drawn uniformly within ±this of `start`.
    pub start_jitter: f64,
    pub obstacle: Option<Obstacle>,
    pub goals: Vec<[f64; 2]>,
    pub orbit: Option<Orbit>,
}

impl TaskSpec {
    pub fn fork2d() -> Self {
        Self {
            kind: TaskKind::Fork2d,
            horizon: 32,
            noise: 0.02,
            action_bound: 0.2,
            success_radius: 0.05,
            start: [-0.8, 0.0],
            start_jitter: 0.1,
            obstacle: Some(Obstacle { center: [0.0, 0.0], radius: 0.25 }),
            goals: vec![[0.8, 0.0]],
            orbit: None,
        }
    }

    pub fn multigoal() -> Self {
        let goals = [90.0f64, 210.0, 330.0]
            .iter()
            .map(|deg| {
                let a = deg.to_radians();
                [0.7 * a.cos(), 0.7 * a.sin()]
            })
            .collect();
        Self {
            kind: TaskKind::Multigoal,
            horizon: 32,
            noise: 0.02,
            action_bound: 0.2,
            success_radius: 0.05,
            start: [0.0, 0.0],
            start_jitter: 0.1,
            obstacle: None,
            goals,
            orbit: None,
        }
    }

    pub fn dynamic_target(speed: f64) -> Self {
        Self {
            kind: TaskKind::DynamicTarget,
            horizon: 32,
            noise: 0.02,
            action_bound: 0.2,
            success_radius: 0.05,
            start: [0.0, 0.0],
            start_jitter: 0.1,
            obstacle: None,
            goals: Vec::new(),
            orbit: Some(Orbit { center: [0.0, 0.0], radius: 0.5, speed }),
        }
    }

    /// Ground-truth mode count conditioned on a fresh start.
    pub fn modes(&self) -> usize {
        match self.kind {
            TaskKind::Fork2d => 2,
            TaskKind::Multigoal => self.goals.len(),
            TaskKind::DynamicTarget => 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, reason: String| {
            Err(Error::Config { field: format!("task.{field}"), reason })
        };
        if self.horizon == 0 {
            return fail("horizon", "must be positive".into());
        }
        if self.noise < 0.0 || self.action_bound <= 0.0 || self.success_radius <= 0.0 {
            return fail("noise", "noise ≥ 0, bounds > 0 required".into());
        }
        if let Some(o) = &self.obstacle {
            if o.radius <= 0.0 || o.center[0].abs() + o.radius >= 1.0 || o.center[1].abs() + o.radius >= 1.0 {
                return fail("obstacle", "must lie strictly inside the workspace".into());
            }
        }
        match self.kind {
            TaskKind::Fork2d => {
                if self.goals.len() != 1 {
                    return fail("goals", format!("fork2d wants 1 goal, got {}", self.goals.len()));
                }
                if self.obstacle.is_none() {
                    return fail("obstacle", "fork2d needs an obstacle to fork around".into());
                }
            }
            TaskKind::Multigoal => {
                if self.goals.len() < 2 {
                    return fail("goals", format!("multigoal wants ≥ 2 goals, got {}", self.goals.len()));
                }
            }
            TaskKind::DynamicTarget => match &self.orbit {
                None => return fail("orbit", "dynamic-target needs an orbit".into()),
                Some(o) if o.radius <= 0.0 || o.speed < 0.0 => {
                    return fail("orbit", "radius > 0 and speed ≥ 0 required".into())
                }
                _ => {}
            },
        }
        Ok(())
    }
}

/// Everything needed to re-render an observation or re-sample conditioned
/// expert demos: the agent position and (dynamic task) the orbit phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub agent: [f64; 2],
    pub phase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeState {
    pub pos: [f64; 2],
    /// Tracked goal: orbit point (dynamic), nearest goal otherwise.
    pub target: [f64; 2],
    pub phase: f64,
    /// Simulated seconds elapsed.
    pub time: f64,
    pub step: usize,
    pub done: bool,
    /// Obstacle hit or workspace left.
    pub collided: bool,
    pub succeeded: bool,
}

/// Position of the dynamic target at `phase`; static tasks return the
/// nearest goal to `from`.
pub fn target_at(task: &TaskSpec, phase: f64, from: [f64; 2]) -> [f64; 2] {
    match &task.orbit {
        Some(o) => [o.center[0] + o.radius * phase.cos(), o.center[1] + o.radius * phase.sin()],
        None => task
            .goals
            .iter()
            .copied()
            .min_by(|a, b| dist(*a, from).total_cmp(&dist(*b, from)))
            .unwrap_or([0.0, 0.0]),
    }
}

pub fn init_episode(task: &TaskSpec, scene: &Scene) -> EpisodeState {
    EpisodeState {
        pos: scene.agent,
        target: target_at(task, scene.phase, scene.agent),
        phase: scene.phase,
        time: 0.0,
        step: 0,
        done: false,
        collided: false,
        succeeded: false,
    }
}

/// Draws a fresh-start scene: agent near `start`, random orbit phase.
pub fn sample_scene<R: rand::Rng>(task: &TaskSpec, rng: &mut R) -> Scene {
    let j = task.start_jitter;
    let agent = [
        task.start[0] + rng.gen_range(-j..=j),
        task.start[1] + rng.gen_range(-j..=j),
    ];
    let phase = match task.kind {
        TaskKind::DynamicTarget => rng.gen_range(0.0..std::f64::consts::TAU),
        _ => 0.0,
    };
    Scene { agent, phase }
}

/// One environment tick: clamp the action, move, advance the target, then
/// update fault/success flags. No-op once `done`.
pub fn step_env(task: &TaskSpec, state: &EpisodeState, action: [f64; 2], dt: f64) -> EpisodeState {
    let mut s = state.clone();
    if s.done {
        return s;
    }
    let b = task.action_bound;
    let a = [action[0].clamp(-b, b), action[1].clamp(-b, b)];
    let next = [s.pos[0] + a[0], s.pos[1] + a[1]];
    if collides(task, s.pos, next) {
        s.collided = true;
        s.done = true;
    }
    s.pos = next;
    if let Some(o) = &task.orbit {
        s.phase += o.speed / o.radius * dt;
    }
    s.time += dt;
    s.step += 1;
    s.target = target_at(task, s.phase, s.pos);
    if !s.collided && dist(s.pos, s.target) <= task.success_radius {
        s.succeeded = true;
        s.done = true;
    }
    s
}

pub fn is_success(state: &EpisodeState) -> bool {
    state.succeeded && !state.collided
}

/// True if the move hits the obstacle or exits the workspace.
pub fn collides(task: &TaskSpec, from: [f64; 2], to: [f64; 2]) -> bool {
    if to[0].abs() > 1.0 || to[1].abs() > 1.0 {
        return true;
    }
    match &task.obstacle {
        Some(o) => segment_point_dist(from, to, o.center) < o.radius,
        None => false,
    }
}

pub(crate) fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

fn segment_point_dist(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    let ab = [b[0] - a[0], b[1] - a[1]];
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    };
    dist([a[0] + t * ab[0], a[1] + t * ab[1]], p)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_for;

    #[test]
    fn zero_action_holds_position() {
        let task = TaskSpec::multigoal();
        let s0 = init_episode(&task, &Scene { agent: [0.1, -0.2], phase: 0.0 });
        let s1 = step_env(&task, &s0, [0.0, 0.0], DT);
        assert_eq!(s1.pos, s0.pos);
        assert!(!s1.done);
    }

    #[test]
    fn action_into_obstacle_sets_collision() {
        let task = TaskSpec::fork2d();
        let s0 = init_episode(&task, &Scene { agent: [-0.3, 0.0], phase: 0.0 });
        let s1 = step_env(&task, &s0, [0.2, 0.0], DT);
        assert!(s1.collided && s1.done && !is_success(&s1));
    }

    #[test]
    fn grazing_segment_collides() {
        // passes tangentially through the disc even though both endpoints clear it
        let task = TaskSpec::fork2d();
        let s0 = init_episode(&task, &Scene { agent: [-0.1, 0.2], phase: 0.0 });
        let mut task_loose = task.clone();
        task_loose.action_bound = 1.0;
        let s1 = step_env(&task_loose, &s0, [0.2, -0.4], DT);
        assert!(s1.collided);
    }

    #[test]
    fn leaving_workspace_is_a_fault() {
        let task = TaskSpec::multigoal();
        let s0 = init_episode(&task, &Scene { agent: [0.95, 0.0], phase: 0.0 });
        let s1 = step_env(&task, &s0, [0.2, 0.0], DT);
        assert!(s1.collided && s1.done);
    }

    #[test]
    fn actions_clamp_to_bound() {
        let task = TaskSpec::multigoal();
        let s0 = init_episode(&task, &Scene { agent: [0.0, 0.0], phase: 0.0 });
        let s1 = step_env(&task, &s0, [10.0, -10.0], DT);
        assert_eq!(s1.pos, [task.action_bound, -task.action_bound]);
    }

    #[test]
    fn reaching_goal_succeeds_and_latches() {
        let task = TaskSpec::fork2d();
        let s0 = init_episode(&task, &Scene { agent: [0.75, 0.1], phase: 0.0 });
        let s1 = step_env(&task, &s0, [0.05, -0.06], DT);
        assert!(is_success(&s1) && s1.done);
        // done states ignore further actions
        let s2 = step_env(&task, &s1, [0.2, 0.2], DT);
        assert_eq!(s2.pos, s1.pos);
    }

    #[test]
    fn collision_excludes_success_forever() {
        let task = TaskSpec::fork2d();
        let s0 = init_episode(&task, &Scene { agent: [-0.3, 0.0], phase: 0.0 });
        let s1 = step_env(&task, &s0, [0.2, 0.0], DT);
        let s2 = step_env(&task, &s1, [0.0, 0.0], DT);
        assert!(!is_success(&s2));
    }

    #[test]
    fn zero_speed_orbit_reduces_to_static_goal() {
        let task = TaskSpec::dynamic_target(0.0);
        let scene = Scene { agent: [0.0, 0.0], phase: 1.0 };
        let t0 = target_at(&task, scene.phase, scene.agent);
        let mut s = init_episode(&task, &scene);
        for _ in 0..50 {
            s = step_env(&task, &s, [0.0, 0.01], DT);
        }
        assert_eq!(s.target, t0);
    }

    #[test]
    fn orbit_advances_with_time() {
        let task = TaskSpec::dynamic_target(1.25);
        let s0 = init_episode(&task, &Scene { agent: [0.0, 0.0], phase: 0.0 });
        let s1 = step_env(&task, &s0, [0.0, 0.0], DT);
        // linear displacement ≈ speed · dt
        let moved = dist(s1.target, s0.target);
        assert!((moved - 1.25 * DT).abs() < 1e-4, "target moved {moved}");
    }

    #[test]
    fn scene_sampling_is_deterministic_and_in_range() {
        let task = TaskSpec::fork2d();
        let a = sample_scene(&task, &mut rng_for(9, &[1]));
        let b = sample_scene(&task, &mut rng_for(9, &[1]));
        assert_eq!(a, b);
        assert!((a.agent[0] - task.start[0]).abs() <= task.start_jitter);
        assert!((a.agent[1] - task.start[1]).abs() <= task.start_jitter);
    }

    #[test]
    fn validate_rejects_bad_specs() {
        let mut t = TaskSpec::fork2d();
        t.obstacle = Some(Obstacle { center: [0.9, 0.0], radius: 0.25 });
        assert!(t.validate().is_err());
        let mut t = TaskSpec::multigoal();
        t.goals.truncate(1);
        assert!(t.validate().is_err());
        let mut t = TaskSpec::dynamic_target(1.0);
        t.orbit = None;
        assert!(t.validate().is_err());
        assert!(TaskSpec::fork2d().validate().is_ok());
    }

    #[test]
    fn kind_serializes_kebab_case() {
        assert_eq!(serde_json::to_string(&TaskKind::DynamicTarget).unwrap(), "\"dynamic-target\"");
        assert_eq!(serde_json::to_string(&TaskKind::Fork2d).unwrap(), "\"fork2d\"");
    }
}
