//! Expert demonstration generators with known mode structure.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::diffcore::{Precision, Tensor};
use crate::encoder::{EncoderDims, RawObservation};
use crate::error::Result;
use crate::tasks::{render_observation, target_at, Scene, TaskKind, TaskSpec, DT};

/// Expert per-step displacement cap (≙ 5 units/s at `DT`).
pub const EXPERT_STEP: f64 = 0.05;

/// Bézier control-point offset of the fork arcs.
const FORK_BULGE: f64 = 0.9;

#[derive(Debug, Clone)]
pub struct DemoSample {
    pub scene: Scene,
    pub obs: RawObservation,
    /// `[H, 2]` per-step deltas, task units.
    pub traj: Tensor,
    pub mode: usize,
}

/// Draws one demo: mode uniform, start jittered, and (static tasks) progress
/// u₀ = 0 half the time else U(0, 0.8) so the corpus covers mid-path states.
pub fn sample_expert_demo<R: Rng>(
    task: &TaskSpec,
    dims: &EncoderDims,
    rng: &mut R,
) -> Result<DemoSample> {
    let mode = rng.gen_range(0..task.modes());
    let (scene, traj) = match task.kind {
        TaskKind::DynamicTarget => {
            let orbit = task.orbit.as_ref().unwrap();
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = orbit.radius * rng.gen::<f64>().sqrt();
            let a = rng.gen_range(0.0..std::f64::consts::TAU);
            let scene = Scene {
                agent: [orbit.center[0] + r * a.cos(), orbit.center[1] + r * a.sin()],
                phase,
            };
            (scene, chase_demo(task, &scene, rng)?)
        }
        _ => {
            let j = task.start_jitter;
            let p0 = [
                task.start[0] + rng.gen_range(-j..=j),
                task.start[1] + rng.gen_range(-j..=j),
            ];
            let u0 = if rng.gen_bool(0.5) { 0.0 } else { rng.gen_range(0.0..0.8) };
            let agent = add(path_point(task, p0, mode, u0), jit(task.noise, rng));
            let scene = Scene { agent, phase: 0.0 };
            let traj = path_demo(task, p0, &scene, mode, u0, rng)?;
            (scene, traj)
        }
    };
    let obs = render_observation(task, dims, &scene);
    Ok(DemoSample { scene, obs, traj, mode })
}

/// Fresh expert trajectories conditioned on `scene` (progress 0): the
/// ground-truth mode generators behind the coverage metric.
pub fn expert_set<R: Rng>(
    task: &TaskSpec,
    scene: &Scene,
    mode: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    (0..n)
        .map(|_| match task.kind {
            TaskKind::DynamicTarget => chase_demo(task, scene, rng),
            _ => path_demo(task, scene.agent, scene, mode, 0.0, rng),
        })
        .collect()
}

/// Noise-free plan that resumes `mode`'s nominal path from the agent's
/// nearest progress point (dynamic tasks chase instead; `mode` is ignored).
/// This is the receding-horizon form of the expert: safe to call mid-episode.
pub fn expert_plan(task: &TaskSpec, scene: &Scene, mode: usize) -> Result<Tensor> {
    let mut clean = task.clone();
    clean.noise = 0.0;
    let mut rng = crate::rng::rng_for(0, &[]);
    match task.kind {
        TaskKind::DynamicTarget => chase_demo(&clean, scene, &mut rng),
        _ => {
            let (u0, _) = nearest_progress(&clean, mode, scene.agent);
            path_demo(&clean, clean.start, scene, mode, u0, &mut rng)
        }
    }
}

/// (progress u, distance) of the closest point on `mode`'s nominal path
/// (anchored at `task.start`) to `p`. Static tasks only. The grid must stay
/// much finer than the per-replan progress or a receding-horizon caller can
/// stall: re-projection would round back to the same u forever.
pub fn nearest_progress(task: &TaskSpec, mode: usize, p: [f64; 2]) -> (f64, f64) {
    let mut best = (0.0, f64::INFINITY);
    for i in 0..=512 {
        let u = i as f64 / 512.0;
        let q = path_point(task, task.start, mode, u);
        let d = ((q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)).sqrt();
        if d < best.1 {
            best = (u, d);
        }
    }
    best
}

/// Waypoints along the mode path from `u0` to 1, jittered except the final
/// one (exactly the goal), emitted as deltas starting at the scene agent.
fn path_demo<R: Rng>(
    task: &TaskSpec,
    anchor: [f64; 2],
    scene: &Scene,
    mode: usize,
    u0: f64,
    rng: &mut R,
) -> Result<Tensor> {
    let h = task.horizon;
    let mut prev = scene.agent;
    let mut data = Vec::with_capacity(h * 2);
    for k in 1..=h {
        let u = u0 + (1.0 - u0) * k as f64 / h as f64;
        let w = if k == h {
            path_point(task, anchor, mode, 1.0)
        } else {
            add(path_point(task, anchor, mode, u), jit(task.noise, rng))
        };
        data.extend([w[0] - prev[0], w[1] - prev[1]]);
        prev = w;
    }
    Tensor::new(vec![h, 2], data, Precision::Standard32)
}

/// Clamped proportional chase of the moving target; once caught the expert
/// rides it, so the final waypoint sits on the target.
fn chase_demo<R: Rng>(task: &TaskSpec, scene: &Scene, rng: &mut R) -> Result<Tensor> {
    let orbit = task.orbit.as_ref().unwrap();
    let omega = orbit.speed / orbit.radius;
    let h = task.horizon;
    let mut pos = scene.agent;
    let mut prev = scene.agent;
    let mut data = Vec::with_capacity(h * 2);
    for k in 1..=h {
        let tgt = target_at(task, scene.phase + omega * k as f64 * DT, pos);
        let to = [tgt[0] - pos[0], tgt[1] - pos[1]];
        let d = (to[0] * to[0] + to[1] * to[1]).sqrt();
        let step = if d > EXPERT_STEP {
            [to[0] / d * EXPERT_STEP, to[1] / d * EXPERT_STEP]
        } else {
            to
        };
        pos = [pos[0] + step[0], pos[1] + step[1]];
        let w = if k == h { pos } else { add(pos, jit(task.noise, rng)) };
        data.extend([w[0] - prev[0], w[1] - prev[1]]);
        prev = w;
    }
    Tensor::new(vec![h, 2], data, Precision::Standard32)
}

fn path_point(task: &TaskSpec, p0: [f64; 2], mode: usize, u: f64) -> [f64; 2] {
    match task.kind {
        TaskKind::Fork2d => {
            let g = task.goals[0];
            let c = [0.0, if mode == 0 { FORK_BULGE } else { -FORK_BULGE }];
            let (s, m, e) = ((1.0 - u) * (1.0 - u), 2.0 * u * (1.0 - u), u * u);
            [
                s * p0[0] + m * c[0] + e * g[0],
                s * p0[1] + m * c[1] + e * g[1],
            ]
        }
        TaskKind::Multigoal => {
            let g = task.goals[mode];
            let s = u * u * (3.0 - 2.0 * u);
            [p0[0] + s * (g[0] - p0[0]), p0[1] + s * (g[1] - p0[1])]
        }
        TaskKind::DynamicTarget => unreachable!("dynamic demos chase, they do not follow a path"),
    }
}

/// Truncated Gaussian waypoint jitter, clamped at ±2.5σ.
fn jit<R: Rng>(sigma: f64, rng: &mut R) -> [f64; 2] {
    let lim = 2.5 * sigma;
    let a: f64 = rng.sample(StandardNormal);
    let b: f64 = rng.sample(StandardNormal);
    [(sigma * a).clamp(-lim, lim), (sigma * b).clamp(-lim, lim)]
}

fn add(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] + b[0], a[1] + b[1]]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::bit_equal;
    use crate::rng::rng_for;
    use crate::tasks::{collides, dist};

    fn dims() -> EncoderDims {
        EncoderDims::default()
    }

    fn integrate(traj: &Tensor, start: [f64; 2]) -> Vec<[f64; 2]> {
        let mut pos = start;
        traj.data()
            .chunks(2)
            .map(|d| {
                pos = [pos[0] + d[0], pos[1] + d[1]];
                pos
            })
            .collect()
    }

    #[test]
    fn fork2d_mode_frequencies_are_even() {
        let task = TaskSpec::fork2d();
        let mut rng = rng_for(21, &[]);
        let mut upper = 0usize;
        for _ in 0..10_000 {
            let d = sample_expert_demo(&task, &dims(), &mut rng).unwrap();
            upper += (d.mode == 0) as usize;
        }
        assert!((4800..=5200).contains(&upper), "upper-mode count {upper}");
    }

    #[test]
    fn fork2d_demos_are_collision_free_and_reach_goal() {
        let task = TaskSpec::fork2d();
        let mut rng = rng_for(22, &[]);
        for _ in 0..300 {
            let d = sample_expert_demo(&task, &dims(), &mut rng).unwrap();
            let pts = integrate(&d.traj, d.scene.agent);
            let mut prev = d.scene.agent;
            for &p in &pts {
                assert!(!collides(&task, prev, p), "demo clips the obstacle at {p:?}");
                prev = p;
            }
            for v in d.traj.data() {
                assert!(v.abs() <= task.action_bound, "delta {v} above bound");
            }
            assert!(dist(*pts.last().unwrap(), task.goals[0]) < 1e-4);
        }
    }

    #[test]
    fn multigoal_demos_pick_all_goals() {
        let task = TaskSpec::multigoal();
        let mut rng = rng_for(23, &[]);
        let mut counts = vec![0usize; task.modes()];
        for _ in 0..1500 {
            let d = sample_expert_demo(&task, &dims(), &mut rng).unwrap();
            counts[d.mode] += 1;
            let last = *integrate(&d.traj, d.scene.agent).last().unwrap();
            assert!(dist(last, task.goals[d.mode]) < 1e-4);
        }
        for c in counts {
            assert!((420..=580).contains(&c), "goal count {c}");
        }
    }

    #[test]
    fn dynamic_demos_catch_the_moving_target() {
        let task = TaskSpec::dynamic_target(1.25);
        let orbit = task.orbit.as_ref().unwrap();
        let mut rng = rng_for(24, &[]);
        for _ in 0..300 {
            let d = sample_expert_demo(&task, &dims(), &mut rng).unwrap();
            let last = *integrate(&d.traj, d.scene.agent).last().unwrap();
            let phase = d.scene.phase + orbit.speed / orbit.radius * task.horizon as f64 * DT;
            let tgt = target_at(&task, phase, last);
            assert!(dist(last, tgt) <= task.success_radius, "missed by {}", dist(last, tgt));
        }
    }

    #[test]
    fn expert_set_is_anchored_at_the_scene() {
        let task = TaskSpec::fork2d();
        let scene = Scene { agent: [-0.75, 0.05], phase: 0.0 };
        let set = expert_set(&task, &scene, 1, 8, &mut rng_for(25, &[])).unwrap();
        assert_eq!(set.len(), 8);
        for t in &set {
            let last = *integrate(t, scene.agent).last().unwrap();
            assert!(dist(last, task.goals[0]) < 1e-4);
            // lower mode stays below the axis mid-path
            let mid = integrate(t, scene.agent)[task.horizon / 2];
            assert!(mid[1] < 0.0, "lower-mode midpoint {mid:?}");
        }
    }

    #[test]
    fn demos_are_deterministic_per_seed() {
        let task = TaskSpec::multigoal();
        let a = sample_expert_demo(&task, &dims(), &mut rng_for(26, &[4])).unwrap();
        let b = sample_expert_demo(&task, &dims(), &mut rng_for(26, &[4])).unwrap();
        assert_eq!(a.mode, b.mode);
        assert_eq!(a.scene, b.scene);
        assert!(bit_equal(&a.traj, &b.traj));
        assert_eq!(a.obs.rgb, b.obs.rgb);
        assert_eq!(a.obs.state, b.obs.state);
    }

    #[test]
    fn resumed_plan_continues_forward_to_the_goal() {
        let task = TaskSpec::fork2d();
        let on_path = path_point(&task, task.start, 0, 0.4);
        let scene = Scene { agent: on_path, phase: 0.0 };
        let plan = expert_plan(&task, &scene, 0).unwrap();
        let pts = integrate(&plan, scene.agent);
        // stays on the upper arc, never backtracks to the start
        for p in &pts {
            assert!(p[0] > on_path[0] - 0.05, "backtracked to {p:?}");
        }
        assert!(dist(*pts.last().unwrap(), task.goals[0]) < 1e-4);
        for v in plan.data() {
            assert!(v.abs() <= task.action_bound);
        }
    }

    #[test]
    fn nearest_progress_identifies_path_and_position() {
        let task = TaskSpec::fork2d();
        let p = path_point(&task, task.start, 0, 0.37);
        let (u, d_same) = nearest_progress(&task, 0, p);
        let (_, d_other) = nearest_progress(&task, 1, p);
        assert!((u - 0.37).abs() <= 1.0 / 512.0, "u {u}");
        assert!(d_same < 1e-2 && d_other > 0.3, "{d_same} vs {d_other}");
    }

    #[test]
    fn resumed_plan_chases_on_dynamic_tasks() {
        let task = TaskSpec::dynamic_target(1.0);
        let orbit = task.orbit.as_ref().unwrap();
        let scene = Scene { agent: [0.1, -0.2], phase: 2.0 };
        let plan = expert_plan(&task, &scene, 0).unwrap();
        let last = *integrate(&plan, scene.agent).last().unwrap();
        let phase = scene.phase + orbit.speed / orbit.radius * task.horizon as f64 * DT;
        assert!(dist(last, target_at(&task, phase, last)) <= task.success_radius);
    }

    #[test]
    fn fork_modes_are_far_apart() {
        let task = TaskSpec::fork2d();
        let scene = Scene { agent: task.start, phase: 0.0 };
        let mut rng = rng_for(27, &[]);
        let centroid = |mode: usize, rng: &mut _| -> Vec<f64> {
            let set = expert_set(&task, &scene, mode, 100, rng).unwrap();
            let mut acc = vec![0.0; task.horizon * 2];
            for t in &set {
                for (a, p) in acc.iter_mut().zip(integrate(t, scene.agent).iter().flatten()) {
                    *a += p / set.len() as f64;
                }
            }
            acc
        };
        let (c0, c1) = (centroid(0, &mut rng), centroid(1, &mut rng));
        let sep: f64 = c0
            .iter()
            .zip(&c1)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        assert!(sep > 6.0 * task.noise, "separation {sep}");
        assert!(sep > 1.0, "separation {sep}");
    }
}
