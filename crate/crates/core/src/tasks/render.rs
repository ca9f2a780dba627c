//! Deterministic rasterization of a scene into the encoder's observation.

use crate::encoder::{EncoderDims, RawObservation};
use crate::tasks::{dist, target_at, Scene, TaskKind, TaskSpec};

/// Gaussian marker std, workspace units.
const BLOB_SIGMA: f64 = 0.1;
/// Radius of the point rings drawn around goal markers.
const RING_RADIUS: f64 = 0.06;

/// Channels: 0 obstacle occupancy, 1 goal markers, 2 agent. Depth is a
/// clamped signed distance to the obstacle (or to the nearest marker ring
/// when there is none). Points sample the obstacle surface or marker rings.
pub fn render_observation(task: &TaskSpec, dims: &EncoderDims, scene: &Scene) -> RawObservation {
    let n = dims.raster;
    let cell = 2.0 / n as f64;
    let markers: Vec<[f64; 2]> = match task.kind {
        TaskKind::DynamicTarget => vec![target_at(task, scene.phase, scene.agent)],
        _ => task.goals.clone(),
    };
    let mut rgb = Vec::with_capacity(n * n * 3);
    let mut depth = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let p = [-1.0 + (j as f64 + 0.5) * cell, -1.0 + (i as f64 + 0.5) * cell];
            let occ = task.obstacle.as_ref().map_or(0.0, |o| {
                ((o.radius + 0.5 * cell - dist(p, o.center)) / cell).clamp(0.0, 1.0)
            });
            let goals: f64 = markers.iter().map(|m| blob(p, *m)).sum();
            rgb.extend([occ, goals.min(1.0), blob(p, scene.agent)]);
            let sdf = match &task.obstacle {
                Some(o) => dist(p, o.center) - o.radius,
                None => {
                    markers.iter().map(|m| dist(p, *m)).fold(f64::INFINITY, f64::min)
                        - RING_RADIUS
                }
            };
            depth.push(sdf.clamp(-1.0, 1.0));
        }
    }
    let state = match task.kind {
        TaskKind::DynamicTarget => {
            let t = &markers[0];
            vec![scene.agent[0], scene.agent[1], t[0], t[1]]
        }
        _ => vec![scene.agent[0], scene.agent[1], 0.0, 0.0],
    };
    RawObservation { rgb, depth, points: surface_points(task, &markers, dims.n_points), state }
}

fn blob(p: [f64; 2], c: [f64; 2]) -> f64 {
    let d2 = (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
    (-d2 / (2.0 * BLOB_SIGMA * BLOB_SIGMA)).exp()
}

fn surface_points(task: &TaskSpec, markers: &[[f64; 2]], n: usize) -> Vec<[f64; 3]> {
    use std::f64::consts::TAU;
    if let Some(o) = &task.obstacle {
        return (0..n)
            .map(|k| {
                let a = TAU * k as f64 / n as f64;
                [o.center[0] + o.radius * a.cos(), o.center[1] + o.radius * a.sin(), 0.0]
            })
            .collect();
    }
    let m = markers.len().max(1);
    let per = n.div_ceil(m);
    (0..n)
        .map(|k| {
            let g = markers[k % m];
            let a = TAU * (k / m) as f64 / per as f64;
            [g[0] + RING_RADIUS * a.cos(), g[1] + RING_RADIUS * a.sin(), 0.0]
        })
        .collect()
}
