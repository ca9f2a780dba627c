//! Layer helpers shared by the teacher and student backbones.
//!
//! Everything is expressed through graph ops: kernel-3 convolutions are a
//! zero-pad plus three shifted matmuls, resampling is multiplication by a
//! constant matrix, FiLM is a conditioned affine on the channel axis.

use std::collections::BTreeMap;

use crate::diffcore::{Graph, ValueId};
use crate::error::{Error, Result};

type Ids = BTreeMap<String, ValueId>;

fn id(ids: &Ids, name: &str) -> Result<ValueId> {
    ids.get(name).copied().ok_or_else(|| Error::UnknownParam(name.to_string()))
}

fn rows_of(g: &Graph, x: ValueId) -> Result<usize> {
    g.value(x).dims2().map(|(r, _)| r).ok_or_else(|| Error::InvalidShape {
        op: "block",
        shape: g.value(x).shape().to_vec(),
        reason: "expects rank 2".to_string(),
    })
}

/// `y = x·W + b`, with W at `{name}.w` and optional bias `{name}.b`.
pub fn linear(g: &mut Graph, ids: &Ids, name: &str, x: ValueId) -> Result<ValueId> {
    let w = id(ids, &format!("{name}.w"))?;
    let y = g.matmul(x, w)?;
    match ids.get(&format!("{name}.b")) {
        Some(&b) => g.add(y, b),
        None => Ok(y),
    }
}

/// Kernel-3 "same" convolution over the row (time) axis of `[H, C_in]`.
/// Weights `{name}.w_m1 / .w_0 / .w_p1` are `[C_in, C_out]`, bias `{name}.b`.
pub fn conv3(g: &mut Graph, ids: &Ids, name: &str, x: ValueId) -> Result<ValueId> {
    let h = rows_of(g, x)?;
    let c_in = g.value(x).shape()[1];
    let pad = g.constant(vec![1, c_in], vec![0.0; c_in])?;
    let padded = g.concat(&[pad, x, pad], 0)?;
    let xm = g.slice(padded, 0, 0, h)?;
    let x0 = g.slice(padded, 0, 1, h)?;
    let xp = g.slice(padded, 0, 2, h)?;
    let wm = id(ids, &format!("{name}.w_m1"))?;
    let w0 = id(ids, &format!("{name}.w_0"))?;
    let wp = id(ids, &format!("{name}.w_p1"))?;
    let ym = g.matmul(xm, wm)?;
    let y0 = g.matmul(x0, w0)?;
    let yp = g.matmul(xp, wp)?;
    let s = g.add(ym, y0)?;
    let s = g.add(s, yp)?;
    let b = id(ids, &format!("{name}.b"))?;
    g.add(s, b)
}

/// Broadcasts a `[1, C]` row to `[rows, C]` (ones-vector matmul).
pub fn row_broadcast(g: &mut Graph, row: ValueId, rows: usize) -> Result<ValueId> {
    let ones = g.constant(vec![rows, 1], vec![1.0; rows])?;
    g.matmul(ones, row)
}

/// FiLM: `y = x ⊙ (1 + γ̂) + β` where `[γ̂ ; β] = e·W_obs (+ t·W_time) + b`.
/// The time branch applies iff `{name}.film_time.w` exists in `ids`.
pub fn film(
    g: &mut Graph,
    ids: &Ids,
    name: &str,
    x: ValueId,
    e_obs: ValueId,
    t_emb: Option<ValueId>,
) -> Result<ValueId> {
    let w_obs = id(ids, &format!("{name}.film_obs.w"))?;
    let mut gb = g.matmul(e_obs, w_obs)?;
    if let Some(&w_time) = ids.get(&format!("{name}.film_time.w")) {
        let t = t_emb.ok_or_else(|| Error::InvalidShape {
            op: "film",
            shape: vec![],
            reason: format!("{name} has a time branch but no time embedding was given"),
        })?;
        let tb = g.matmul(t, w_time)?;
        gb = g.add(gb, tb)?;
    }
    let b = id(ids, &format!("{name}.film.b"))?;
    let gb = g.add(gb, b)?;
    let c = g.value(x).shape()[1];
    let gamma = g.slice(gb, 1, 0, c)?;
    let beta = g.slice(gb, 1, c, c)?;
    let h = rows_of(g, x)?;
    let gamma = row_broadcast(g, gamma, h)?;
    let beta = row_broadcast(g, beta, h)?;
    let scaled = g.mul(x, gamma)?;
    let y = g.add(x, scaled)?;
    g.add(y, beta)
}

/// Average-pools rows by 2: `[H, C] → [H/2, C]`. H must be even.
pub fn avg_pool2(g: &mut Graph, x: ValueId) -> Result<ValueId> {
    let h = rows_of(g, x)?;
    if h % 2 != 0 {
        return Err(Error::InvalidShape {
            op: "avg-pool2",
            shape: g.value(x).shape().to_vec(),
            reason: "row count must be even".to_string(),
        });
    }
    let mut p = vec![0.0; (h / 2) * h];
    for i in 0..h / 2 {
        p[i * h + 2 * i] = 0.5;
        p[i * h + 2 * i + 1] = 0.5;
    }
    let pm = g.constant(vec![h / 2, h], p)?;
    g.matmul(pm, x)
}

/// Nearest-neighbor upsample of rows by 2: `[H, C] → [2H, C]`.
pub fn upsample2(g: &mut Graph, x: ValueId) -> Result<ValueId> {
    let h = rows_of(g, x)?;
    let mut u = vec![0.0; (2 * h) * h];
    for i in 0..2 * h {
        u[i * h + i / 2] = 1.0;
    }
    let um = g.constant(vec![2 * h, h], u)?;
    g.matmul(um, x)
}

/// Global mixing across rows: `y = W_mix · x` with `{name}.w` of `[H, H]`.
pub fn time_mix(g: &mut Graph, ids: &Ids, name: &str, x: ValueId) -> Result<ValueId> {
    let w = id(ids, &format!("{name}.w"))?;
    g.matmul(w, x)
}

/// Spreads a `[1, 1]` scalar over `[rows, cols]`.
pub fn broadcast_scalar(g: &mut Graph, s: ValueId, rows: usize, cols: usize) -> Result<ValueId> {
    let col = g.constant(vec![rows, 1], vec![1.0; rows])?;
    let tall = g.matmul(col, s)?;
    let row = g.constant(vec![1, cols], vec![1.0; cols])?;
    g.matmul(tall, row)
}
