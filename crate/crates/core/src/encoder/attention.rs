//! Single-head cross-attention with a residual connection.

use std::collections::BTreeMap;

use crate::diffcore::{Graph, ValueId};
use crate::error::{Error, Result};

/// `out = f + softmax(f·Wq (kv·Wk)ᵀ / √d) · (kv·Wv) · Wo`
///
/// Weights `{name}.wq / .wk / .wv / .wo`, all `[d, d]`.
pub fn cross_attend(
    g: &mut Graph,
    ids: &BTreeMap<String, ValueId>,
    name: &str,
    f: ValueId,
    kv: ValueId,
) -> Result<ValueId> {
    let get = |ids: &BTreeMap<String, ValueId>, m: &str| -> Result<ValueId> {
        ids.get(&format!("{name}.w{m}"))
            .copied()
            .ok_or_else(|| Error::UnknownParam(format!("{name}.w{m}")))
    };
    let d = g.value(f).shape()[1];
    let q = g.matmul(f, get(ids, "q")?)?;
    let k = g.matmul(kv, get(ids, "k")?)?;
    let v = g.matmul(kv, get(ids, "v")?)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / (d as f64).sqrt())?;
    let attn = g.softmax_lastdim(scores)?;
    let mixed = g.matmul(attn, v)?;
    let proj = g.matmul(mixed, get(ids, "o")?)?;
    g.add(f, proj)
}
