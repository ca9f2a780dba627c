//! Data-space CFM loss over a batch: ‖D_θ(τ_t, t, E_obs) − τ_1‖².

use std::collections::BTreeMap;

use crate::diffcore::{Graph, Tensor, ValueId};
use crate::encoder::{ObsEncoder, RawObservation};
use crate::error::Result;
use crate::nets::{row_broadcast, sinusoidal_time_features, TeacherNet, TIME_FEATURES};

/// Probability that the τ_t input is replaced by the learned mask row.
/// Zero until t = 0.5, then linear up to 1 at t = 1: late-time predictions
/// must come from the observation, not from peeking at τ_t ≈ τ_1.
pub fn mask_probability(t: f64) -> f64 {
    ((t - 0.5) / 0.5).clamp(0.0, 1.0)
}

/// One prepared training example (already normalized).
#[derive(Debug, Clone)]
pub struct BatchItem {
    pub obs: RawObservation,
    /// Interpolated point on the noise→data path, `[H, A]`.
    pub tau_t: Tensor,
    pub t: f64,
    /// When set, the network sees the mask embedding instead of `tau_t`.
    pub masked: bool,
    /// τ_1 target, `[H, A]`.
    pub target: Tensor,
}

/// Records the mean batch loss on `g`. `ids` must contain every teacher and
/// encoder parameter (register both sets before calling).
pub fn cfm_loss(
    g: &mut Graph,
    ids: &BTreeMap<String, ValueId>,
    teacher: &TeacherNet,
    encoder: &ObsEncoder,
    items: &[BatchItem],
) -> Result<ValueId> {
    let h = teacher.dims().horizon;
    let mut total: Option<ValueId> = None;
    for item in items {
        let e = encoder.forward(g, ids, &item.obs)?.e_obs;
        let tau_in = if item.masked {
            row_broadcast(g, ids["mask.embed"], h)?
        } else {
            g.input(&item.tau_t)
        };
        let feats = sinusoidal_time_features(item.t)?;
        let tf = g.constant(vec![1, TIME_FEATURES], feats)?;
        let pred = teacher.forward(g, ids, tau_in, tf, e)?;
        let tgt = g.input(&item.target);
        let li = g.squared_error(pred, tgt)?;
        total = Some(match total {
            Some(acc) => g.add(acc, li)?,
            None => li,
        });
    }
    let total = total.ok_or(crate::error::Error::EmptySet("cfm_loss"))?;
    g.scale(total, 1.0 / items.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cfm::{interpolate_path, sample_tau0};
    use crate::diffcore::{finite_diff_check, Precision};
    use crate::encoder::EncoderDims;
    use crate::nets::NetDims;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mask_probability_ramp() {
        assert_eq!(mask_probability(0.0), 0.0);
        assert_eq!(mask_probability(0.5), 0.0);
        assert_eq!(mask_probability(0.75), 0.5);
        assert_eq!(mask_probability(1.0), 1.0);
        assert_eq!(mask_probability(0.25), 0.0);
    }

    fn tiny() -> (TeacherNet, ObsEncoder, NetDims, EncoderDims) {
        let ed = crate::encoder::tests::tiny_dims();
        let nd = NetDims {
            horizon: 8,
            action_dim: 2,
            c1: 4,
            c2: 6,
            obs_dim: ed.obs_dim(),
            time_dim: 6,
        };
        let t = TeacherNet::new(nd, 51, Precision::Extended64).unwrap();
        let e = ObsEncoder::new(ed, 52, Precision::Extended64).unwrap();
        (t, e, nd, ed)
    }

    fn items(nd: &NetDims, ed: &EncoderDims, masked: bool) -> Vec<BatchItem> {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        (0..2)
            .map(|i| {
                let obs = crate::encoder::tests::random_obs(ed, 60 + i);
                let target = sample_tau0(&mut rng, nd.horizon, nd.action_dim, Precision::Extended64);
                let tau0 = sample_tau0(&mut rng, nd.horizon, nd.action_dim, Precision::Extended64);
                let t = 0.3 + 0.2 * i as f64;
                let tau_t = interpolate_path(&tau0, &target, t).unwrap();
                BatchItem { obs, tau_t, t, masked, target }
            })
            .collect()
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        let (teacher, encoder, nd, ed) = tiny();
        let batch = items(&nd, &ed, false);
        let mut all = teacher.params().map().clone();
        all.extend(encoder.params().map().clone());
        let report = finite_diff_check(&all, 1, 71, |g, p| {
            let mut ids = BTreeMap::new();
            for (name, t) in p {
                ids.insert(name.clone(), g.param(name, t)?);
            }
            cfm_loss(g, &ids, &teacher, &encoder, &batch)
        })
        .unwrap();
        assert!(
            report.passes(),
            "rel err {} at {}[{}]",
            report.max_rel_err,
            report.worst_param,
            report.worst_index
        );
    }

    #[test]
    fn masked_items_train_the_mask_embedding() {
        let (teacher, encoder, nd, ed) = tiny();
        let batch = items(&nd, &ed, true);
        let mut g = Graph::new(Precision::Extended64);
        let mut ids = teacher.params().register(&mut g).unwrap();
        ids.extend(encoder.params().register(&mut g).unwrap());
        let loss = cfm_loss(&mut g, &ids, &teacher, &encoder, &batch).unwrap();
        let grads = g.backward(loss).unwrap();
        let mask_grad = &grads["mask.embed"];
        assert!(
            mask_grad.data().iter().any(|&x| x != 0.0),
            "mask embedding got no gradient from masked items"
        );
    }

    #[test]
    fn unmasked_items_leave_mask_embedding_alone() {
        let (teacher, encoder, nd, ed) = tiny();
        let batch = items(&nd, &ed, false);
        let mut g = Graph::new(Precision::Extended64);
        let mut ids = teacher.params().register(&mut g).unwrap();
        ids.extend(encoder.params().register(&mut g).unwrap());
        let loss = cfm_loss(&mut g, &ids, &teacher, &encoder, &batch).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads["mask.embed"].data().iter().all(|&x| x == 0.0));
    }
}
