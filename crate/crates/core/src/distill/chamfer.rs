//! Bi-directional Chamfer distance between trajectory sets.
//!
//! C(A, B) = (1/|A|) Σ_a min_b ‖a−b‖² + (1/|B|) Σ_b min_a ‖a−b‖², on the
//! flattened trajectories. Minima are hard; ties resolve to the lowest index.
//! Per-direction sums are accumulated over value-sorted terms, which makes
//! the result exactly invariant to element order within each set.

use crate::diffcore::{Graph, Precision, Tensor, ValueId};
use crate::error::{Error, Result};

pub fn squared_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lower-triangular ones scaled by 1/h. Left-multiplying a delta trajectory
/// gives its running path (start-relative waypoints, shrunk to O(1)) — the
/// space matching and mode metrics work in, where homotopy-distinct modes
/// stay far apart while per-step jitter stays small.
pub fn path_matrix(h: usize, precision: Precision) -> Tensor {
    let c = precision.quantize(1.0 / h as f64);
    let mut data = vec![0.0; h * h];
    for i in 0..h {
        for j in 0..=i {
            data[i * h + j] = c;
        }
    }
    Tensor::new(vec![h, h], data, precision).unwrap()
}

/// Value-space `path_matrix · t`, bit-identical to the in-graph matmul.
pub fn path_embed(t: &Tensor) -> Result<Tensor> {
    let s = t.shape();
    if s.len() != 2 {
        return Err(Error::InvalidShape {
            op: "path_embed",
            shape: s.to_vec(),
            reason: "expected [h, a]".into(),
        });
    }
    let (h, a) = (s[0], s[1]);
    let c = t.precision().quantize(1.0 / h as f64);
    let d = t.data();
    let mut out = vec![0.0; h * a];
    for j in 0..a {
        let mut acc = 0.0;
        for i in 0..h {
            acc += c * d[i * a + j];
            out[i * a + j] = acc;
        }
    }
    Tensor::new(s.to_vec(), out, t.precision())
}

/// Index of the nearest element of `set` (ties → lowest index).
fn nearest(x: &[f64], set: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for (j, y) in set.iter().enumerate() {
        let d = squared_dist(x, y);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn ordered_sum(mut terms: Vec<f64>) -> f64 {
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

/// Value-only Chamfer distance over flattened trajectories.
pub fn chamfer_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySet("chamfer_distance"));
    }
    let fwd: Vec<f64> = a.iter().map(|x| nearest(x, b).1).collect();
    let bwd: Vec<f64> = b.iter().map(|y| nearest(y, a).1).collect();
    Ok(ordered_sum(fwd) / a.len() as f64 + ordered_sum(bwd) / b.len() as f64)
}

/// Records the Chamfer loss between generated trajectories (graph values,
/// differentiable) and fixed targets. Argmin pairs are chosen from current
/// forward values; gradients flow only through those selected pairs.
pub fn chamfer_loss(g: &mut Graph, generated: &[ValueId], targets: &[Tensor]) -> Result<ValueId> {
    if generated.is_empty() || targets.is_empty() {
        return Err(Error::EmptySet("chamfer_loss"));
    }
    let gen_vals: Vec<Vec<f64>> = generated.iter().map(|&id| g.value(id).data().to_vec()).collect();
    let tgt_vals: Vec<Vec<f64>> = targets.iter().map(|t| t.data().to_vec()).collect();

    let mut terms: Vec<ValueId> = Vec::new();
    // generated → nearest target
    for (i, &gid) in generated.iter().enumerate() {
        let (j, _) = nearest(&gen_vals[i], &tgt_vals);
        let tgt = g.input(&targets[j]);
        terms.push(pair_dist(g, gid, tgt, 1.0 / generated.len() as f64)?);
    }
    // target → nearest generated
    for (j, tgt_val) in tgt_vals.iter().enumerate() {
        let (i, _) = nearest(tgt_val, &gen_vals);
        let tgt = g.input(&targets[j]);
        terms.push(pair_dist(g, generated[i], tgt, 1.0 / targets.len() as f64)?);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(total)
}

fn pair_dist(g: &mut Graph, x: ValueId, y: ValueId, weight: f64) -> Result<ValueId> {
    let diff = g.sub(x, y)?;
    let sq = g.mul(diff, diff)?;
    let s = g.sum(sq)?;
    g.scale(s, weight)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Precision;
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_sets(rng: &mut ChaCha8Rng, na: usize, nb: usize, d: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut draw = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect()
        };
        (draw(na), draw(nb))
    }

    /// Straight-line reference: no sorting tricks, separate code path.
    fn brute_force(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
        let min_to = |x: &[f64], set: &[Vec<f64>]| -> f64 {
            set.iter()
                .map(|y| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>())
                .fold(f64::INFINITY, f64::min)
        };
        a.iter().map(|x| min_to(x, b)).sum::<f64>() / a.len() as f64
            + b.iter().map(|y| min_to(y, a)).sum::<f64>() / b.len() as f64
    }

    #[test]
    fn matches_brute_force_on_200_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for case in 0..200 {
            let na = rng.gen_range(1..8);
            let nb = rng.gen_range(1..8);
            let d = rng.gen_range(1..12);
            let (a, b) = rand_sets(&mut rng, na, nb, d);
            let got = chamfer_distance(&a, &b).unwrap();
            let want = brute_force(&a, &b);
            assert!((got - want).abs() < 1e-6, "case {case}: {got} vs {want}");
        }
    }

    #[test]
    fn symmetry_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let (a, b) = rand_sets(&mut rng, 5, 3, 6);
            let ab = chamfer_distance(&a, &b).unwrap();
            let ba = chamfer_distance(&b, &a).unwrap();
            assert_eq!(ab.to_bits(), ba.to_bits());
        }
    }

    #[test]
    fn permutation_invariance_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (a, b) = rand_sets(&mut rng, 7, 5, 4);
        let base = chamfer_distance(&a, &b).unwrap();
        for s in 0..10 {
            let mut pa = a.clone();
            let mut pb = b.clone();
            let mut prng = ChaCha8Rng::seed_from_u64(s);
            pa.shuffle(&mut prng);
            pb.shuffle(&mut prng);
            let got = chamfer_distance(&pa, &pb).unwrap();
            assert_eq!(base.to_bits(), got.to_bits(), "permutation {s}");
        }
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let a = vec![vec![1.0, 2.0], vec![-0.5, 0.25]];
        assert_eq!(chamfer_distance(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        // two equidistant targets; gradient must flow to the first
        let x = Tensor::new(vec![1], vec![0.0], Precision::Extended64).unwrap();
        let t1 = Tensor::new(vec![1], vec![1.0], Precision::Extended64).unwrap();
        let t2 = Tensor::new(vec![1], vec![-1.0], Precision::Extended64).unwrap();
        let mut g = Graph::new(Precision::Extended64);
        let xi = g.param("x", &x).unwrap();
        let loss = chamfer_loss(&mut g, &[xi], &[t1, t2]).unwrap();
        // gen→tgt picks t1 (index 0); both targets pick the only generated
        // C = 1/1·1 + 1/2·(1 + 1) = 2
        assert_eq!(g.value(loss).data()[0], 2.0);
        let grads = g.backward(loss).unwrap();
        // d/dx [ (x−1)² + ½(x−1)² + ½(x+1)² ] at 0 = −2 −1 + 1 = −2
        assert_eq!(grads["x"].data()[0], -2.0);
    }

    #[test]
    fn graph_loss_agrees_with_value_version() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let (a, b) = rand_sets(&mut rng, 4, 6, 8);
            let mut g = Graph::new(Precision::Extended64);
            let gen_ids: Vec<ValueId> = a
                .iter()
                .enumerate()
                .map(|(i, row)| {
                    let t = Tensor::new(vec![8], row.clone(), Precision::Extended64).unwrap();
                    g.param(&format!("g{i}"), &t).unwrap()
                })
                .collect();
            let tgts: Vec<Tensor> = b
                .iter()
                .map(|row| Tensor::new(vec![8], row.clone(), Precision::Extended64).unwrap())
                .collect();
            let loss = chamfer_loss(&mut g, &gen_ids, &tgts).unwrap();
            let want = chamfer_distance(&a, &b).unwrap();
            let got = g.value(loss).data()[0];
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::diffcore::finite_diff_check;
        use std::collections::BTreeMap;

        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (a, b) = rand_sets(&mut rng, 3, 4, 5);
        let mut params = BTreeMap::new();
        for (i, row) in a.iter().enumerate() {
            params.insert(
                format!("g{i}"),
                Tensor::new(vec![5], row.clone(), Precision::Extended64).unwrap(),
            );
        }
        let tgts: Vec<Tensor> = b
            .iter()
            .map(|row| Tensor::new(vec![5], row.clone(), Precision::Extended64).unwrap())
            .collect();
        let report = finite_diff_check(&params, 16, 17, |g, p| {
            let ids: Vec<ValueId> = (0..p.len())
                .map(|i| g.param(&format!("g{i}"), &p[&format!("g{i}")]))
                .collect::<Result<_>>()?;
            chamfer_loss(g, &ids, &tgts)
        })
        .unwrap();
        assert!(report.passes(), "rel err {}", report.max_rel_err);
    }

    #[test]
    fn covering_direction_penalizes_missed_targets() {
        // one generated point sitting on target 1; target 2 far away
        let a = vec![vec![0.0, 0.0]];
        let b = vec![vec![0.0, 0.0], vec![10.0, 0.0]];
        let d = chamfer_distance(&a, &b).unwrap();
        // gen→tgt: 0; tgt→gen: (0 + 100)/2
        assert_eq!(d, 50.0);
    }

    #[test]
    fn empty_sets_rejected() {
        let a: Vec<Vec<f64>> = vec![];
        let b = vec![vec![0.0]];
        assert!(chamfer_distance(&a, &b).is_err());
        assert!(chamfer_distance(&b, &a).is_err());
    }

    #[test]
    fn path_embed_hand_values() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 0.0, 1.0, 2.0], Precision::Extended64).unwrap();
        let w = path_embed(&t).unwrap();
        assert_eq!(w.data(), &[0.5, 0.0, 1.0, 1.0]);
        assert!(path_embed(&Tensor::new(vec![4], vec![0.0; 4], Precision::Extended64).unwrap()).is_err());
    }

    #[test]
    fn path_embed_matches_graph_matmul_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for &(h, a) in &[(8usize, 2usize), (5, 3), (32, 2)] {
            for &prec in &[Precision::Standard32, Precision::Extended64] {
                let data: Vec<f64> = (0..h * a).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let t = Tensor::new(vec![h, a], data, prec).unwrap();
                let mut g = Graph::new(prec);
                let l = g.input(&path_matrix(h, prec));
                let x = g.input(&t);
                let y = g.matmul(l, x).unwrap();
                let want = g.value(y);
                let got = path_embed(&t).unwrap();
                assert!(crate::diffcore::bit_equal(&got, want), "h={h} a={a} {prec:?}");
            }
        }
    }
}
