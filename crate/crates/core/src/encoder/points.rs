//! Point-cloud branch: shared per-point MLP, exact max pooling over points.

use std::collections::BTreeMap;

use crate::diffcore::{Graph, ValueId};
use crate::error::Result;
use crate::nets::linear;

/// `[N, 3] → [1, pcd_dim]`; permutation of the N rows leaves the output
/// bit-identical (each row is processed independently, the pool is an exact
/// column-wise max).
pub fn encode_points(
    g: &mut Graph,
    ids: &BTreeMap<String, ValueId>,
    name: &str,
    pts: ValueId,
) -> Result<ValueId> {
    let h = linear(g, ids, &format!("{name}.l1"), pts)?;
    let h = g.gelu(h)?;
    let h = linear(g, ids, &format!("{name}.l2"), h)?;
    g.rowmax(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{bit_equal, Precision, Tensor};
    use crate::nets::{Init, ParamSet};
    use rand::seq::SliceRandom;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> ParamSet {
        let mut ps = ParamSet::new(3, Precision::Standard32);
        ps.init("p.l1.w", &[3, 8], Init::Xavier { fan_in: 3, fan_out: 8 }).unwrap();
        ps.init("p.l1.b", &[8], Init::Zeros).unwrap();
        ps.init("p.l2.w", &[8, 5], Init::Xavier { fan_in: 8, fan_out: 5 }).unwrap();
        ps.init("p.l2.b", &[5], Init::Zeros).unwrap();
        ps
    }

    fn run(ps: &ParamSet, rows: &[[f64; 3]]) -> Tensor {
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        let mut g = Graph::new(Precision::Standard32);
        let ids = ps.register(&mut g).unwrap();
        let pts = g.constant(vec![rows.len(), 3], flat).unwrap();
        let out = encode_points(&mut g, &ids, "p", pts).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn permutation_invariance_is_exact() {
        let ps = params();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<[f64; 3]> = (0..20)
            .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
            .collect();
        let base = run(&ps, &rows);
        for shuffle_seed in 0..5 {
            let mut shuffled = rows.clone();
            let mut srng = ChaCha8Rng::seed_from_u64(shuffle_seed);
            shuffled.shuffle(&mut srng);
            let out = run(&ps, &shuffled);
            assert!(bit_equal(&base, &out), "permutation {shuffle_seed} changed the encoding");
        }
    }

    #[test]
    fn output_shape_is_row_vector() {
        let ps = params();
        let out = run(&ps, &[[0.1, 0.2, 0.3], [0.4, 0.5, 0.6]]);
        assert_eq!(out.shape(), &[1, 5]);
    }

    #[test]
    fn pool_tracks_the_dominant_point() {
        // moving one point far out changes the encoding
        let ps = params();
        let mut rows = vec![[0.0, 0.0, 0.0]; 6];
        let base = run(&ps, &rows);
        rows[3] = [5.0, -5.0, 5.0];
        let moved = run(&ps, &rows);
        assert!(!bit_equal(&base, &moved));
    }
}
