//! Tape-based reverse-mode autodiff, the optimizer, and checkpoint I/O.

mod adam;
mod checkpoint;
mod fdcheck;
mod graph;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, parse_checkpoint, save_checkpoint};
pub use fdcheck::{finite_diff_check, FdReport, FD_EPSILON, FD_REL_TOL};
pub use graph::{GradMap, Graph, OpKind, ValueId};
pub use tensor::{bit_equal, Precision, Tensor};

#[cfg(test)]
mod tests {
    use std::collections::BTreeMap;

    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data, Precision::Extended64).unwrap()
    }

    fn fd_ok<F>(params: BTreeMap<String, Tensor>, build: F)
    where
        F: FnMut(&mut Graph, &BTreeMap<String, Tensor>) -> crate::error::Result<ValueId>,
    {
        let report = finite_diff_check(&params, 64, 7, build).unwrap();
        assert!(
            report.passes(),
            "rel err {} at {}[{}]",
            report.max_rel_err,
            report.worst_param,
            report.worst_index
        );
    }

    #[test]
    fn matmul_matches_hand_product() {
        let mut g = Graph::new(Precision::Extended64);
        let a = g
            .constant(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
            .unwrap();
        let b = g
            .constant(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0])
            .unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = Graph::new(Precision::Extended64);
        let a = g.constant(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = g.constant(vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn gradients_of_each_op_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = rand_tensor(&mut rng, &[4, 3]);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let b = rand_tensor(&mut rng, &[3]);
        let tgt = rand_tensor(&mut rng, &[3, 3]);
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), w);
        params.insert("x".to_string(), x);
        params.insert("b".to_string(), b);

        // matmul + bias-add + gelu + squared-error
        let t1 = tgt.clone();
        fd_ok(params.clone(), move |g, p| {
            let w = g.param("w", &p["w"])?;
            let x = g.param("x", &p["x"])?;
            let b = g.param("b", &p["b"])?;
            let h = g.matmul(x, w)?;
            let h = g.add(h, b)?;
            let h = g.gelu(h)?;
            let t = g.input(&t1);
            g.squared_error(h, t)
        });

        // tanh / mul / scale / mean
        fd_ok(params.clone(), |g, p| {
            let w = g.param("w", &p["w"])?;
            let b2 = g.param("x", &p["x"])?;
            let bt = g.transpose(b2)?;
            let t = g.tanh(w)?;
            let m = g.mul(t, bt)?;
            let s = g.scale(m, -1.7)?;
            g.mean(s)
        });

        // softmax / layernorm / slice / concat / sum
        fd_ok(params.clone(), |g, p| {
            let w = g.param("w", &p["w"])?;
            let sm = g.softmax_lastdim(w)?;
            let ln = g.layernorm(w)?;
            let top = g.slice(sm, 0, 0, 2)?;
            let bot = g.slice(ln, 0, 1, 3)?;
            let cat = g.concat(&[top, bot], 0)?;
            let sq = g.mul(cat, cat)?;
            g.sum(sq)
        });

        // relu at points away from the kink
        fd_ok(params, |g, p| {
            let w = g.param("w", &p["w"])?;
            let shifted = g.scale(w, 3.0)?;
            let r = g.relu(shifted)?;
            g.sum(r)
        });
    }

    #[test]
    fn rowmax_gradient_flows_to_winners_only() {
        let t = Tensor::new(
            vec![3, 2],
            vec![1.0, 5.0, 4.0, 2.0, 3.0, 3.0],
            Precision::Extended64,
        )
        .unwrap();
        let mut g = Graph::new(Precision::Extended64);
        let x = g.param("x", &t).unwrap();
        let m = g.rowmax(x).unwrap();
        assert_eq!(g.value(m).data(), &[4.0, 5.0]);
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads["x"].data(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn rowmax_ties_pick_lowest_row() {
        let t = Tensor::new(vec![2, 1], vec![2.0, 2.0], Precision::Extended64).unwrap();
        let mut g = Graph::new(Precision::Extended64);
        let x = g.param("x", &t).unwrap();
        let m = g.rowmax(x).unwrap();
        let s = g.sum(m).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads["x"].data(), &[1.0, 0.0]);
    }

    #[test]
    fn fanout_accumulates_gradients() {
        // y = sum(x) + sum(x) → dy/dx = 2 everywhere
        let t = Tensor::new(vec![2], vec![0.3, -0.4], Precision::Extended64).unwrap();
        let mut g = Graph::new(Precision::Extended64);
        let x = g.param("x", &t).unwrap();
        let s1 = g.sum(x).unwrap();
        let s2 = g.sum(x).unwrap();
        let y = g.add(s1, s2).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads["x"].data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_consumes_graph() {
        let t = Tensor::scalar(1.0, Precision::Extended64);
        let mut g = Graph::new(Precision::Extended64);
        let x = g.param("x", &t).unwrap();
        let y = g.sum(x).unwrap();
        g.backward(y).unwrap();
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0], Precision::Extended64).unwrap();
        let mut g = Graph::new(Precision::Extended64);
        let x = g.param("x", &t).unwrap();
        let y = g.relu(x).unwrap();
        assert!(matches!(g.backward(y), Err(crate::error::Error::NonScalarLoss { .. })));
    }

    #[test]
    fn param_reregistration_returns_same_id() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0], Precision::Extended64).unwrap();
        let mut g = Graph::new(Precision::Extended64);
        let a = g.param("w", &t).unwrap();
        let b = g.param("w", &t).unwrap();
        assert_eq!(a, b);
        let other = Tensor::new(vec![2], vec![1.0, 3.0], Precision::Extended64).unwrap();
        assert!(g.param("w", &other).is_err());
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0], Precision::Extended64).unwrap();
        let mut g = Graph::new(Precision::Extended64);
        let _u = g.param("unused", &t).unwrap();
        let x = g.param("x", &t).unwrap();
        let y = g.sum(x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads["unused"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn standard32_forward_lands_on_f32_grid() {
        let t = Tensor::new(vec![1], vec![0.1], Precision::Standard32).unwrap();
        let mut g = Graph::new(Precision::Standard32);
        let x = g.input(&t);
        let y = g.scale(x, 0.3).unwrap();
        let got = g.value(y).data()[0];
        assert_eq!(got, (0.1f32 * 0.3f32) as f64);
    }

    #[test]
    fn graph_coerces_leaf_precision() {
        // Leaves are converted to the graph's precision on entry, so mixed
        // inputs can never reach an op.
        let wide = Tensor::new(vec![1], vec![0.1], Precision::Extended64).unwrap();
        let mut g = Graph::new(Precision::Standard32);
        let x = g.input(&wide);
        assert_eq!(g.value(x).precision(), Precision::Standard32);
        assert_eq!(g.value(x).data()[0], 0.1f32 as f64);
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let t = Tensor::new(vec![1], vec![1e308], Precision::Extended64).unwrap();
        let mut g = Graph::new(Precision::Extended64);
        let x = g.input(&t);
        assert!(matches!(
            g.scale(x, 1e308),
            Err(crate::error::Error::NonFinite { .. })
        ));
    }

    #[test]
    fn gradients_are_deterministic_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = rand_tensor(&mut rng, &[6, 6]);
        let run = || {
            let mut g = Graph::new(Precision::Standard32);
            let w32 = w.to_precision(Precision::Standard32);
            let x = g.param("w", &w32).unwrap();
            let h = g.matmul(x, x).unwrap();
            let h = g.gelu(h).unwrap();
            let h = g.layernorm(h).unwrap();
            let l = g.mean(h).unwrap();
            g.backward(l).unwrap()
        };
        let g1 = run();
        let g2 = run();
        assert!(bit_equal(&g1["w"], &g2["w"]));
    }

    #[test]
    fn adam_first_step_matches_hand_trace() {
        // grad 1, lr 0.1: m̂=1, v̂=1 → Δ = −0.1·1/(1+1e-8)
        let mut params = BTreeMap::new();
        params.insert(
            "w".to_string(),
            Tensor::new(vec![1], vec![0.0], Precision::Extended64).unwrap(),
        );
        let mut grads = GradMap::new();
        grads.insert(
            "w".to_string(),
            Tensor::new(vec![1], vec![1.0], Precision::Extended64).unwrap(),
        );
        let mut adam = AdamState::new(AdamConfig { lr: 0.1, ..Default::default() });
        adam.step(&mut params, &grads).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((params["w"].data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // minimize (w − 3)²
        let mut params = BTreeMap::new();
        params.insert(
            "w".to_string(),
            Tensor::new(vec![1], vec![-1.0], Precision::Extended64).unwrap(),
        );
        let mut adam = AdamState::new(AdamConfig { lr: 0.05, ..Default::default() });
        for _ in 0..400 {
            let mut g = Graph::new(Precision::Extended64);
            let w = g.param("w", &params["w"]).unwrap();
            let t = g.constant(vec![1], vec![3.0]).unwrap();
            let l = g.squared_error(w, t).unwrap();
            let grads = g.backward(l).unwrap();
            adam.step(&mut params, &grads).unwrap();
        }
        assert!((params["w"].data()[0] - 3.0).abs() < 0.05);
    }

    #[test]
    fn checkpoint_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.fdck");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = BTreeMap::new();
        for (name, shape) in [("enc.w", vec![3, 4]), ("enc.b", vec![4]), ("head.w", vec![4, 2])] {
            params.insert(
                name.to_string(),
                rand_tensor(&mut rng, &shape).to_precision(Precision::Standard32),
            );
        }
        save_checkpoint(&path, &params).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), params.len());
        for (name, t) in &params {
            assert!(bit_equal(t, &loaded[name]), "{name} changed across roundtrip");
        }
        // Saving twice produces identical bytes.
        let path2 = dir.path().join("net2.fdck");
        save_checkpoint(&path2, &params).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.fdck");
        let mut params = BTreeMap::new();
        params.insert(
            "w".to_string(),
            Tensor::new(vec![2], vec![1.0, 2.0], Precision::Standard32).unwrap(),
        );
        save_checkpoint(&path, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        assert!(parse_checkpoint(&bytes).is_err());
        let good = std::fs::read(&path).unwrap();
        assert!(parse_checkpoint(&good[..good.len() - 2]).is_err());
        let mut padded = good.clone();
        padded.extend_from_slice(&[0, 0]);
        assert!(parse_checkpoint(&padded).is_err());
    }

    #[test]
    fn fd_check_catches_wrong_gradient() {
        // Builder that lies about the loss surface between calls would be
        // caught by the determinism guard; here we verify the rel-err math by
        // checking a correct graph stays tiny.
        let mut params = BTreeMap::new();
        params.insert(
            "w".to_string(),
            Tensor::new(vec![3], vec![0.2, -0.5, 0.9], Precision::Extended64).unwrap(),
        );
        let report = finite_diff_check(&params, 8, 1, |g, p| {
            let w = g.param("w", &p["w"])?;
            let t = g.tanh(w)?;
            let m = g.mul(t, t)?;
            g.sum(m)
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-6);
        assert_eq!(report.entries_checked, 3);
    }
}
