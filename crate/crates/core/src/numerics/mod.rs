//! Dense f64 tensor algebra, a reverse-mode differentiation tape, the
//! finite-difference gradient oracle, and a mask-aware SGD step.

pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{finite_diff_check, sgd_step, ParamMask, Sgd};
pub use tape::{Tape, TapeMark, Var};
pub use tensor::Tensor;

/// Deterministic per-item seed derivation (splitmix64 over seed ^ index).
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::tape::Tape;
    use super::tensor::Tensor;
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_of_sum_is_ones() {
        let mut t = Tape::new();
        let x = t.leaf(1, 3, vec![5.0, -2.0, 7.0]);
        let s = t.sum_all(x);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_dot_square() {
        // loss = x . x, x = [1, 2] -> grad [2, 4]
        let mut t = Tape::new();
        let x = t.leaf(1, 2, vec![1.0, 2.0]);
        let sq = t.mul(x, x);
        let s = t.sum_all(sq);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn double_backward_is_error() {
        let mut t = Tape::new();
        let x = t.leaf(1, 1, vec![2.0]);
        let s = t.sum_all(x);
        t.backward(s).unwrap();
        assert!(matches!(t.backward(s), Err(crate::error::Error::DoubleBackward)));
    }

    #[test]
    fn rollback_rearms_backward() {
        let mut t = Tape::new();
        let x = t.leaf(1, 1, vec![2.0]);
        let mark = t.mark();
        let s = t.sum_all(x);
        t.backward(s).unwrap();
        t.rollback(mark);
        let s2 = t.scale(x, 3.0);
        let s2 = t.sum_all(s2);
        t.backward(s2).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[3.0]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let x = t.leaf(1, 2, vec![1.0, 2.0]);
        assert!(t.backward(x).is_err());
    }

    #[test]
    fn disconnected_param_has_no_grad() {
        let mut t = Tape::new();
        let x = t.leaf(1, 2, vec![1.0, 2.0]);
        let y = t.leaf(1, 2, vec![3.0, 4.0]);
        let s = t.sum_all(x);
        t.backward(s).unwrap();
        assert!(t.grad(y).is_none());
        let _ = y;
    }

    #[test]
    fn matmul_identity_case() {
        let mut t = Tape::new();
        let i2 = t.constant(&Tensor::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let a = t.constant(&Tensor::new(2, 2, vec![2.0, 3.0, 4.0, 5.0]).unwrap());
        let c = t.matmul(i2, a);
        assert_eq!(t.value(c), &[2.0, 3.0, 4.0, 5.0]);
    }

    #[test]
    fn override_rows_blocks_upstream_grad() {
        let mut t = Tape::new();
        let x = t.leaf(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let r = t.leaf(1, 2, vec![10.0, 20.0]);
        let o = t.override_rows(x, vec![(0, r)]);
        assert_eq!(t.value(o), &[10.0, 20.0, 3.0, 4.0]);
        let s = t.sum_all(o);
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[0.0, 0.0, 1.0, 1.0]);
        assert_eq!(t.grad(r).unwrap(), &[1.0, 1.0]);
    }

    /// Exhaustive finite-difference sweep over every primitive with random
    /// inputs, many seeds. This is the gradient oracle for the whole tape.
    #[test]
    fn every_primitive_matches_finite_differences() {
        for seed in 0..20u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rnd = |rng: &mut ChaCha8Rng, r: usize, c: usize| {
                Tensor::from_raw(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
            };

            // Build one composite graph exercising all primitives; loss is a
            // weighted sum of per-branch scalars so a single backward covers
            // everything.
            let a0 = rnd(&mut rng, 3, 4);
            let b0 = rnd(&mut rng, 4, 2);
            let c0 = rnd(&mut rng, 3, 4);
            let v0 = rnd(&mut rng, 1, 4);
            let g0 = rnd(&mut rng, 1, 4);
            let be0 = rnd(&mut rng, 1, 4);
            let q0 = rnd(&mut rng, 4, 4);
            let ov0 = rnd(&mut rng, 1, 4);
            let params = vec![
                a0.clone(),
                b0.clone(),
                c0.clone(),
                v0.clone(),
                g0.clone(),
                be0.clone(),
                q0.clone(),
                ov0.clone(),
            ];

            let eval = |t: &mut Tape, p: &[Tensor]| {
                let a = t.param(&p[0]);
                let b = t.param(&p[1]);
                let c = t.param(&p[2]);
                let v = t.param(&p[3]);
                let g = t.param(&p[4]);
                let be = t.param(&p[5]);
                let q = t.param(&p[6]);
                let ov = t.param(&p[7]);
                let leaves = vec![a, b, c, v, g, be, q, ov];

                let m1 = t.matmul(a, b); // [3,2]
                let m2 = t.matmul_bt(a, c); // [3,3]
                let s1 = t.sum_all(m1);
                let s2 = t.sum_all(m2);

                let ar = t.add_row(a, v);
                let mu = t.mul(ar, c);
                let ge = t.gelu(mu);
                let ln = t.layer_norm(ge, g, be, 1e-5);
                let sm = t.softmax_rows(ln);
                // weight the softmax output so the branch loss is not the
                // constant sum of row distributions
                let w = t.constant_vec(3, 4, (0..12).map(|i| 0.1 * i as f64).collect());
                let swm = t.mul(sm, w);
                let mr = t.mean_rows(swm);
                let s3 = t.sum_all(mr);

                let at = t.mhsa(q, q, q, 2);
                let s4 = t.sum_all(at);

                let ga = t.gather(a, &[2, 0, 2]);
                let cc = t.concat_rows(ga, a);
                let ovr = t.override_rows(cc, vec![(1, ov)]);
                let sc = t.scale(ovr, 0.7);
                let s5 = t.sum_all(sc);

                let ce = t.cross_entropy_sum(m2, vec![0, 2, 1]);
                let col = t.matmul(a, b); // [3,2] -> use col 0 via gather trick
                let colg = t.gather(col, &[0, 1, 2]);
                let cols = t.mean_rows(colg); // [1,2]
                let scores = t.matmul_bt(b, cols); // [4,1]
                let nce = t.info_nce(scores);
                let tp = t.target_prob(scores, 2);

                let loss = t.weighted_sum(vec![
                    (s1, 0.3),
                    (s2, -0.2),
                    (s3, 1.1),
                    (s4, 0.5),
                    (s5, 0.4),
                    (ce, 0.25),
                    (nce, 0.6),
                    (tp, 2.0),
                ]);
                (loss, leaves)
            };

            let mut tape = Tape::new();
            let (loss, leaves) = eval(&mut tape, &params);
            tape.backward(loss).unwrap();
            let analytic: Vec<Tensor> = leaves
                .iter()
                .map(|&var| {
                    let (r, c) = tape.shape(var);
                    Tensor::from_raw(
                        r,
                        c,
                        tape.grad(var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; r * c]),
                    )
                })
                .collect();

            let err = finite_diff_check(
                &params,
                &analytic,
                |p| {
                    let mut t = Tape::new();
                    let (l, _) = eval(&mut t, p);
                    Ok(t.scalar_value(l))
                },
                1e-6,
                120,
                seed,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: max rel err {err}");
        }
    }
}
