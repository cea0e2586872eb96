//! Dense tensors, a sparse matrix, and the reverse-mode tape the model is
//! built on.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
mod params;
mod sparse;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport, TensorCheck};
pub use params::{Param, ParamId, ParamSet};
pub use sparse::CsrMatrix;
pub use tape::{AttentionSpec, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::error::Error;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let mut tape = Tape::new();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let c = tape.matmul(va, vb).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.get(i, k) * b.get(k, j);
                }
                assert!((tape.value(c).get(i, j) - s).abs() < 1e-12);
            }
        }
        assert!(matches!(tape.matmul(va, va), Err(Error::Shape(_))));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 5, 7);
        let shifted = Tensor::matrix(5, 7, x.data().iter().map(|v| v + 12.5).collect()).unwrap();
        let mut tape = Tape::new();
        let (a, b) = (tape.constant(x), tape.constant(shifted));
        let (sa, sb) = (tape.softmax_rows(a).unwrap(), tape.softmax_rows(b).unwrap());
        for r in 0..5 {
            assert!((tape.value(sa).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert!(tape.value(sa).max_abs_diff(tape.value(sb)) < 1e-12);

        let z = tape.constant(Tensor::zeros(&[1, 4]));
        let sz = tape.softmax_rows(z).unwrap();
        assert_eq!(tape.value(sz).data(), &[0.25; 4]);
    }

    #[test]
    fn uniform_cross_entropy_is_log_classes() {
        for n in [2usize, 4, 30, 1000] {
            let mut tape = Tape::new();
            let l = tape.constant(Tensor::full(&[3, n], 0.7));
            let loss = tape.cross_entropy(l, &[0, n / 2, n - 1]).unwrap();
            assert!((tape.value(loss).item() - (n as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_rejects_out_of_range_target() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::zeros(&[1, 4]));
        assert!(matches!(
            tape.cross_entropy(l, &[4]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::matrix(4, 16, (0..64).map(|_| rng.random_range(-5.0..9.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let (xv, g, b) = (
            tape.constant(x),
            tape.constant(Tensor::full(&[16], 1.0)),
            tape.constant(Tensor::zeros(&[16])),
        );
        let y = tape.layer_norm(xv, g, b).unwrap();
        for r in 0..4 {
            let row = tape.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-6);
            assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn dropout_identity_off_and_rescaled_on() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[10, 10], 1.0));
        assert_eq!(tape.dropout(x, 0.5).unwrap(), x);
        assert!(tape.dropout(x, 1.0).is_err());

        let mut tape = Tape::training(7);
        let x = tape.constant(Tensor::full(&[100, 100], 1.0));
        let y = tape.dropout(x, 0.25).unwrap();
        let vals = tape.value(y).data();
        assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.75).abs() < 1e-15));
        let dropped = vals.iter().filter(|&&v| v == 0.0).count() as f64 / vals.len() as f64;
        assert!((dropped - 0.25).abs() < 0.03);
    }

    #[test]
    fn sum_gradient_is_ones_and_accumulates() {
        let mut ps = ParamSet::new();
        let id = ps.add("p", Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 4.0]).unwrap());
        let mut tape = Tape::new();
        let p = tape.param(&ps, id);
        let s = tape.sum(p).unwrap();
        tape.backward(s, &mut ps).unwrap();
        assert_eq!(ps.grad(id).data(), &[1.0; 6]);
        tape.backward(s, &mut ps).unwrap();
        assert_eq!(ps.grad(id).data(), &[2.0; 6]);
        // non-scalar loss
        assert!(tape.backward(p, &mut ps).is_err());
    }

    #[test]
    fn half_squared_norm_gradient_is_identity() {
        let mut ps = ParamSet::new();
        let v = vec![0.3, -1.2, 2.5, 0.0];
        let id = ps.add("p", Tensor::matrix(1, 4, v.clone()).unwrap());
        let mut tape = Tape::new();
        let p = tape.param(&ps, id);
        let sq = tape.matmul_t(p, p, false, true).unwrap();
        let half = tape.scale(sq, 0.5).unwrap();
        tape.backward(half, &mut ps).unwrap();
        for (g, x) in ps.grad(id).data().iter().zip(&v) {
            assert!((g - x).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_rows_get_no_gradient() {
        let mut ps = ParamSet::new();
        let id = ps.add_with_frozen_rows("emb", Tensor::full(&[3, 2], 1.0), vec![0]);
        let mut tape = Tape::new();
        let e = tape.param(&ps, id);
        let g = tape.gather_rows(e, &[0, 1, 0, 2]).unwrap();
        let s = tape.sum(g).unwrap();
        tape.backward(s, &mut ps).unwrap();
        assert_eq!(ps.grad(id).data(), &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
    }

    /// Exercises every kernel's backward rule in one composite loss.
    fn kernel_zoo(
        ps: &ParamSet,
        ids: &[ParamId],
        graph: &Arc<CsrMatrix>,
        train: Option<&mut ChaCha8Rng>,
    ) -> (Tape, Var) {
        let mut tape = match train {
            Some(rng) => Tape::training(rng.random()),
            None => Tape::new(),
        };
        let [a, b, bias, pos, gamma, beta, s] = [0, 1, 2, 3, 4, 5, 6].map(|i| tape.param(ps, ids[i]));
        let t = &mut tape;
        let x = t.spmm(graph.clone(), a).unwrap(); // 4x3
        let x = t.gather_rows(x, &[3, 1, 2, 0, 1, 3]).unwrap(); // 6x3
        let x = t.add_tiled(x, pos).unwrap(); // pos 3x3
        let x = t.dropout(x, 0.2).unwrap();
        let y = t.matmul(x, b).unwrap(); // 6x3
        let y = t.add_bias(y, bias).unwrap();
        let y = t.gelu(y);
        let y = t.layer_norm(y, gamma, beta).unwrap();
        let att = t
            .attention(
                y,
                x,
                y,
                AttentionSpec {
                    seq_len: 3,
                    heads: 1,
                    causal: true,
                    key_valid: None,
                    dropout: 0.0,
                },
            )
            .unwrap();
        let tr = t.transpose(att).unwrap(); // 3x6
        let back = t.matmul_t(tr, att, false, false).unwrap(); // 3x3
        let sm = t.softmax_rows(back).unwrap();
        let r = t.relu(sm);
        let sg = t.sigmoid(r);
        let sl = t.slice_rows(y, 1, 3).unwrap();
        let sc = t.slice_cols(sl, 0, 1).unwrap(); // 3x1
        let rs = t.row_scale(sg, sc).unwrap();
        let m = t.mean(&[rs, sg, back]).unwrap();
        let cat = t.concat_cols(&[m, sm]).unwrap(); // 3x6
        let rows = t.concat_rows(&[cat, cat]).unwrap(); // 6x6
        let sc_rows = t.scatter_rows(rows, &[5, 0, 2, 1, 4, 6], 7).unwrap();
        let logits = t.scale(sc_rows, 1.7).unwrap();
        let loss = t.cross_entropy(logits, &[0, 1, 2, 3, 4, 5, 0]).unwrap();
        let extra = t.mean(&[s, s]).unwrap();
        let extra = t.sum(extra).unwrap();
        let total = t.add(loss, extra).unwrap();
        (tape, total)
    }

    fn zoo_params(seed: u64) -> (ParamSet, Vec<ParamId>, Arc<CsrMatrix>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let shapes: [(&str, &[usize]); 7] = [
            ("a", &[4, 3]),
            ("b", &[3, 3]),
            ("bias", &[3]),
            ("pos", &[3, 3]),
            ("gamma", &[3]),
            ("beta", &[3]),
            ("s", &[]),
        ];
        let ids = shapes
            .iter()
            .map(|(n, sh)| {
                let len: usize = sh.iter().product();
                let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
                ps.add(*n, Tensor::from_vec(sh, data).unwrap())
            })
            .collect();
        let graph = CsrMatrix::from_sorted_triplets(
            4,
            4,
            [
                (0, 0, 0.5),
                (0, 1, 0.3),
                (1, 0, 0.3),
                (1, 1, 0.2),
                (2, 2, 1.0),
                (2, 3, -0.4),
                (3, 3, 0.9),
            ],
        )
        .unwrap();
        (ps, ids, Arc::new(graph))
    }

    #[test]
    fn every_kernel_passes_finite_differences() {
        let (mut ps, ids, graph) = zoo_params(11);
        let report = finite_diff_check(
            &mut ps,
            |p| Ok(kernel_zoo(p, &ids, &graph, None)),
            GradCheckOptions {
                samples_per_tensor: 50,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn linear_model_is_exact() {
        let mut ps = ParamSet::new();
        let w = ps.add("w", Tensor::matrix(3, 1, vec![0.5, -1.5, 2.0]).unwrap());
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.25]).unwrap();
        let report = finite_diff_check(
            &mut ps,
            |p| {
                let mut t = Tape::new();
                let xv = t.constant(x.clone());
                let wv = t.param(p, w);
                let y = t.matmul(xv, wv)?;
                let s = t.sum(y)?;
                Ok((t, s))
            },
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-10, "{report}");
    }

    #[test]
    fn dropout_left_on_is_refused() {
        let (mut ps, ids, graph) = zoo_params(12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = finite_diff_check(
            &mut ps,
            |p| Ok(kernel_zoo(p, &ids, &graph, Some(&mut rng))),
            GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    proptest! {
        #[test]
        fn gradient_accumulation_doubles(vals in proptest::collection::vec(-3.0f64..3.0, 6)) {
            let mut ps = ParamSet::new();
            let id = ps.add("p", Tensor::matrix(2, 3, vals).unwrap());
            let mut tape = Tape::new();
            let p = tape.param(&ps, id);
            let g = tape.gelu(p);
            let s = tape.softmax_rows(g).unwrap();
            let l = tape.cross_entropy(s, &[1, 2]).unwrap();
            tape.backward(l, &mut ps).unwrap();
            let once = ps.grad(id).clone();
            tape.backward(l, &mut ps).unwrap();
            for (a, b) in ps.grad(id).data().iter().zip(once.data()) {
                prop_assert_eq!(*a, 2.0 * b);
            }
        }
    }
}
