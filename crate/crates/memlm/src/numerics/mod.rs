//! Dense tensors, reverse-mode differentiation, and the finite-difference
//! verification oracle. Everything downstream builds on this module.

pub mod grad_check;
pub mod kernels;
pub mod params;
pub mod tape;
pub mod tensor;

pub use grad_check::{grad_check, GradCheckReport};
pub use params::{ParamId, ParamSet};
pub use tape::{SoftmaxDiag, Tape, Var};
pub use tensor::{Real, Tensor};

#[cfg(test)]
mod prop_tests {
    use super::*;
    use proptest::prelude::*;

    fn small_matrix() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
        (1usize..5, 1usize..6).prop_flat_map(|(r, c)| {
            proptest::collection::vec(-5.0f64..5.0, r * c).prop_map(move |v| (r, c, v))
        })
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one((r, c, data) in small_matrix()) {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(Tensor::new(vec![r, c], data).unwrap(), false);
            let (y, diag) = tape.softmax_rows(x, None, None).unwrap();
            prop_assert!(diag.fully_masked_rows.is_empty());
            for row in 0..r {
                let s: f64 = tape.value(y).row(row).iter().sum();
                prop_assert!((s - 1.0).abs() < 1e-5);
            }
        }

        #[test]
        fn extreme_inputs_stay_finite((r, c, data) in small_matrix(), scale in 1.0f64..1e9) {
            let scaled: Vec<f64> = data.iter().map(|v| v * scale).collect();
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(Tensor::new(vec![r, c], scaled).unwrap(), false);
            let s = tape.sigmoid(x);
            let t = tape.tanh(x);
            let (sm, _) = tape.softmax_rows(x, None, None).unwrap();
            prop_assert!(tape.value(s).first_non_finite().is_none());
            prop_assert!(tape.value(t).first_non_finite().is_none());
            prop_assert!(tape.value(sm).first_non_finite().is_none());
        }

        #[test]
        fn matmul_identity_is_exact((r, c, data) in small_matrix()) {
            let mut tape = Tape::<f64>::new();
            let x = tape.leaf(Tensor::new(vec![r, c], data.clone()).unwrap(), false);
            let i = tape.leaf(Tensor::identity_rows(r, r), false);
            let y = tape.matmul(i, x).unwrap();
            prop_assert_eq!(tape.value(y).data(), &data[..]);
        }
    }

    /// Every differentiable op: analytic backward vs central differences on
    /// random small shapes, in f64.
    #[test]
    fn all_ops_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);

        // Each case: (name, builder) where builder maps leaf vars to a scalar.
        type Builder = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>;
        let sum_of = |tape: &mut Tape<f64>, v: Var| tape.sum_all(v);

        let cases: Vec<(&str, Vec<Vec<usize>>, Builder)> = vec![
            ("matmul", vec![vec![3, 4], vec![4, 2]], Box::new(move |t, v| {
                let y = t.matmul(v[0], v[1]).unwrap();
                // square the output so the gradient depends on values
                let sq = t.mul(y, y).unwrap();
                sum_of(t, sq)
            })),
            ("matmul_tb", vec![vec![3, 4], vec![2, 4]], Box::new(move |t, v| {
                let y = t.matmul_tb(v[0], v[1]).unwrap();
                let sq = t.mul(y, y).unwrap();
                sum_of(t, sq)
            })),
            ("transpose", vec![vec![3, 2]], Box::new(move |t, v| {
                let y = t.transpose(v[0]).unwrap();
                let sq = t.mul(y, y).unwrap();
                sum_of(t, sq)
            })),
            ("sigmoid", vec![vec![2, 3]], Box::new(move |t, v| {
                let y = t.sigmoid(v[0]);
                let sq = t.mul(y, y).unwrap();
                sum_of(t, sq)
            })),
            ("tanh", vec![vec![2, 3]], Box::new(move |t, v| {
                let y = t.tanh(v[0]);
                let sq = t.mul(y, y).unwrap();
                sum_of(t, sq)
            })),
            ("silu", vec![vec![2, 3]], Box::new(move |t, v| {
                let y = t.silu(v[0]);
                let sq = t.mul(y, y).unwrap();
                sum_of(t, sq)
            })),
            ("rms_norm", vec![vec![3, 4], vec![4]], Box::new(move |t, v| {
                let y = t.rms_norm(v[0], v[1], 1e-6).unwrap();
                let sq = t.mul(y, y).unwrap();
                sum_of(t, sq)
            })),
            ("softmax", vec![vec![3, 4]], Box::new(move |t, v| {
                let (y, _) = t.softmax_rows(v[0], None, None).unwrap();
                let sq = t.mul(y, y).unwrap();
                sum_of(t, sq)
            })),
            ("softmax_topk", vec![vec![3, 5]], Box::new(move |t, v| {
                let (y, _) = t.softmax_rows(v[0], None, Some(3)).unwrap();
                let sq = t.mul(y, y).unwrap();
                sum_of(t, sq)
            })),
            ("rope", vec![vec![3, 8]], Box::new(move |t, v| {
                let y = t.rope(v[0], 2, 5, 10000.0).unwrap();
                let sq = t.mul(y, y).unwrap();
                sum_of(t, sq)
            })),
            ("add_bias", vec![vec![3, 4], vec![4]], Box::new(move |t, v| {
                let y = t.add_bias(v[0], v[1]).unwrap();
                let sq = t.mul(y, y).unwrap();
                sum_of(t, sq)
            })),
            ("normalize_rows", vec![vec![3, 4]], Box::new(move |t, v| {
                // keep inputs positive so the row-sum branch is stable under ±h
                let p = t.sigmoid(v[0]);
                let y = t.normalize_rows(p, 1e-8).unwrap();
                let sq = t.mul(y, y).unwrap();
                sum_of(t, sq)
            })),
            ("cross_entropy", vec![vec![3, 5]], Box::new(move |t, v| {
                t.cross_entropy_mean(v[0], vec![0, 1, 2], vec![1, 4, 0]).unwrap()
            })),
            ("concat_slice", vec![vec![2, 3], vec![2, 3]], Box::new(move |t, v| {
                let rows = t.concat_rows(&[v[0], v[1]]).unwrap();
                let cols = t.concat_cols(&[v[0], v[1]]).unwrap();
                let sl = t.slice_cols(cols, 1, 4).unwrap();
                let a = t.sum_all(rows);
                let sq = t.mul(sl, sl).unwrap();
                let b = t.sum_all(sq);
                t.add(a, b).unwrap()
            })),
        ];

        for (name, shapes, builder) in cases {
            let mut ps = ParamSet::<f64>::new();
            let ids: Vec<_> = shapes
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let data: Vec<f64> = (0..s.iter().product::<usize>())
                        .map(|_| rng.gen_range(-1.5..1.5))
                        .collect();
                    ps.register(&format!("p{i}"), Tensor::new(s.clone(), data).unwrap(), false)
                })
                .collect();

            let run = |p: &ParamSet<f64>| -> (f64, Vec<Option<Tensor<f64>>>) {
                let mut tape = Tape::new();
                let vars: Vec<Var> = ids.iter().map(|&id| tape.param_var(p, id)).collect();
                let loss = builder(&mut tape, &vars);
                let value = tape.value(loss).data()[0];
                tape.backward(loss).unwrap();
                let grads = ids
                    .iter()
                    .map(|&id| tape.grad_tensor(vars[id.index()]))
                    .collect();
                (value, grads)
            };
            let (_, grads) = run(&ps);
            let mut loss_fn = |p: &ParamSet<f64>| Ok(run(p).0);
            let report =
                grad_check(&mut ps, &mut loss_fn, &grads, 1e-6, 1e-5, 1234).unwrap();
            assert!(report.pass(), "op {name} failed FD check:\n{}", report.summary());
        }
    }
}
