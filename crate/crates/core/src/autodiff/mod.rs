//! Reverse-mode automatic differentiation over dense 2-D `f64` arrays.
//!
//! A [`Graph`] records operations as they are evaluated. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and
//! returns per-node gradients.

mod graph;
mod tensor;

pub use graph::{Grads, Graph, Mode, RunningStats, Var, BN_EPS, BN_MOMENTUM, LOG_CLAMP};
pub use tensor::Tensor;

pub(crate) use graph::stable_sigmoid;


#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        Tensor::new(rows, cols, data).unwrap()
    }

    fn row(v: &[f64]) -> Tensor {
        Tensor::from_rows(&[v.to_vec()]).unwrap()
    }

    #[test]
    fn matmul_sum_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&mut rng, 3, 3);
        let b = random(&mut rng, 3, 3);
        let worst = fd::check(&[a, b], |g, v| {
            let c = g.matmul(v[0], v[1]).unwrap();
            g.sum(c)
        });
        assert!(worst <= 1e-6, "{worst}");
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let x = g.param(Tensor::filled(2, 3, 0.5));
        let l = g.sum(x);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::filled(2, 3, 1.0));
    }

    #[test]
    fn backward_twice_is_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.param(random(&mut rng, 4, 3));
        let s = g.softmax_rows(x);
        let l = g.cross_entropy(s, &[0, 1, 2, 0]).unwrap();
        let a = g.backward(l).unwrap();
        let b = g.backward(l).unwrap();
        assert_eq!(a.get(x), b.get(x));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(2, 2));
        assert!(matches!(g.backward(x), Err(crate::Error::Graph(_))));
    }

    #[test]
    fn grad_reverse_forward_is_identity_and_negates() {
        let mut g = Graph::new();
        let x = g.param(row(&[1.0, 2.0, 3.0]));
        let r = g.grad_reverse(x, 1.0).unwrap();
        assert_eq!(g.value(r), g.value(x));
        let l = g.sum(r);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[-1.0, -1.0, -1.0]);
    }

    #[test]
    fn grad_reverse_rejects_negative_lambda() {
        let mut g = Graph::new();
        let x = g.input(row(&[1.0]));
        assert!(matches!(
            g.grad_reverse(x, -0.1),
            Err(crate::Error::Param(_))
        ));
    }

    #[test]
    fn grad_reverse_half_matches_negated_finite_difference() {
        // Reversal flips the gradient seen by upstream parameters, so the
        // analytic result must equal -0.5 times the plain derivative.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, 5, 4);
        let w_f = random(&mut rng, 4, 3);
        let w_d = random(&mut rng, 3, 1);
        let build = |g: &mut Graph, w_f: Var, w_d: Var, lambda: Option<f64>| {
            let xi = g.input(x.clone());
            let h = g.matmul(xi, w_f).unwrap();
            let h = g.relu(h);
            let h = match lambda {
                Some(l) => g.grad_reverse(h, l).unwrap(),
                None => h,
            };
            let d = g.matmul(h, w_d).unwrap();
            let p = g.sigmoid(d);
            g.binary_cross_entropy(p, &[0.0, 1.0, 0.0, 1.0, 1.0])
                .unwrap()
        };
        let mut g = Graph::new();
        let (a, b) = (g.param(w_f.clone()), g.param(w_d.clone()));
        let l = build(&mut g, a, b, Some(0.5));
        let grads = g.backward(l).unwrap();
        let analytic = grads.get(a).unwrap();
        for e in 0..w_f.len() {
            let loss_at = |delta: f64| {
                let mut w = w_f.clone();
                w.values_mut()[e] += delta;
                let mut g = Graph::new();
                let (a, b) = (g.param(w), g.param(w_d.clone()));
                let l = build(&mut g, a, b, None);
                g.value(l).item().unwrap()
            };
            let numeric = (loss_at(fd::EPS) - loss_at(-fd::EPS)) / (2.0 * fd::EPS);
            assert!(fd::rel_err(analytic.data()[e], -0.5 * numeric) <= 1e-4);
        }
        // The domain-side weights are not reversed.
        let worst = fd::check(std::slice::from_ref(&w_d), |g, v| {
            let wf = g.input(w_f.clone());
            let xi = g.input(x.clone());
            let h = g.matmul(xi, wf).unwrap();
            let h = g.relu(h);
            let h = g.grad_reverse(h, 0.5).unwrap();
            let d = g.matmul(h, v[0]).unwrap();
            let p = g.sigmoid(d);
            g.binary_cross_entropy(p, &[0.0, 1.0, 0.0, 1.0, 1.0])
                .unwrap()
        });
        assert!(worst <= 1e-4, "{worst}");
    }

    #[test]
    fn elementwise_values() {
        let mut g = Graph::new();
        let x = g.input(row(&[-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = g.input(row(&[0.0; 4]));
        let s = g.softmax_rows(z);
        assert_eq!(g.value(s).data(), &[0.25; 4]);
        let zero = g.input(row(&[0.0]));
        let sig = g.sigmoid(zero);
        assert_eq!(g.value(sig).data(), &[0.5]);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut g = Graph::new();
        let x = g.input(row(&[1000.0, 1000.0, -1000.0]));
        let s = g.softmax_rows(x);
        let v = g.value(s).data();
        assert!((v[0] - 0.5).abs() < 1e-12 && v[2] == 0.0);
    }

    #[test]
    fn batch_norm_train_standardizes_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = Graph::new();
        let x = g.input(random(&mut rng, 32, 3).map(|v| 3.0 * v + 1.0));
        let gamma = g.param(Tensor::filled(1, 3, 1.0));
        let beta = g.param(Tensor::zeros(1, 3));
        let mut stats = RunningStats::new(3);
        let y = g
            .batch_norm(x, gamma, beta, &mut stats, Mode::Train)
            .unwrap();
        let t = g.value(y).transpose();
        for c in 0..3 {
            let col = t.row(c);
            let mean = col.iter().sum::<f64>() / 32.0;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 32.0;
            assert!(
                mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-6,
                "{mean} {var}"
            );
        }
        // Running stats moved away from their initial values.
        assert_ne!(stats, RunningStats::new(3));
    }

    #[test]
    fn batch_norm_eval_standardizes_with_running_stats() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_rows(&[vec![1.0, 4.0], vec![3.0, 0.0]]).unwrap());
        let gamma = g.param(Tensor::filled(1, 2, 1.0));
        let beta = g.param(Tensor::zeros(1, 2));
        let mut stats = RunningStats {
            mean: vec![2.0, 2.0],
            var: vec![1.0, 4.0],
        };
        let before = stats.clone();
        let y = g
            .batch_norm(x, gamma, beta, &mut stats, Mode::Eval)
            .unwrap();
        let expect = [-1.0, 1.0, 1.0, -1.0];
        for (a, b) in g.value(y).data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-7);
        }
        assert_eq!(stats, before);
    }

    #[test]
    fn batch_norm_train_rejects_single_row() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(1, 2));
        let gamma = g.param(Tensor::filled(1, 2, 1.0));
        let beta = g.param(Tensor::zeros(1, 2));
        let mut stats = RunningStats::new(2);
        assert!(g
            .batch_norm(x, gamma, beta, &mut stats, Mode::Train)
            .is_err());
    }

    #[test]
    fn batch_norm_gradients_match_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, 6, 3);
            let gamma = random(&mut rng, 1, 3).map(|v| v + 1.5);
            let beta = random(&mut rng, 1, 3);
            let w = random(&mut rng, 3, 2);
            for mode in [Mode::Train, Mode::Eval] {
                let worst = fd::check(&[x.clone(), gamma.clone(), beta.clone()], |g, v| {
                    let mut stats = RunningStats {
                        mean: vec![0.1, -0.2, 0.3],
                        var: vec![0.5, 1.5, 2.0],
                    };
                    let y = g.batch_norm(v[0], v[1], v[2], &mut stats, mode).unwrap();
                    let wv = g.input(w.clone());
                    let z = g.matmul(y, wv).unwrap();
                    let s = g.softmax_rows(z);
                    g.cross_entropy(s, &[0, 1, 1, 0, 1, 0]).unwrap()
                });
                assert!(worst <= 1e-4, "seed {seed} {mode:?}: {worst}");
            }
        }
    }

    #[test]
    fn composite_ops_match_finite_differences() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let a = random(&mut rng, 4, 3);
            let b = random(&mut rng, 1, 3);
            let c = random(&mut rng, 2, 3);
            let worst = fd::check(&[a, b, c], |g, v| {
                let x = g.add_bias(v[0], v[1]).unwrap();
                let x = g.concat_rows(&[x, v[2]]).unwrap();
                let top = g.slice_rows(x, 0, 3).unwrap();
                let bottom = g.slice_rows(x, 3, 6).unwrap();
                let t = g.sigmoid(top);
                let u = g.softmax_rows(bottom);
                let d = g.sub(t, u).unwrap();
                let d = g.abs(d);
                let s = g.scale(d, 0.7);
                let e = g.add(s, t).unwrap();
                let m = g.mean(e);
                let n = g.sum(u);
                let mn = g.concat_rows(&[m, n]).unwrap();
                g.sum(mn)
            });
            assert!(worst <= 1e-4, "seed {seed}: {worst}");
        }
    }

    #[test]
    fn losses_at_reference_points() {
        let mut g = Graph::new();
        let p = g.input(row(&[1.0, 0.0, 0.0, 0.0]));
        let l = g.cross_entropy(p, &[0]).unwrap();
        assert!(g.value(l).item().unwrap().abs() < 1e-12);
        let u = g.input(row(&[0.25; 4]));
        let l = g.cross_entropy(u, &[3]).unwrap();
        assert!((g.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(g.cross_entropy(u, &[4]).is_err());
        let half = g.input(Tensor::filled(1, 1, 0.5));
        let l = g.binary_cross_entropy(half, &[1.0]).unwrap();
        assert!((g.value(l).item().unwrap() - 2f64.ln()).abs() < 1e-12);
        let one = g.input(Tensor::filled(1, 1, 1.0));
        let l = g.binary_cross_entropy(one, &[1.0]).unwrap();
        assert!(g.value(l).item().unwrap() < 1e-11);
    }

    #[test]
    fn cross_entropy_through_softmax_gives_softmax_minus_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let logits = random(&mut rng, 5, 4);
        let labels = [0, 3, 1, 1, 2];
        let mut g = Graph::new();
        let z = g.param(logits.clone());
        let p = g.softmax_rows(z);
        let l = g.cross_entropy(p, &labels).unwrap();
        let grads = g.backward(l).unwrap();
        let probs = g.value(p);
        for (i, &lab) in labels.iter().enumerate() {
            for k in 0..4 {
                let expect = (probs.get(i, k) - f64::from(u8::from(k == lab))) / 5.0;
                assert!((grads.get(z).unwrap().get(i, k) - expect).abs() < 1e-12);
            }
        }
        let worst = fd::check(&[logits], |g, v| {
            let p = g.softmax_rows(v[0]);
            g.cross_entropy(p, &labels).unwrap()
        });
        assert!(worst <= 1e-4);
    }

    #[test]
    fn constant_branches_receive_no_gradient() {
        let mut g = Graph::new();
        let x = g.input(Tensor::filled(2, 2, 1.0));
        let w = g.param(Tensor::filled(2, 2, 0.5));
        let y = g.matmul(x, w).unwrap();
        let l = g.sum(y);
        let grads = g.backward(l).unwrap();
        assert!(grads.get(x).is_none());
        assert!(grads.get(w).is_some());
    }
}
