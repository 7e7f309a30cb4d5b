//! Dense tensors and a tape-based reverse-mode autodiff engine.
//!
//! Values are `f64`. Kernels are single-threaded, which keeps forward values
//! and gradients bit-identical across runs on one platform.

mod gradcheck;
mod graph;
pub mod kernels;
mod ops;
mod tensor;

pub use gradcheck::finite_difference_check;
pub use graph::{Gradients, Graph, NodeId};
pub use ops::{Axis, Op};
pub use tensor::Tensor;

/// Floor applied to row norms before normalization.
pub const NORM_EPS: f64 = 1e-12;
/// Variance epsilon for batch normalization.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use alloc::vec::Vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn relu_example() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn normalize_example() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_rows(&[&[3.0, 4.0]]).unwrap());
        let y = g.l2_normalize_rows(x).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.6).abs() < 1e-15 && (v[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn normalize_zero_row_stays_finite() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::zeros([2, 3]));
        let y = g.l2_normalize_rows(x).unwrap();
        assert!(g.value(y).all_finite());
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(x).unwrap().all_finite());
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let m = Tensor::from_rows(&[&[1.5, -2.0], &[3.0, 4.25]]).unwrap();
        let a = g.constant(m.clone());
        let y = g.matmul(i, a).unwrap();
        assert_eq!(g.value(y), &m);
    }

    #[test]
    fn shape_errors_name_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros([2, 3]));
        let b = g.constant(Tensor::zeros([2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            crate::Error::Shape {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        let msg = alloc::format!("{err}");
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"));
    }

    #[test]
    fn batch_norm_rejects_single_sample_in_training() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 3]));
        let gamma = g.constant(Tensor::ones([3]));
        let beta = g.constant(Tensor::zeros([3]));
        assert!(g.batch_norm_train(x, gamma, beta, BN_EPS).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);

        let mut g = Graph::new();
        let x = g.parameter(Tensor::vector(vec![0.3, -7.0]).unwrap());
        let loss = g.sum(x).unwrap();
        assert_eq!(g.backward(loss).unwrap().get(x).unwrap().data(), &[1.0, 1.0]);

        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(4.0));
        assert!(g.backward(c).unwrap().is_empty());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.parameter(Tensor::zeros([2]));
        assert_eq!(g.backward(x), Err(crate::Error::NonScalarLoss(vec![2])));
    }

    #[test]
    fn unreachable_parameters_are_absent() {
        let mut g = Graph::new();
        let used = g.parameter(Tensor::ones([2]));
        let unused = g.parameter(Tensor::ones([2]));
        let loss = g.sum(used).unwrap();
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(used).is_some());
        assert!(grads.get(unused).is_none());
    }

    #[test]
    fn gradcheck_examples() {
        let quad = |g: &mut Graph, x: NodeId| {
            let sq = g.mul(x, x)?;
            g.sum(sq)
        };
        let p = Tensor::vector(vec![1.0, 2.0]).unwrap();
        assert!(finite_difference_check(quad, &p, 1e-5).unwrap() < 1e-6);

        let constant = |g: &mut Graph, _x: NodeId| Ok(g.constant(Tensor::scalar(3.0)));
        assert_eq!(finite_difference_check(constant, &p, 1e-5).unwrap(), 0.0);

        assert!(finite_difference_check(quad, &p, 0.0).is_err());
    }

    #[test]
    fn gradcheck_reports_non_finite_coordinate() {
        // log(x) at x = [1, 0]: the second coordinate's perturbation leaves the domain
        let f = |g: &mut Graph, x: NodeId| {
            let l = g.log(x)?;
            g.sum(l)
        };
        let p = Tensor::vector(vec![1.0, 1e-12]).unwrap();
        let err = finite_difference_check(f, &p, 1e-5).unwrap_err();
        assert_eq!(
            err,
            crate::Error::NonFinite {
                context: "finite_difference_check",
                index: 1
            }
        );
    }

    /// Builds a scalar from a node by contracting with fixed random weights,
    /// so that every output coordinate contributes a distinct gradient.
    fn contract(g: &mut Graph, y: NodeId, rng: &mut ChaCha8Rng) -> crate::Result<NodeId> {
        let shape = g.value(y).shape().to_vec();
        let w = g.constant(random(&shape, rng));
        let p = g.mul(y, w)?;
        g.sum(p)
    }

    /// Runs `build` through the finite-difference check at 10 random points.
    fn check_op(
        name: &str,
        shape: &[usize],
        positive: bool,
        build: impl Fn(&mut Graph, NodeId, &mut ChaCha8Rng) -> crate::Result<NodeId>,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..10 {
            let mut point = random(shape, &mut rng);
            if positive {
                point = point.map(|v| v.abs() + 0.5);
            }
            let seed = rng.random::<u64>();
            let err = finite_difference_check(
                |g, x| {
                    let mut r = ChaCha8Rng::seed_from_u64(seed);
                    let y = build(g, x, &mut r)?;
                    contract(g, y, &mut r)
                },
                &point,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{name} trial {trial}: relative error {err}");
        }
    }

    #[test]
    fn every_op_passes_gradient_check() {
        check_op("affine/x", &[3, 4], false, |g, x, r| {
            let w = g.constant(random(&[4, 2], r));
            let b = g.constant(random(&[2], r));
            g.affine(x, w, b)
        });
        check_op("affine/w", &[4, 2], false, |g, w, r| {
            let x = g.constant(random(&[3, 4], r));
            let b = g.constant(random(&[2], r));
            g.affine(x, w, b)
        });
        check_op("affine/b", &[2], false, |g, b, r| {
            let x = g.constant(random(&[3, 4], r));
            let w = g.constant(random(&[4, 2], r));
            g.affine(x, w, b)
        });
        check_op("conv2d/x", &[2, 2, 5, 5], false, |g, x, r| {
            let w = g.constant(random(&[3, 2, 3, 3], r));
            let b = g.constant(random(&[3], r));
            g.conv2d(x, w, b, 2, 1)
        });
        check_op("conv2d/w", &[3, 2, 3, 3], false, |g, w, r| {
            let x = g.constant(random(&[2, 2, 5, 5], r));
            let b = g.constant(random(&[3], r));
            g.conv2d(x, w, b, 1, 1)
        });
        check_op("conv2d/b", &[3], false, |g, b, r| {
            let x = g.constant(random(&[2, 2, 4, 4], r));
            let w = g.constant(random(&[3, 2, 3, 3], r));
            g.conv2d(x, w, b, 1, 0)
        });
        check_op("relu", &[4, 3], false, |g, x, _| g.relu(x));
        check_op("max_pool", &[2, 2, 4, 4], false, |g, x, _| g.max_pool(x, 2, 2));
        check_op("batch_norm/x", &[4, 3, 2, 2], false, |g, x, r| {
            let gamma = g.constant(random(&[3], r));
            let beta = g.constant(random(&[3], r));
            g.batch_norm_train(x, gamma, beta, BN_EPS)
        });
        check_op("batch_norm/gamma", &[3], false, |g, gamma, r| {
            let x = g.constant(random(&[5, 3], r));
            let beta = g.constant(random(&[3], r));
            g.batch_norm_train(x, gamma, beta, BN_EPS)
        });
        check_op("batch_norm_eval/x", &[4, 3], false, |g, x, r| {
            let gamma = g.constant(random(&[3], r));
            let beta = g.constant(random(&[3], r));
            let mean = g.constant(random(&[3], r));
            let var = g.constant(random(&[3], r).map(|v| v.abs() + 0.5));
            g.batch_norm_eval(x, gamma, beta, mean, var, BN_EPS)
        });
        check_op("batch_norm_eval/var", &[3], true, |g, var, r| {
            let x = g.constant(random(&[4, 3], r));
            let gamma = g.constant(random(&[3], r));
            let beta = g.constant(random(&[3], r));
            let mean = g.constant(random(&[3], r));
            g.batch_norm_eval(x, gamma, beta, mean, var, BN_EPS)
        });
        check_op("add", &[3, 2], false, |g, x, r| {
            let c = g.constant(random(&[3, 2], r));
            g.add(x, c)
        });
        check_op("mul", &[3, 2], false, |g, x, r| {
            let c = g.constant(random(&[3, 2], r));
            let y = g.mul(x, c)?;
            g.mul(y, x)
        });
        check_op("scalar_div", &[5], false, |g, x, _| g.scalar_div(x, -0.37));
        check_op("exp", &[5], false, |g, x, _| g.exp(x));
        check_op("log", &[5], true, |g, x, _| g.log(x));
        check_op("sum", &[2, 3], false, |g, x, _| g.sum(x));
        check_op("sum_rows", &[3, 4], false, |g, x, _| g.sum_rows(x));
        check_op("mean", &[3, 4], false, |g, x, _| g.mean(x));
        check_op("l2_normalize_rows", &[4, 3], false, |g, x, _| g.l2_normalize_rows(x));
        check_op("matmul", &[3, 4], false, |g, x, r| {
            let b = g.constant(random(&[4, 2], r));
            let y = g.matmul(x, b)?;
            let xt = g.transpose(x)?;
            let z = g.matmul(xt, x)?;
            let zs = g.sum(z)?;
            let ys = g.sum(y)?;
            let both = g.add(zs, ys)?;
            g.reshape(both, [1, 1])
        });
        check_op("transpose", &[3, 2], false, |g, x, _| g.transpose(x));
        check_op("sq_euclidean_cdist", &[3, 2], false, |g, x, r| {
            let b = g.constant(random(&[4, 2], r));
            let cross = g.sq_euclidean_cdist(x, b)?;
            let own = g.sq_euclidean_cdist(x, x)?;
            let a = g.sum(cross)?;
            let c = g.sum(own)?;
            g.add(a, c)
        });
        check_op("reshape", &[2, 3], false, |g, x, _| g.reshape(x, [3, 2]));
        check_op("slice_rows", &[4, 3], false, |g, x, _| g.slice_rows(x, 1, 3));
        check_op("logsumexp_rows", &[3, 4], false, |g, x, _| g.logsumexp_rows(x));
    }

    #[test]
    fn backward_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let point = random(&[4, 3], &mut rng);
        let (a, b) = (0.7, -2.3);
        let grad_of = |which: u8| {
            let mut g = Graph::new();
            let x = g.parameter(point.clone());
            let f = {
                let e = g.exp(x).unwrap();
                g.sum(e).unwrap()
            };
            let h = {
                let n = g.l2_normalize_rows(x).unwrap();
                let s = g.mul(n, n).unwrap();
                let t = g.mul(s, x).unwrap();
                g.sum(t).unwrap()
            };
            let loss = match which {
                0 => f,
                1 => h,
                _ => {
                    let fa = g.scalar_div(f, 1.0 / a).unwrap();
                    let hb = g.scalar_div(h, 1.0 / b).unwrap();
                    g.add(fa, hb).unwrap()
                }
            };
            g.backward(loss).unwrap().get(x).unwrap().clone()
        };
        let (gf, gh, gc) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..gc.len() {
            let expected = a * gf.data()[i] + b * gh.data()[i];
            assert!((gc.data()[i] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_and_backward_are_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let mut g = Graph::new();
            let x = g.parameter(random(&[2, 1, 6, 6], &mut rng));
            let w = g.parameter(random(&[4, 1, 3, 3], &mut rng));
            let b = g.parameter(random(&[4], &mut rng));
            let y = g.conv2d(x, w, b, 1, 1).unwrap();
            let y = g.relu(y).unwrap();
            let y = g.max_pool(y, 2, 2).unwrap();
            let y = g.reshape(y, [2, 36]).unwrap();
            let y = g.l2_normalize_rows(y).unwrap();
            let loss = g.sum(y).unwrap();
            let grads = g.backward(loss).unwrap();
            let vals: Vec<u64> = [x, w, b]
                .iter()
                .flat_map(|id| grads.get(*id).unwrap().data().to_vec())
                .chain([g.value(loss).item()])
                .map(f64::to_bits)
                .collect();
            vals
        };
        assert_eq!(run(), run());
    }

    proptest::proptest! {
        #[test]
        fn normalized_rows_have_unit_norm(rows in proptest::collection::vec(proptest::collection::vec(-1e3f64..1e3, 4), 1..6)) {
            let n = rows.len();
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let mut g = Graph::new();
            let x = g.constant(Tensor::new([n, 4], flat).unwrap());
            let y = g.l2_normalize_rows(x).unwrap();
            for (i, row) in rows.iter().enumerate() {
                let in_norm = libm::sqrt(row.iter().map(|v| v * v).sum());
                if in_norm > NORM_EPS {
                    let out: f64 = g.value(y).row(i).iter().map(|v| v * v).sum();
                    proptest::prop_assert!((libm::sqrt(out) - 1.0).abs() < 1e-9);
                }
            }
        }
    }
}
