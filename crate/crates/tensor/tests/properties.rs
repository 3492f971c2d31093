//! Algebraic properties of the dense kernels.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vemkd_tensor::{Graph, Tensor};

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn matmul_matches_naive_product(m in 1usize..7, k in 1usize..7, n in 1usize..7, seed in any::<u64>()) {
        let a = randn(&[m, k], seed);
        let b = randn(&[k, n], seed ^ 1);
        let c = a.matmul(&b);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|l| a.data()[i * k + l] * b.data()[l * n + j]).sum();
                prop_assert!((c.data()[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv2d_is_linear_in_its_input(
        stride in 1usize..3,
        pad in 0usize..2,
        alpha in -2.0f64..2.0,
        seed in any::<u64>(),
    ) {
        let x = randn(&[2, 3, 6, 6], seed);
        let y = randn(&[2, 3, 6, 6], seed ^ 1);
        let w = randn(&[4, 3, 3, 3], seed ^ 2);
        let g = Graph::new();
        let wv = g.constant(w);
        let conv = |t: Tensor<f64>| g.value(g.conv2d(g.constant(t), wv, None, stride, pad)).clone();
        let mixed = conv(x.scale(alpha).zip_map(&y, |a, b| a + b));
        let parts = conv(x).scale(alpha).zip_map(&conv(y), |a, b| a + b);
        prop_assert_eq!(mixed.shape(), parts.shape());
        for (a, b) in mixed.data().iter().zip(parts.data()) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn gradient_of_weighted_sum_is_the_weight(seed in any::<u64>()) {
        let x = randn(&[3, 4], seed);
        let c = randn(&[3, 4], seed ^ 1);
        let g = Graph::new();
        let xv = g.variable(x);
        let loss = g.sum(g.mul(xv, g.constant(c.clone())));
        let grads = g.backward(loss);
        prop_assert_eq!(grads.wrt(xv).unwrap().data(), c.data());
    }
}
