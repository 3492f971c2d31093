//! Property checks on the losses, metrics, sampler and variational head.

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vemkd_core::distill_losses::{gram, ka_alignment, l1, mse, ssim, total_variation};
use vemkd_core::energy_model::{EnergyModel, EnergyModelConfig};
use vemkd_core::metrics::{frechet_distance, GaussianStats};
use vemkd_core::sampler::{run_chain, InitSource, InitStrategy, SamplerConfig};
use vemkd_core::vem_objective::{vid_nll, GaussianVariationalHead};
use vemkd_core::ImageBatch;
use vemkd_tensor::{Graph, Tensor};

fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::rand_uniform(shape, lo, hi, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn eval1(f: impl FnOnce(&Graph<f64>) -> vemkd_tensor::Var) -> f64 {
    let g = Graph::new();
    let v = f(&g);
    g.item(v)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ssim_is_symmetric_and_bounded(a in any::<u64>(), b in any::<u64>()) {
        let x = rand_tensor(&[2, 3, 12, 12], a, -1.0, 1.0);
        let y = rand_tensor(&[2, 3, 12, 12], b, -1.0, 1.0);
        let xy = eval1(|g| ssim(g, g.constant(x.clone()), g.constant(y.clone())).unwrap());
        let yx = eval1(|g| ssim(g, g.constant(y.clone()), g.constant(x.clone())).unwrap());
        prop_assert!((xy - yx).abs() < 1e-12);
        prop_assert!(xy <= 1.0 + 1e-12);
    }

    #[test]
    fn total_variation_is_nonnegative_and_homogeneous(seed in any::<u64>(), c in -4.0f64..4.0) {
        let x = rand_tensor(&[2, 3, 8, 8], seed, -1.0, 1.0);
        let tv = eval1(|g| total_variation(g, g.constant(x.clone())));
        let tvc = eval1(|g| total_variation(g, g.constant(x.scale(c))));
        prop_assert!(tv >= 0.0);
        prop_assert!((tvc - c.abs() * tv).abs() <= 1e-12 * (1.0 + tv));
    }

    #[test]
    fn kernel_alignment_lies_in_unit_interval(a in any::<u64>(), b in any::<u64>(), n in 2usize..6) {
        let s = rand_tensor(&[n, 4, 3, 3], a, -1.0, 1.0);
        let t = rand_tensor(&[n, 6, 2, 2], b, -1.0, 1.0);
        let st = eval1(|g| ka_alignment(g, g.constant(s.clone()), g.constant(t.clone())).unwrap());
        let ts = eval1(|g| ka_alignment(g, g.constant(t.clone()), g.constant(s.clone())).unwrap());
        prop_assert!((0.0..=1.0 + 1e-12).contains(&st));
        prop_assert!((st - ts).abs() < 1e-12);
    }

    #[test]
    fn gram_is_symmetric(seed in any::<u64>()) {
        let x = rand_tensor(&[3, 5, 4, 4], seed, -1.0, 1.0);
        let g = Graph::new();
        let v = gram(&g, g.constant(x));
        let m = g.value(v).data().to_vec();
        for i in 0..5 {
            for j in 0..5 {
                prop_assert!((m[i * 5 + j] - m[j * 5 + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pointwise_losses_vanish_only_on_equal_inputs(a in any::<u64>(), b in any::<u64>()) {
        let x = rand_tensor(&[2, 3, 4, 4], a, -1.0, 1.0);
        let y = rand_tensor(&[2, 3, 4, 4], b, -1.0, 1.0);
        let d1 = eval1(|g| l1(g, g.constant(x.clone()), g.constant(y.clone())).unwrap());
        let d2 = eval1(|g| mse(g, g.constant(x.clone()), g.constant(y.clone())).unwrap());
        prop_assert!(d1 > 0.0 && d2 > 0.0);
        prop_assert_eq!(eval1(|g| l1(g, g.constant(x.clone()), g.constant(x.clone())).unwrap()), 0.0);
        prop_assert_eq!(eval1(|g| mse(g, g.constant(x.clone()), g.constant(x.clone())).unwrap()), 0.0);
    }

    #[test]
    fn frechet_distance_is_symmetric_and_nonnegative(a in any::<u64>(), b in any::<u64>(), shift in 0.0f64..2.0) {
        let fa = DMatrix::from_row_slice(40, 3, rand_tensor(&[40, 3], a, -1.0, 1.0).data());
        let fb = DMatrix::from_row_slice(40, 3, rand_tensor(&[40, 3], b, -1.0, 1.0).data()).add_scalar(shift);
        let (sa, sb) = (GaussianStats::from_features(&fa).unwrap(), GaussianStats::from_features(&fb).unwrap());
        let ab = frechet_distance(&sa, &sb).unwrap();
        let ba = frechet_distance(&sb, &sa).unwrap();
        prop_assert!(ab >= -1e-9);
        prop_assert!((ab - ba).abs() <= 1e-8 * (1.0 + ab));
    }

    #[test]
    fn vid_nll_ignores_batch_order(seed in any::<u64>(), perm in Just(()).prop_perturb(|_, mut r| {
        let mut p: Vec<usize> = (0..4).collect();
        for i in (1..p.len()).rev() {
            p.swap(i, r.random_range(0..=i));
        }
        p
    })) {
        let head = GaussianVariationalHead::<f64>::build(3, 4, seed);
        let t = rand_tensor(&[4, 3, 6, 6], seed ^ 1, -1.0, 1.0);
        let s = rand_tensor(&[4, 3, 6, 6], seed ^ 2, -1.0, 1.0);
        let nll = |t: &Tensor<f64>, s: &Tensor<f64>| eval1(|g| vid_nll(g, &head, g.constant(t.clone()), g.constant(s.clone())).unwrap());
        let a = nll(&t, &s);
        let b = nll(&t.gather_outer(&perm), &s.gather_outer(&perm));
        prop_assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn clamped_chains_stay_in_range(seed in any::<u64>(), step in 1.0f64..1e4) {
        let model = EnergyModel::<f64>::build(&EnergyModelConfig { base_channels: 2, num_res_blocks: 1, ..Default::default() }, seed).unwrap();
        let s = ImageBatch::new(rand_tensor(&[2, 3, 8, 8], seed ^ 3, -1.0, 1.0)).unwrap();
        let cfg = SamplerConfig { steps: 3, step_size: step, noise_std: 0.05, init: InitStrategy::Uniform, clamp: Some((-1.0, 1.0)), ..Default::default() };
        let chain = run_chain(&s, &model, &cfg, InitSource::Uniform, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert!(chain.final_samples.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        prop_assert_eq!(chain.energies.len(), 4);
    }
}
