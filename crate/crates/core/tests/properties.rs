use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector};
use patchdiff::coords::{attach_coords_batch, full_grid};
use patchdiff::data_io::{image_to_png_bytes, png_bytes_to_image, RunConfig};
use patchdiff::diffusion::{denoise, score};
use patchdiff::eval::mmd_from_features;
use patchdiff::netgraph::{forward, init_params, NetConfig};
use patchdiff::oracle::{gaussian_score, grid_precision, patch_fit, GaussianModel, SelectionMatrix};
use patchdiff::patching::{patch_size_masses, PatchSchedule};
use patchdiff::sampler::{sigma_schedule, SamplerConfig};
use patchdiff::{DenoiserParams, Error, Purpose, RngKey, Tensor};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn tiny_net(depth: usize) -> NetConfig {
    NetConfig::for_images(3, 4, depth, 1 << depth)
}

fn noisy_params(cfg: &NetConfig, seed: u64) -> DenoiserParams<f64> {
    let mut p = init_params::<f64, _>(cfg, &mut RngKey::new(seed).stream(Purpose::Init, 0, 0)).unwrap();
    let mut rng = RngKey::new(seed).stream(Purpose::Init, 1, 0);
    for name in ["out.conv.weight", "out.conv.bias"] {
        p.get_mut(name)
            .unwrap()
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.1 * rng.sample::<f64, _>(StandardNormal));
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn masses_are_a_distribution(p in 0.0f64..=1.0) {
        let m = patch_size_masses(p);
        prop_assert!(m.iter().all(|&v| v >= 0.0));
        prop_assert!((m.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert_eq!(m[0], p);
    }

    #[test]
    fn cost_fraction_is_monotone_in_p(a in 0.0f64..=1.0, b in 0.0f64..=1.0, k in 2usize..5) {
        let r = 4 << k;
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let f = |p| PatchSchedule::stochastic(p, r).unwrap().expected_cost_fraction();
        prop_assert!(f(lo) <= f(hi) + 1e-15);
    }

    #[test]
    fn progressive_sizes_never_shrink(p in 0.0f64..=1.0, total in 1usize..400) {
        let s = PatchSchedule::progressive(p, 32, total).unwrap();
        let mut rng = RngKey::new(0).stream(Purpose::PatchSize, 0, 0);
        let sizes: Vec<usize> = (0..total).map(|i| s.sample_patch_size(i, &mut rng)).collect();
        prop_assert!(sizes.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(*sizes.last().unwrap(), 32);
    }

    #[test]
    fn schedule_is_monotone_with_exact_endpoints(
        steps in 1usize..80,
        rho in 1.0f64..10.0,
        lo in 0.001f64..0.1,
        span in 1.5f64..1000.0,
    ) {
        let cfg = SamplerConfig { steps, rho, sigma_min: lo, sigma_max: lo * span, ..SamplerConfig::default() };
        let t = sigma_schedule(&cfg).unwrap();
        prop_assert_eq!(t.len(), steps + 1);
        prop_assert_eq!(t[0], cfg.sigma_max);
        prop_assert_eq!(t[steps], 0.0);
        if steps > 1 {
            prop_assert_eq!(t[steps - 1], cfg.sigma_min);
        }
        prop_assert!(t.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn selection_rows_are_orthonormal(picks in proptest::collection::btree_set(0usize..20, 1..20)) {
        let sel = SelectionMatrix::new(picks.iter().copied().collect(), 20).unwrap();
        let p = sel.matrix();
        prop_assert_eq!(&p * p.transpose(), DMatrix::identity(picks.len(), picks.len()));
    }

    #[test]
    fn score_vanishes_at_the_mean(seed in any::<u64>(), side in 1usize..5) {
        let mut rng = RngKey::new(seed).stream(Purpose::Eval, 0, 0);
        let d = side * side;
        let mu = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let model = GaussianModel::new(mu.clone(), grid_precision(side, side, rng.random_range(0.1..2.0), rng.random_range(0.0..1.0))).unwrap();
        prop_assert!(gaussian_score(&model, &mu).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn patch_fit_needs_full_coverage(seed in any::<u64>(), picks in proptest::collection::vec(proptest::collection::btree_set(0usize..9, 1..5), 1..8)) {
        let mut rng = RngKey::new(seed).stream(Purpose::Eval, 0, 0);
        let lambda = grid_precision(3, 3, 1.0, 0.5);
        let n = picks.len();
        let xs: Vec<_> = (0..n).map(|_| DVector::from_fn(9, |_, _| rng.sample::<f64, _>(StandardNormal))).collect();
        let es: Vec<_> = (0..n).map(|_| DVector::from_fn(9, |_, _| rng.sample::<f64, _>(StandardNormal))).collect();
        let sels: Vec<_> = picks.iter().map(|s| SelectionMatrix::new(s.iter().copied().collect(), 9).unwrap()).collect();
        let covered: BTreeSet<usize> = picks.iter().flatten().copied().collect();
        match patch_fit(&lambda, &xs, 1.0, &es, &sels) {
            Ok(mu) => {
                prop_assert_eq!(covered.len(), 9);
                prop_assert!(mu.iter().all(|v| v.is_finite()));
            }
            Err(Error::Identifiability { uncovered }) => {
                let expected: Vec<usize> = (0..9).filter(|i| !covered.contains(i)).collect();
                prop_assert_eq!(uncovered, expected);
            }
            Err(e) => prop_assert!(false, "unexpected error {e}"),
        }
    }

    #[test]
    fn mmd_is_symmetric_and_bounded_below(seed in any::<u64>(), m in 4usize..30, n in 4usize..30) {
        let mut rng = RngKey::new(seed).stream(Purpose::Eval, 0, 0);
        let mut draw = |k: usize| -> Vec<Vec<f64>> {
            (0..k).map(|_| (0..5).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).collect()
        };
        let (xs, ys) = (draw(m), draw(n));
        let ab = mmd_from_features(&xs, &ys).unwrap();
        let ba = mmd_from_features(&ys, &xs).unwrap();
        prop_assert!((ab.mmd2 - ba.mmd2).abs() <= 1e-12 * (1.0 + ab.mmd2.abs()));
        prop_assert!((ab.std_error - ba.std_error).abs() <= 1e-12 * (1.0 + ab.std_error));
        prop_assert!(ab.mmd2 >= -3.0 * ab.std_error);
    }

    #[test]
    fn png_round_trip_is_idempotent(seed in any::<u64>(), h in 1usize..9, w in 1usize..9, c in prop_oneof![Just(1usize), Just(3)]) {
        let mut rng = RngKey::new(seed).stream(Purpose::Data, 0, 0);
        let img = Tensor::from_vec(&[c, h, w], (0..c * h * w).map(|_| rng.random_range(-1.0f32..=1.0)).collect()).unwrap();
        let once = png_bytes_to_image(&image_to_png_bytes(&img).unwrap(), c).unwrap();
        let twice = png_bytes_to_image(&image_to_png_bytes(&once).unwrap(), c).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn config_echo_reparses(p in 0.0f64..=1.0, seed in any::<u32>(), steps in 1usize..200, guidance in 0.0f64..4.0) {
        let overrides = [
            ("train.p".to_string(), p.to_string()),
            ("train.seed".to_string(), seed.to_string()),
            ("sampler.steps".to_string(), steps.to_string()),
            ("sampler.guidance".to_string(), guidance.to_string()),
        ];
        let cfg = RunConfig::parse("", &overrides).unwrap();
        let again = RunConfig::parse(&cfg.to_toml(), &[]).unwrap();
        prop_assert_eq!(&cfg, &again);
        prop_assert_eq!(cfg.digest(), again.digest());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn output_shape_follows_input(depth in 1usize..3, hm in 1usize..5, wm in 1usize..5, b in 1usize..3) {
        let cfg = tiny_net(depth);
        let params = noisy_params(&cfg, depth as u64);
        let (h, w) = (hm * cfg.stride(), wm * cfg.stride());
        let x = Tensor::<f64>::randn(&[b, cfg.in_channels, h, w], &mut RngKey::new(1).stream(Purpose::Data, 0, 0));
        let y = forward(&params, &x, &vec![0.1; b], None).unwrap();
        prop_assert_eq!(y.shape(), &[b, cfg.out_channels, h, w][..]);
        prop_assert!(y.all_finite());
    }

    #[test]
    fn score_is_scaled_denoising_residual(seed in any::<u64>(), log_sigma in -4.0f64..4.0) {
        let cfg = tiny_net(1);
        let params = noisy_params(&cfg, seed);
        let r = 8;
        let mut rng = RngKey::new(seed).stream(Purpose::Data, 0, 0);
        let x = Tensor::<f64>::randn(&[1, 3, r, r], &mut rng);
        let grid = full_grid::<f64>(r).unwrap();
        let input = attach_coords_batch(&x, &[&grid]).unwrap();
        let sigma = [log_sigma.exp()];
        let d = denoise(&params, &input, &sigma, 0.5, None).unwrap();
        let s = score(&params, &input, &sigma, 0.5, None).unwrap();
        let inv = 1.0 / (sigma[0] * sigma[0]);
        for ((&sv, &dv), &xv) in s.data().iter().zip(d.data()).zip(x.data()) {
            prop_assert_eq!(sv, (dv - xv) * inv);
        }
    }
}
