use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use skipdit::metrics::*;
use skipdit::Array;

fn random_stats(d: usize, rng: &mut ChaCha8Rng, rank: usize) -> GaussianStats {
    let a = Array::randn([d, rank], rng);
    let a = DMatrix::from_row_slice(d, rank, a.data());
    let mean = Array::randn([d], rng);
    GaussianStats::new(DVector::from_column_slice(mean.data()), &a * a.transpose()).unwrap()
}

#[test]
fn psnr_reference_levels() {
    for peak in [1.0, 2.0, 255.0] {
        let a = Array::zeros([2, 3]);
        let tenth = Array::full([2, 3], 0.1 * peak);
        assert!((psnr(&a, &tenth, peak).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &Array::full([2, 3], peak), peak).unwrap(), 0.0);
        assert_eq!(psnr(&tenth, &tenth, peak).unwrap(), f64::INFINITY);
    }
}

#[test]
fn ssim_of_independent_noise_is_near_zero() {
    let cfg = SsimConfig::for_range(1.0);
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Array::randn([64, 64], &mut rng);
        let b = Array::randn([64, 64], &mut rng);
        let v = ssim(&a, &b, &cfg).unwrap();
        assert!(v.abs() < 0.1, "seed {seed}: {v}");
    }
}

#[test]
fn ssim_identity_and_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let a = Array::randn([3, 7, 7], &mut rng);
        assert!((ssim(&a, &a, &SsimConfig::for_range(2.0)).unwrap() - 1.0).abs() < 1e-12);
    }
    let a = Array::zeros([4]);
    assert!(ssim(&a, &Array::zeros([5]), &SsimConfig::default()).is_err());
    let bad = SsimConfig {
        c2: 0.0,
        ..SsimConfig::default()
    };
    assert!(ssim(&a, &a, &bad).is_err());
}

#[test]
fn fitted_covariance_of_white_noise_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let samples: Vec<Array> = (0..10_000).map(|_| Array::randn([4], &mut rng)).collect();
    let g = fit_gaussian(&samples).unwrap();
    assert!((g.cov() - DMatrix::identity(4, 4)).norm() < 0.1);
    assert!(g.mean().norm() < 0.05);
}

#[test]
fn frechet_analytic_cases() {
    let eye = DMatrix::identity(3, 3);
    let zero = GaussianStats::new(DVector::zeros(3), eye.clone()).unwrap();
    let mu = DVector::from_column_slice(&[0.5, -1.0, 2.0]);
    let shifted = GaussianStats::new(mu.clone(), eye).unwrap();
    assert!((frechet_gaussian(&zero, &shifted).unwrap() - mu.norm_squared()).abs() < 1e-9);
    assert!(frechet_gaussian(&zero, &zero).unwrap().abs() < 1e-9);

    let one = |m: f64, v: f64| GaussianStats::new(DVector::from_element(1, m), DMatrix::from_element(1, 1, v)).unwrap();
    for (m1, v1, m2, v2) in [(0.0, 1.0, 1.0, 4.0), (2.0, 0.09, -1.0, 0.25), (0.3, 2.0, 0.3, 2.0)] {
        let want = (m1 - m2) * (m1 - m2) + (f64::sqrt(v1) - f64::sqrt(v2)).powi(2);
        assert!((frechet_gaussian(&one(m1, v1), &one(m2, v2)).unwrap() - want).abs() < 1e-9);
    }

    // Commuting diagonal covariances reduce to per-axis standard deviations.
    let d1 = [1.0, 4.0, 0.25];
    let d2 = [9.0, 1.0, 0.0];
    let diag = |d: &[f64]| DMatrix::from_diagonal(&DVector::from_column_slice(d));
    let g1 = GaussianStats::new(DVector::zeros(3), diag(&d1)).unwrap();
    let g2 = GaussianStats::new(DVector::zeros(3), diag(&d2)).unwrap();
    let want: f64 = d1.iter().zip(d2).map(|(a, b)| (a.sqrt() - b.sqrt()).powi(2)).sum();
    assert!((frechet_gaussian(&g1, &g2).unwrap() - want).abs() < 1e-9);

    assert!(frechet_gaussian(&g1, &one(0.0, 1.0)).is_err());
}

#[test]
fn square_root_squares_back() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for rank in [1, 3, 6] {
        let g = random_stats(6, &mut rng, rank);
        let r = sqrt_psd(g.cov());
        assert!((&r * &r - g.cov()).amax() < 1e-9);
        assert!((&r - r.transpose()).amax() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn frechet_is_symmetric_and_nonnegative(seed in any::<u64>(), d in 1usize..8, rank in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g1 = random_stats(d, &mut rng, rank);
        let g2 = random_stats(d, &mut rng, rank);
        let a = frechet_gaussian(&g1, &g2).unwrap();
        let b = frechet_gaussian(&g2, &g1).unwrap();
        prop_assert!(a >= 0.0);
        prop_assert!((a - b).abs() < 1e-9 * a.max(1.0));
        prop_assert!(frechet_gaussian(&g1, &g1).unwrap() < 1e-6);
    }

    #[test]
    fn similarity_metrics_stay_in_range(seed in any::<u64>(), n in 2usize..50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Array::randn([n], &mut rng);
        let b = Array::randn([n], &mut rng);
        let c = cosine_similarity(&a, &b).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        prop_assert!((cosine_similarity(&a, &a.scaled(3.0)).unwrap() - 1.0).abs() < 1e-12);
        prop_assert!(ssim(&a, &b, &SsimConfig::default()).unwrap() <= 1.0 + 1e-12);
        let m = mse(&a, &b).unwrap();
        let direct = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n as f64;
        prop_assert!((m - direct).abs() < 1e-12 * direct.max(1.0));
        prop_assert!((psnr(&a, &b, 2.0).unwrap() - 10.0 * (4.0 / direct).log10()).abs() < 1e-9);
    }
}
