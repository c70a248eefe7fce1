use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skipdit::cachesys::{CachePlan, CachePolicy, CalibSample};
use skipdit::diffusion::*;
use skipdit::skipdit::{ModelConfig, SkipDiT, Variant};
use skipdit::stability::*;
use skipdit::{Array, ParamSet, Result, Tape, Var};

fn tight() -> PowerIteration {
    PowerIteration {
        tol: 1e-12,
        max_iters: 20_000,
        seed: 4,
    }
}

fn linear<'a>(m: &'a Array) -> impl FnOnce(&mut Tape<'a>, Var) -> Result<Var> {
    move |tape, x| {
        let a = tape.input_ref(m);
        tape.matmul(a, x)
    }
}

#[test]
fn spectral_norm_matches_dense_svd() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for n in [2, 8, 16, 32, 64] {
        for _ in 0..3 {
            let m = Array::randn([n, n], &mut rng);
            let svd = DMatrix::from_row_slice(n, n, m.data()).singular_values();
            let want = svd.max();
            let x = Array::zeros([n, 1]);
            let got = spectral_norm_of(linear(&m), &x, &tight()).unwrap();
            assert!((got - want).abs() / want < 1e-6, "n={n}: {got} vs {want}");
        }
    }
}

#[test]
fn spectral_norm_is_scale_equivariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let m = Array::randn([6, 6], &mut rng);
    let x = Array::zeros([6, 1]);
    let base = spectral_norm_of(linear(&m), &x, &tight()).unwrap();
    for c in [-3.0, -0.5, 0.25, 7.0] {
        let s = spectral_norm_of(
            |tape, v| {
                let y = linear(&m)(tape, v)?;
                Ok(tape.scale(y, c))
            },
            &x,
            &tight(),
        )
        .unwrap();
        assert!((s - c.abs() * base).abs() < 1e-6 * s.max(1.0));
    }
}

fn recursion(lip: f64, delta: f64, steps: u32) -> f64 {
    (0..steps).fold(0.0, |e, _| lip * e + delta)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn cumulative_error_matches_recursion(lip in 0.0f64..1.5, delta in 0.0f64..1.0, steps in 1u32..40) {
        let got = cumulative_error(lip, delta, steps).unwrap();
        let want = recursion(lip, delta, steps);
        prop_assert!((got - want).abs() <= 1e-9 * want.max(1.0), "{got} vs {want}");
    }

    #[test]
    fn smaller_lipschitz_and_drift_never_shorten_reuse(
        lip_v in 0.05f64..1.5, lip_frac in 0.0f64..1.0,
        d_v in 1e-3f64..0.5, d_frac in 0.0f64..1.0,
        eps_max in 0.01f64..2.0,
    ) {
        let lip_s = lip_v * lip_frac;
        let d_s = d_v * d_frac;
        let skip = max_reuse_interval(lip_s, d_s, eps_max).unwrap();
        let vanilla = max_reuse_interval(lip_v, d_v, eps_max).unwrap();
        prop_assert!(skip >= vanilla);
    }

    #[test]
    fn reuse_interval_is_the_largest_admissible(lip in 0.0f64..2.0, delta in 1e-3f64..0.5, eps_max in 0.01f64..2.0) {
        match max_reuse_interval(lip, delta, eps_max).unwrap() {
            ReuseInterval::Finite(0) => prop_assert!(delta > eps_max),
            ReuseInterval::Finite(tau) => {
                let cap = eps_max * (1.0 + REUSE_SLACK);
                prop_assert!(recursion(lip, delta, tau as u32) <= cap);
                prop_assert!(recursion(lip, delta, tau as u32 + 1) > cap);
            }
            ReuseInterval::Unbounded => prop_assert!(lip < 1.0 && delta / (1.0 - lip) <= eps_max * (1.0 + REUSE_SLACK)),
        }
    }

    #[test]
    fn skip_bound_is_below_vanilla(gamma in 0.01f64..0.99, alpha in 0.01f64..0.99, half in 1usize..8) {
        let depth = 2 * half;
        for l in half + 1..=depth {
            prop_assert!(ideal_layer_bound(gamma, alpha, l, depth).unwrap() < gamma);
        }
        let b = ideal_model_bounds(&IdealModelSpec { depth, gamma, alpha_mix: alpha, delta_step: 0.0, eps_max: 1.0 }).unwrap();
        prop_assert!(b.sigma_skip_bound < b.sigma_vanilla);
        prop_assert!((b.sigma_vanilla - gamma.powi(depth as i32)).abs() < 1e-15);
    }
}

#[test]
fn reuse_spot_values() {
    assert!((cumulative_error(0.5, 0.1, 3).unwrap() - 0.175).abs() < 1e-12);
    assert_eq!(max_reuse_interval(0.5, 0.1, 0.175).unwrap(), ReuseInterval::Finite(3));
    assert_eq!(max_reuse_interval(0.9, 0.5, 0.4).unwrap(), ReuseInterval::Finite(0));
    let b = ideal_model_bounds(&IdealModelSpec {
        depth: 4,
        gamma: 0.9,
        alpha_mix: 1e-9,
        delta_step: 0.0,
        eps_max: 1.0,
    })
    .unwrap();
    assert!((b.sigma_skip_bound - b.sigma_vanilla).abs() < 1e-6);
    assert!(ideal_model_bounds(&IdealModelSpec {
        depth: 3,
        gamma: 0.9,
        alpha_mix: 0.5,
        delta_step: 0.0,
        eps_max: 1.0,
    })
    .is_err());
}

#[test]
fn constructed_chains_contract_faster_with_skips() {
    for depth in [4, 6] {
        for seed in 0..3 {
            let r = empirical_theorem1_check(seed, depth, 0.8, 0.5, &ChainConfig::default()).unwrap();
            assert!(r.skip_below_vanilla, "{r:?}");
        }
    }
    let linear = ChainConfig {
        nonlinearity: 0.0,
        ..ChainConfig::default()
    };
    let r = empirical_theorem1_check(5, 6, 0.7, 0.3, &linear).unwrap();
    assert!((r.sigma_vanilla / 0.7f64.powi(6) - 1.0).abs() < 0.02);
    assert!(empirical_theorem1_check(0, 5, 0.8, 0.5, &linear).is_err());
    assert!(empirical_theorem1_check(0, 4, 1.2, 0.5, &linear).is_err());
}

fn random_params(rng: &mut ChaCha8Rng) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("w", Array::randn([3, 4], rng));
    p
}

fn apply(w: &Array, x: &Array) -> Result<Array> {
    let mut tape = Tape::new();
    let xv = tape.input_ref(x);
    let y = linear(w)(&mut tape, xv)?;
    Ok(tape.value(y).clone())
}

#[test]
fn linear_model_landscape_has_a_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let theta = random_params(&mut rng);
        let x = Array::randn([4, 1], &mut rng);
        let spec = PerturbationSpec::sample(&theta, rng.random_range(0.01..0.5), rng.random()).unwrap();
        let grid = LandscapeGrid::square(1.0, 5);
        let f = |p: &ParamSet| apply(p.require("w")?, &x);
        let land = landscape_with(&theta, &spec, &grid, f).unwrap();
        let u = f(&theta).unwrap();
        let dv = f(&spec.delta).unwrap();
        let ev = f(&spec.eta).unwrap();
        for (i, a) in grid.alphas.iter().enumerate() {
            for (j, b) in grid.betas.iter().enumerate() {
                let w: Vec<f64> = (0..3)
                    .map(|k| u.data()[k] + a * dv.data()[k] + b * ev.data()[k])
                    .collect();
                let uw: f64 = (0..3).map(|k| u.data()[k] * w[k]).sum();
                let nw = w.iter().map(|v| v * v).sum::<f64>().sqrt();
                let want = uw / (u.norm() * nw);
                assert!((land.values[i][j] - want).abs() < 1e-9);
            }
        }
        assert_eq!(land.values[2][2], 1.0);
        assert!(land.values.iter().flatten().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn perturbation_arithmetic() {
    let mut theta = ParamSet::new();
    theta.insert("w", Array::from_vec(vec![1.0]));
    let spec = PerturbationSpec::sample(&theta, 0.1, 3).unwrap();
    assert!((spec.delta.get("w").unwrap().data()[0].abs() - 0.1).abs() < 1e-15);
    let p = perturb_params(&theta, &spec, 1.0, 1.0).unwrap();
    let want = 1.0 + spec.delta.get("w").unwrap().data()[0] + spec.eta.get("w").unwrap().data()[0];
    assert_eq!(p.get("w").unwrap().data()[0], want);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let theta = random_params(&mut rng);
    let spec = PerturbationSpec::sample(&theta, 0.05, 1).unwrap();
    for (a, b) in [(0.3, -0.7), (-2.0, 1.0)] {
        let mut diff = perturb_params(&theta, &spec, a, b).unwrap();
        diff.add_scaled(&theta, -1.0).unwrap();
        assert!(diff.global_norm() <= (f64::abs(a) + f64::abs(b)) * 0.05 * theta.global_norm() + 1e-12);
    }
    let mut other = ParamSet::new();
    other.insert("w", Array::zeros([2, 2]));
    assert!(perturb_params(&other, &spec, 1.0, 1.0).is_err());
}

fn toy(variant: Variant) -> SkipDiT {
    let cfg = ModelConfig {
        image_size: 8,
        patch_size: 4,
        hidden_dim: 16,
        depth: 4,
        heads: 2,
        num_classes: 2,
        variant,
        ..ModelConfig::default()
    };
    let mut m = SkipDiT::new(cfg, 5).unwrap();
    m.randomize_zero_init(6, 0.2);
    m
}

#[test]
fn model_landscape_is_one_at_the_centre() {
    let m = toy(Variant::Skip);
    let x = initial_noise(&m.config().image_shape(), 1);
    let spec = PerturbationSpec::sample(m.params(), 0.05, 2).unwrap();
    let l = landscape(&m, &x, 500, Label::Class(0), &spec, &LandscapeGrid::square(1.0, 3)).unwrap();
    assert_eq!(l.values[1][1], 1.0);
    let centre = landscape(&m, &x, 500, Label::Class(0), &spec, &LandscapeGrid::square(1.0, 1)).unwrap();
    assert_eq!(centre.values, vec![vec![1.0]]);
    assert!(l.mean() < 1.0 && l.mean() > -1.0);
    let mut csv = Vec::new();
    l.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 10);
}

#[test]
fn caching_similarity_curves() {
    let s = ScheduleConfig::default().build().unwrap();
    let cfg = SamplerConfig {
        steps: 10,
        ..SamplerConfig::default()
    };
    let skip = toy(Variant::Skip);
    let samples: Vec<CalibSample> = (0..3)
        .map(|i| CalibSample {
            x_start: initial_noise(&skip.config().image_shape(), i),
            label: Label::Class(i as usize % 2),
        })
        .collect();
    let unit = CachePolicy::SkipCache(CachePlan::simple(1, 1000, 1, 1000));
    let curve = caching_similarity_curve(&skip, &samples, &unit, &cfg, &s).unwrap();
    assert_eq!(curve.timesteps.len(), 10);
    assert!(curve.mean.iter().all(|&v| v == 1.0) && curve.std.iter().all(|&v| v == 0.0));

    let cached = CachePolicy::SkipCache(CachePlan::simple(3, 1000, 1, 1000));
    let curve = caching_similarity_curve(&skip, &samples, &cached, &cfg, &s).unwrap();
    assert!(curve.mean.iter().all(|v| v.is_finite() && *v <= 1.0 + 1e-12));
    assert!(curve.mean.iter().any(|&v| v < 1.0));

    let vanilla = toy(Variant::Vanilla);
    let curve = caching_similarity_curve(&vanilla, &samples, &CachePolicy::StaticInterval(2), &cfg, &s).unwrap();
    assert_eq!(curve.mean[0], 1.0);
    assert!(caching_similarity_curve(&vanilla, &samples[..1], &CachePolicy::None, &cfg, &s).is_err());
}
