use nalgebra::{DMatrix, DVector};
use pcml_core::model::{Dataset, MlComponent, ParameterVector, PcmlModel, PhysicsComponent, PhysicsMap, Topology};
use pcml_core::physics::ConstraintSet;
use pcml_core::train::{Predictor, ProjectionSettings};
use pcml_core::uq::{
    elbo_estimate, elbo_with_draws, kl_gaussian, predictive_draws, standard_normal_draws, train_vi, GaussianPosterior, Prior,
    ViConfig,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn line_model() -> PcmlModel {
    let ml = MlComponent::new(vec![1, 1]).unwrap();
    let physics = PhysicsComponent::fixed(PhysicsMap::PassThrough { dim: 1 }).unwrap();
    PcmlModel::new(ml, physics, Topology::MlToP, 1).unwrap()
}

/// `u = ±1` alternating, so the design columns `u` and `1` are orthogonal.
fn line_data(n: usize, w: f64, b: f64, noise: f64, seed: u64) -> Dataset {
    use rand_distr::{Distribution, Normal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise).unwrap();
    let u = DMatrix::from_fn(n, 1, |i, _| if i % 2 == 0 { 1.0 } else { -1.0 });
    let y = DMatrix::from_fn(n, 1, |i, _| w * u[(i, 0)] + b + normal.sample(&mut rng));
    Dataset::new(u, y).unwrap()
}

#[test]
fn elbo_gradient_matches_finite_differences_with_fixed_draws() {
    let ml = MlComponent::new(vec![2, 3, 2]).unwrap();
    let physics = PhysicsComponent::fixed(PhysicsMap::PassThrough { dim: 2 }).unwrap();
    let model = PcmlModel::new(ml, physics, Topology::MlToP, 2).unwrap();
    let u = DMatrix::from_row_slice(3, 2, &[0.1, -0.4, 0.7, 0.2, -0.5, 0.9]);
    let y = DMatrix::from_row_slice(3, 2, &[0.3, 0.6, -0.2, 1.0, 0.4, 0.5]);
    let data = Dataset::new(u, y).unwrap();
    let ys: Vec<DVector<f64>> = (0..3).map(|i| data.output(i)).collect();
    let cs = ConstraintSet::linear(DMatrix::from_row_slice(1, 2, &[1.0, 1.0]), DVector::from_element(1, 1.0)).unwrap();
    let theta = pcml_core::model::init_parameters(&model, 4);
    let p = theta.len();
    let prior = Prior::isotropic(p, 0.1, 0.8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let eps = standard_normal_draws(&mut rng, 4, p);
    let log_sigma: Vec<f64> = (0..p).map(|k| -1.5 + 0.05 * k as f64).collect();
    for projection in [None, Some(ProjectionSettings::default())] {
        let mut pred = Predictor::new(&model, &data.u, &cs, projection).unwrap();
        let post = GaussianPosterior::new(theta.values.clone(), log_sigma.clone(), vec![true; p]).unwrap();
        let est = elbo_with_draws(&mut pred, &ys, &post, &prior, 0.3, &eps, &theta).unwrap();
        let mut f = |mu: &[f64], ls: &[f64]| {
            let q = GaussianPosterior::new(mu.to_vec(), ls.to_vec(), vec![true; p]).unwrap();
            elbo_with_draws(&mut pred, &ys, &q, &prior, 0.3, &eps, &theta).unwrap().elbo
        };
        let h = 1e-6;
        for k in 0..p {
            for (which, analytic) in [(0, est.grad_mu[k]), (1, est.grad_log_sigma[k])] {
                let (mut mp, mut mm) = (post.mu.clone(), post.mu.clone());
                let (mut lp, mut lm) = (post.log_sigma.clone(), post.log_sigma.clone());
                if which == 0 {
                    mp[k] += h;
                    mm[k] -= h;
                } else {
                    lp[k] += h;
                    lm[k] -= h;
                }
                let fd = (f(&mp, &lp) - f(&mm, &lm)) / (2.0 * h);
                let err = if analytic.abs() < 1e-8 {
                    (fd - analytic).abs()
                } else {
                    ((fd - analytic) / analytic).abs()
                };
                assert!(err <= 1e-4, "coord {k} part {which}: {fd} vs {analytic}");
            }
        }
    }
}

#[test]
fn kl_is_nonnegative_and_zero_at_prior() {
    let prior = Prior::isotropic(3, 0.5, 2.0);
    let at_prior = GaussianPosterior::new(vec![0.5; 3], vec![2.0f64.ln(); 3], vec![true; 3]).unwrap();
    assert!(kl_gaussian(&at_prior, &prior).abs() < 1e-14);
    let other = GaussianPosterior::new(vec![0.0, 1.0, 3.0], vec![-2.0, 0.0, 1.5], vec![true; 3]).unwrap();
    assert!(kl_gaussian(&other, &prior) > 0.0);
}

#[test]
fn vi_recovers_exact_posterior_on_orthogonal_linear_gaussian_design() {
    let model = line_model();
    let (n, noise) = (20, 0.2);
    let data = line_data(n, 0.8, -0.3, noise, 5);
    // Columns orthogonal: each coordinate's posterior is independent.
    let prec = n as f64 / (noise * noise) + 1.0;
    let post_sd = prec.sqrt().recip();
    let sum_uy: f64 = (0..n).map(|i| data.u[(i, 0)] * data.y[(i, 0)]).sum();
    let sum_y: f64 = data.y.iter().sum();
    let exact_mu = [sum_uy / (noise * noise) / prec, sum_y / (noise * noise) / prec];
    let cfg = ViConfig {
        epochs: 3000,
        learning_rate: 5e-3,
        samples_per_step: 16,
        seed: 1,
        ..ViConfig::default()
    };
    let init = ParameterVector::new(vec![0.0, 0.0], model.layout()).unwrap();
    let (post, report) = train_vi(
        &model,
        &data,
        &ConstraintSet::empty(1),
        None,
        &cfg,
        &Prior::standard_normal(2),
        noise,
        &init,
    )
    .unwrap();
    assert_eq!(report.epochs.len(), 3000);
    for k in 0..2 {
        assert!((post.mu[k] - exact_mu[k]).abs() < 0.1 * post_sd, "mu {k}: {} vs {}", post.mu[k], exact_mu[k]);
        let sd = post.log_sigma[k].exp();
        assert!((sd / post_sd - 1.0).abs() < 0.1, "sd {k}: {sd} vs {post_sd}");
    }
}

#[test]
fn projected_draws_satisfy_linear_constraint() {
    let ml = MlComponent::new(vec![1, 4, 3]).unwrap();
    let physics = PhysicsComponent::fixed(PhysicsMap::PassThrough { dim: 3 }).unwrap();
    let model = PcmlModel::new(ml, physics, Topology::MlToP, 1).unwrap();
    let cs = ConstraintSet::linear(DMatrix::from_row_slice(1, 3, &[1.0; 3]), DVector::from_element(1, 1.0)).unwrap();
    let theta = pcml_core::model::init_parameters(&model, 2);
    let post = GaussianPosterior::around(&theta.values, -1.0, &model.trainable_mask());
    let q = DMatrix::from_fn(7, 1, |i, _| i as f64 * 0.3 - 1.0);
    let draws = predictive_draws(&model, &cs, Some(ProjectionSettings::default()), &post, &q, 300, 3).unwrap();
    for d in &draws {
        for y in d {
            assert!((y.sum() - 1.0).abs() <= 1e-8);
        }
    }
    let again = predictive_draws(&model, &cs, Some(ProjectionSettings::default()), &post, &q, 300, 3).unwrap();
    assert_eq!(draws, again);
}

#[test]
fn degenerate_posterior_collapses_bands_to_point_prediction() {
    let model = line_model();
    let theta = ParameterVector::new(vec![0.7, 0.1], model.layout()).unwrap();
    let post = GaussianPosterior::degenerate(&theta.values);
    let q = DMatrix::from_column_slice(3, 1, &[-1.0, 0.0, 2.0]);
    let b = pcml_core::uq::predictive_bands(&model, &ConstraintSet::empty(1), None, &post, &q, 200, 0.95, 0).unwrap();
    for i in 0..3 {
        let expect = 0.7 * q[(i, 0)] + 0.1;
        assert_eq!(b.lower[(i, 0)], b.upper[(i, 0)]);
        assert!((b.mean[(i, 0)] - expect).abs() < 1e-14);
    }
}

#[test]
fn kl_matches_monte_carlo_estimate() {
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let d = 10;
    let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let ls: Vec<f64> = (0..d).map(|_| rng.random_range(-0.7..0.3)).collect();
    let mu0: Vec<f64> = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
    let s0: Vec<f64> = (0..d).map(|_| rng.random_range(0.6..1.5)).collect();
    let post = GaussianPosterior::new(mu.clone(), ls.clone(), vec![true; d]).unwrap();
    let prior = Prior {
        mu0: mu0.clone(),
        sigma0: s0.clone(),
    };
    let exact = kl_gaussian(&post, &prior);
    // E_q[log q(θ) − log p(θ)] with θ ~ q; normalising constants cancel.
    let n = 1_000_000;
    let mut acc = 0.0;
    for _ in 0..n {
        let mut v = 0.0;
        for k in 0..d {
            let e: f64 = StandardNormal.sample(&mut rng);
            let s = ls[k].exp();
            let th = mu[k] + s * e;
            let lq = -ls[k] - 0.5 * e * e;
            let z = (th - mu0[k]) / s0[k];
            let lp = -s0[k].ln() - 0.5 * z * z;
            v += lq - lp;
        }
        acc += v;
    }
    let mc = acc / n as f64;
    assert!(((mc - exact) / exact).abs() <= 1e-2, "mc {mc} exact {exact}");
}

fn point_log_likelihood(model: &PcmlModel, data: &Dataset, theta: &ParameterVector, noise: f64) -> f64 {
    let mut ll = 0.0;
    for i in 0..data.len() {
        let f = pcml_core::model::forward(model, &data.input(i), theta).unwrap();
        for k in 0..f.y_hat.len() {
            let r = data.y[(i, k)] - f.y_hat[k];
            ll += -0.5 * (r / noise).powi(2) - noise.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        }
    }
    ll
}

#[test]
fn collapsed_posterior_likelihood_equals_point_estimate() {
    let model = line_model();
    let data = line_data(12, 0.4, 0.2, 0.1, 3);
    let theta = ParameterVector::new(vec![0.35, 0.15], model.layout()).unwrap();
    let post = GaussianPosterior::new(theta.values.clone(), vec![-20.0; 2], vec![true; 2]).unwrap();
    let cs = ConstraintSet::empty(1);
    let mut pred = Predictor::new(&model, &data.u, &cs, None).unwrap();
    let ys: Vec<DVector<f64>> = (0..data.len()).map(|i| data.output(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let eps = standard_normal_draws(&mut rng, 8, 2);
    let est = elbo_with_draws(&mut pred, &ys, &post, &Prior::standard_normal(2), 0.1, &eps, &theta).unwrap();
    let oracle = point_log_likelihood(&model, &data, &theta, 0.1);
    assert!((est.log_likelihood - oracle).abs() <= 1e-6, "{} vs {oracle}", est.log_likelihood);
}

#[test]
fn elbo_estimate_is_deterministic_and_stable_across_seeds() {
    let model = line_model();
    let data = line_data(10, 0.5, 0.0, 0.2, 4);
    let cs = ConstraintSet::empty(1);
    let post = GaussianPosterior::new(vec![0.45, 0.05], vec![-1.5, -1.0], vec![true; 2]).unwrap();
    let prior = Prior::standard_normal(2);
    let one = |seed| elbo_estimate(&model, &data, &cs, None, &post, &prior, 0.2, 1, seed).unwrap();
    assert_eq!(one(5).to_bits(), one(5).to_bits());

    // Per-draw spread gives the standard error of an S-sample mean.
    let s = 10_000;
    let mut pred = Predictor::new(&model, &data.u, &cs, None).unwrap();
    let ys: Vec<DVector<f64>> = (0..data.len()).map(|i| data.output(i)).collect();
    let layout = ParameterVector::new(post.mu.clone(), model.layout()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let singles: Vec<f64> = standard_normal_draws(&mut rng, 2000, 2)
        .into_iter()
        .map(|e| elbo_with_draws(&mut pred, &ys, &post, &prior, 0.2, &[e], &layout).unwrap().elbo)
        .collect();
    let m = singles.iter().sum::<f64>() / singles.len() as f64;
    let sd = (singles.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (singles.len() - 1) as f64).sqrt();
    let se = sd / (s as f64).sqrt();
    let estimates: Vec<f64> = (0..4)
        .map(|seed| elbo_estimate(&model, &data, &cs, None, &post, &prior, 0.2, s, seed).unwrap())
        .collect();
    for w in estimates.windows(2) {
        assert!((w[0] - w[1]).abs() <= 2.0 * std::f64::consts::SQRT_2 * se, "{estimates:?} se {se}");
    }
}

#[test]
fn posterior_sigma_shrinks_on_noise_free_data() {
    // Three inputs with the third the sum of the first two: more weights than directions.
    let ml = MlComponent::new(vec![3, 1]).unwrap();
    let physics = PhysicsComponent::fixed(PhysicsMap::PassThrough { dim: 1 }).unwrap();
    let model = PcmlModel::new(ml, physics, Topology::MlToP, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let n = 15;
    let mut u = DMatrix::zeros(n, 3);
    let mut y = DMatrix::zeros(n, 1);
    for i in 0..n {
        use rand::Rng;
        let (a, b): (f64, f64) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        u[(i, 0)] = a;
        u[(i, 1)] = b;
        u[(i, 2)] = a + b;
        y[(i, 0)] = 0.7 * a - 0.2 * b + 0.1;
    }
    let data = Dataset::new(u, y).unwrap();
    let cfg = ViConfig {
        epochs: 1500,
        init_log_sigma: 0.0,
        learning_rate: 1e-2,
        seed: 3,
        ..ViConfig::default()
    };
    let init = ParameterVector::new(vec![0.0; 4], model.layout()).unwrap();
    let (post, _) = train_vi(&model, &data, &ConstraintSet::empty(1), None, &cfg, &Prior::standard_normal(4), 0.05, &init)
        .unwrap();
    let mut sd = post.sigma();
    sd.sort_by(f64::total_cmp);
    let median = 0.5 * (sd[1] + sd[2]);
    assert!(median < 1.0, "{sd:?}");
}

#[test]
fn empty_dataset_is_rejected() {
    assert!(Dataset::new(DMatrix::zeros(0, 1), DMatrix::zeros(0, 1)).is_err());
}

fn reactor_start(seed: u64) -> (PcmlModel, pcml_core::bench::BenchmarkProblem, Dataset, ParameterVector) {
    use pcml_core::bench::{build_model, generate_data, reactor_problem, ModelSpec};
    use pcml_core::train::{train, TrainConfig, TrainMode};
    let prob = reactor_problem();
    let (data, _, _) = generate_data(&prob, 20, 5, seed).unwrap();
    let model = build_model(&prob, &ModelSpec::default()).unwrap();
    let cfg = TrainConfig {
        mode: TrainMode::HardSequential,
        max_epochs: 300,
        seed,
        ..TrainConfig::default()
    };
    let theta = train(&model, &data, &prob.constraints, &cfg).unwrap().theta;
    (model, prob, data, theta)
}

#[test]
fn reactor_elbo_trends_upward() {
    for seed in 0..5 {
        let (model, prob, data, theta) = reactor_start(seed);
        let cfg = ViConfig {
            epochs: 300,
            seed,
            ..ViConfig::default()
        };
        let prior = Prior::standard_normal(model.param_count());
        let proj = Some(ProjectionSettings::default());
        let (_, report) = train_vi(&model, &data, &prob.constraints, proj, &cfg, &prior, 0.02, &theta).unwrap();
        let mean = |r: &[pcml_core::uq::ViEpoch]| r.iter().map(|e| e.elbo).sum::<f64>() / r.len() as f64;
        let lead = mean(&report.epochs[..100]);
        let trail = mean(&report.epochs[report.epochs.len() - 100..]);
        assert!(trail >= lead, "seed {seed}: {lead} -> {trail}");
    }
}

#[test]
fn reactor_band_draws_conserve_moles() {
    let (model, prob, _, theta) = reactor_start(0);
    let post = GaussianPosterior::around(&theta.values, -3.0, &model.trainable_mask());
    let q = DMatrix::from_fn(11, 1, |i, _| 0.5 * i as f64);
    let proj = Some(ProjectionSettings::default());
    let draws = predictive_draws(&model, &prob.constraints, proj, &post, &q, 10_000, 1).unwrap();
    let mut worst = 0.0f64;
    for d in &draws {
        for y in d {
            worst = worst.max((y.sum() - 1.0).abs());
        }
    }
    assert!(worst <= 1e-8, "{worst}");
}

#[test]
fn band_width_grows_with_sigma() {
    let (model, prob, _, theta) = reactor_start(1);
    let q = DMatrix::from_fn(11, 1, |i, _| 0.5 * i as f64);
    let proj = Some(ProjectionSettings::default());
    let mask = model.trainable_mask();
    let narrow = GaussianPosterior::around(&theta.values, -4.0, &mask);
    let wide = GaussianPosterior::around(&theta.values, -4.0 + 2.0f64.ln(), &mask);
    let band = |p: &GaussianPosterior| {
        pcml_core::uq::predictive_bands(&model, &prob.constraints, proj, p, &q, 2000, 0.95, 7).unwrap()
    };
    let (a, b) = (band(&narrow), band(&wide));
    assert!(b.mean_width() >= a.mean_width(), "{} vs {}", a.mean_width(), b.mean_width());
    for i in 0..a.mean.nrows() {
        for k in 0..3 {
            assert!(a.lower[(i, k)] <= a.mean[(i, k)] && a.mean[(i, k)] <= a.upper[(i, k)]);
        }
    }
}
