//! Mean-field Gaussian variational inference over the model parameters and
//! empirical predictive bands.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Dataset, ParameterVector, PcmlModel};
use crate::physics::ConstraintSet;
use crate::train::{adam_step, OptimizerState, Predictor, ProjectionSettings, TrainError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UqError {
    #[error("invalid UQ configuration: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("ELBO became non-finite at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("posterior draw {draw}: {source}")]
    Draw {
        draw: usize,
        #[source]
        source: TrainError,
    },
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// `q(θ) = Π N(μₖ, σₖ²)` with `σₖ = exp(log_sigmaₖ)`. Inactive coordinates
/// are held at `μₖ` and do not enter the KL term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
    pub active: Vec<bool>,
}

impl GaussianPosterior {
    pub fn new(mu: Vec<f64>, log_sigma: Vec<f64>, active: Vec<bool>) -> Result<Self, UqError> {
        if mu.len() != log_sigma.len() || mu.len() != active.len() {
            return Err(UqError::Shape(format!(
                "mu {}, log_sigma {}, active {}",
                mu.len(),
                log_sigma.len(),
                active.len()
            )));
        }
        Ok(Self {
            mu,
            log_sigma,
            active,
        })
    }

    /// Centred at `theta` with a common initial spread on trainable coordinates.
    pub fn around(theta: &[f64], log_sigma: f64, active: &[bool]) -> Self {
        Self {
            mu: theta.to_vec(),
            log_sigma: active
                .iter()
                .map(|&a| if a { log_sigma } else { f64::NEG_INFINITY })
                .collect(),
            active: active.to_vec(),
        }
    }

    /// Point mass at `theta`.
    pub fn degenerate(theta: &[f64]) -> Self {
        Self {
            mu: theta.to_vec(),
            log_sigma: vec![f64::NEG_INFINITY; theta.len()],
            active: vec![true; theta.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|l| l.exp()).collect()
    }

    /// `θ = μ + σ ⊙ ε` on active coordinates.
    pub fn reparameterize(&self, eps: &[f64]) -> Vec<f64> {
        self.mu
            .iter()
            .zip(&self.log_sigma)
            .zip(&self.active)
            .zip(eps)
            .map(|(((m, l), a), e)| if *a { m + l.exp() * e } else { *m })
            .collect()
    }
}

/// Independent Gaussian prior per coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub mu0: Vec<f64>,
    pub sigma0: Vec<f64>,
}

impl Prior {
    pub fn standard_normal(len: usize) -> Self {
        Self::isotropic(len, 0.0, 1.0)
    }

    pub fn isotropic(len: usize, mean: f64, sigma: f64) -> Self {
        assert!(sigma > 0.0, "prior scale must be positive");
        Self {
            mu0: vec![mean; len],
            sigma0: vec![sigma; len],
        }
    }
}

/// `KL(q ‖ p)` summed over active coordinates.
pub fn kl_gaussian(post: &GaussianPosterior, prior: &Prior) -> f64 {
    let mut kl = 0.0;
    for k in 0..post.len() {
        if !post.active[k] {
            continue;
        }
        let s = post.log_sigma[k].exp();
        let s0 = prior.sigma0[k];
        let d = post.mu[k] - prior.mu0[k];
        kl += (s0.ln() - post.log_sigma[k]) + (s * s + d * d) / (2.0 * s0 * s0) - 0.5;
    }
    kl
}

fn kl_gradient(post: &GaussianPosterior, prior: &Prior) -> (Vec<f64>, Vec<f64>) {
    let mut g_mu = vec![0.0; post.len()];
    let mut g_ls = vec![0.0; post.len()];
    for k in 0..post.len() {
        if post.active[k] {
            let s0sq = prior.sigma0[k] * prior.sigma0[k];
            g_mu[k] = (post.mu[k] - prior.mu0[k]) / s0sq;
            g_ls[k] = (2.0 * post.log_sigma[k]).exp() / s0sq - 1.0;
        }
    }
    (g_mu, g_ls)
}

/// Gaussian log-likelihood of `ys` around `preds` and its gradient in `preds`.
fn log_likelihood(
    preds: &[DVector<f64>],
    ys: &[DVector<f64>],
    noise_sigma: f64,
) -> (f64, Vec<DVector<f64>>) {
    let norm = -noise_sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
    let inv_var = 1.0 / (noise_sigma * noise_sigma);
    let mut ll = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (p, y) in preds.iter().zip(ys) {
        let r = y - p;
        ll += -0.5 * r.norm_squared() * inv_var + norm * r.len() as f64;
        grads.push(r * inv_var);
    }
    (ll, grads)
}

/// ELBO estimate and gradients for fixed standard-normal draws `eps`.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboEstimate {
    pub elbo: f64,
    pub log_likelihood: f64,
    pub kl: f64,
    pub grad_mu: Vec<f64>,
    pub grad_log_sigma: Vec<f64>,
}

/// Monte Carlo ELBO with reparameterization gradients, one entry of `eps`
/// per sample.
pub fn elbo_with_draws(
    predictor: &mut Predictor<'_>,
    ys: &[DVector<f64>],
    post: &GaussianPosterior,
    prior: &Prior,
    noise_sigma: f64,
    eps: &[Vec<f64>],
    layout_theta: &ParameterVector,
) -> Result<ElboEstimate, UqError> {
    let p = post.len();
    let mut ll_sum = 0.0;
    let mut g_mu = vec![0.0; p];
    let mut g_ls = vec![0.0; p];
    for (draw, e) in eps.iter().enumerate() {
        let theta = layout_theta.with_values(post.reparameterize(e));
        let preds = predictor
            .predict(&theta)
            .map_err(|source| UqError::Draw { draw, source })?;
        let (ll, seeds) = log_likelihood(&preds, ys, noise_sigma);
        ll_sum += ll;
        let g = predictor
            .vjp(&seeds)
            .map_err(|source| UqError::Draw { draw, source })?;
        for k in 0..p {
            if post.active[k] {
                g_mu[k] += g[k];
                g_ls[k] += g[k] * e[k] * post.log_sigma[k].exp();
            }
        }
    }
    let s = eps.len() as f64;
    let kl = kl_gaussian(post, prior);
    let (k_mu, k_ls) = kl_gradient(post, prior);
    for k in 0..p {
        g_mu[k] = g_mu[k] / s - k_mu[k];
        g_ls[k] = g_ls[k] / s - k_ls[k];
    }
    Ok(ElboEstimate {
        elbo: ll_sum / s - kl,
        log_likelihood: ll_sum / s,
        kl,
        grad_mu: g_mu,
        grad_log_sigma: g_ls,
    })
}

pub fn standard_normal_draws(rng: &mut ChaCha8Rng, samples: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..samples)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub samples_per_step: usize,
    pub band_samples: usize,
    pub beta: f64,
    pub init_log_sigma: f64,
    pub seed: u64,
}

impl Default for ViConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            learning_rate: 1e-2,
            samples_per_step: 16,
            band_samples: 2000,
            beta: 0.95,
            init_log_sigma: -5.0,
            seed: 0,
        }
    }
}

impl ViConfig {
    pub fn validate(&self) -> Result<(), UqError> {
        if self.epochs == 0 || self.samples_per_step == 0 {
            return Err(UqError::Config("epochs and samples_per_step must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(UqError::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.band_samples < 100 {
            return Err(UqError::Config("band_samples must be at least 100".into()));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(UqError::Config(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        if !self.init_log_sigma.is_finite() {
            return Err(UqError::Config("init_log_sigma must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ViEpoch {
    pub epoch: usize,
    pub elbo: f64,
    pub log_likelihood: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViReport {
    pub epochs: Vec<ViEpoch>,
    pub wall_time_secs: f64,
}

/// ELBO estimate at `post` with `samples` fresh draws from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn elbo_estimate(
    model: &PcmlModel,
    data: &Dataset,
    cs: &ConstraintSet,
    projection: Option<ProjectionSettings>,
    post: &GaussianPosterior,
    prior: &Prior,
    noise_sigma: f64,
    samples: usize,
    seed: u64,
) -> Result<f64, UqError> {
    if samples == 0 || !(noise_sigma > 0.0) {
        return Err(UqError::Config("need samples >= 1 and noise_sigma > 0".into()));
    }
    let mut predictor = Predictor::new(model, &data.u, cs, projection)?;
    let ys: Vec<DVector<f64>> = (0..data.len()).map(|i| data.output(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = standard_normal_draws(&mut rng, samples, post.len());
    let layout = ParameterVector::new(post.mu.clone(), model.layout()).map_err(TrainError::from)?;
    Ok(elbo_with_draws(&mut predictor, &ys, post, prior, noise_sigma, &eps, &layout)?.elbo)
}

/// Adam ascent on the ELBO over `(μ, log σ)`, starting from `init`.
/// With `projection` set every draw is projected onto the constraints.
#[allow(clippy::too_many_arguments)]
pub fn train_vi(
    model: &PcmlModel,
    data: &Dataset,
    cs: &ConstraintSet,
    projection: Option<ProjectionSettings>,
    cfg: &ViConfig,
    prior: &Prior,
    noise_sigma: f64,
    init: &ParameterVector,
) -> Result<(GaussianPosterior, ViReport), UqError> {
    let start = Instant::now();
    cfg.validate()?;
    if !(noise_sigma > 0.0 && noise_sigma.is_finite()) {
        return Err(UqError::Config(format!("noise_sigma must be positive, got {noise_sigma}")));
    }
    if prior.mu0.len() != init.len() {
        return Err(UqError::Shape("prior and parameter lengths differ".into()));
    }
    let mut predictor = Predictor::new(model, &data.u, cs, projection)?;
    let ys: Vec<DVector<f64>> = (0..data.len()).map(|i| data.output(i)).collect();
    let mask = model.trainable_mask();
    let mut post = GaussianPosterior::around(&init.values, cfg.init_log_sigma, &mask);
    let p = post.len();
    let mut packed: Vec<f64> = post
        .mu
        .iter()
        .chain(post.log_sigma.iter())
        .map(|v| if v.is_finite() { *v } else { 0.0 })
        .collect();
    let packed_mask: Vec<bool> = mask.iter().chain(mask.iter()).copied().collect();
    let mut opt = OptimizerState::new(2 * p, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut grad = vec![0.0; 2 * p];
    for epoch in 0..cfg.epochs {
        let eps = standard_normal_draws(&mut rng, cfg.samples_per_step, p);
        let est = elbo_with_draws(&mut predictor, &ys, &post, prior, noise_sigma, &eps, init)?;
        if !est.elbo.is_finite() {
            return Err(UqError::Divergence { epoch });
        }
        epochs.push(ViEpoch {
            epoch,
            elbo: est.elbo,
            log_likelihood: est.log_likelihood,
            kl: est.kl,
        });
        for k in 0..p {
            grad[k] = -est.grad_mu[k];
            grad[p + k] = -est.grad_log_sigma[k];
        }
        adam_step(&mut opt, &mut packed, &grad, Some(&packed_mask));
        for k in 0..p {
            if mask[k] {
                post.mu[k] = packed[k];
                post.log_sigma[k] = packed[p + k];
            }
        }
    }
    Ok((
        post,
        ViReport {
            epochs,
            wall_time_secs: start.elapsed().as_secs_f64(),
        },
    ))
}

/// Pointwise band summary over posterior draws, one row per query input.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveBands {
    pub mean: DMatrix<f64>,
    pub lower: DMatrix<f64>,
    pub upper: DMatrix<f64>,
    pub samples: usize,
    pub beta: f64,
}

impl PredictiveBands {
    pub fn mean_width(&self) -> f64 {
        let w = &self.upper - &self.lower;
        w.sum() / w.len() as f64
    }
}

/// Predictions for `draws` posterior samples at every query input, as
/// `[draw][query]`. Draws are generated sequentially from `seed` and
/// evaluated in parallel.
#[allow(clippy::too_many_arguments)]
pub fn predictive_draws(
    model: &PcmlModel,
    cs: &ConstraintSet,
    projection: Option<ProjectionSettings>,
    post: &GaussianPosterior,
    queries: &DMatrix<f64>,
    draws: usize,
    seed: u64,
) -> Result<Vec<Vec<DVector<f64>>>, UqError> {
    let layout = ParameterVector::new(post.mu.clone(), model.layout()).map_err(TrainError::from)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eps = standard_normal_draws(&mut rng, draws, post.len());
    // Chunking keeps one recorded graph per worker task.
    let chunk = draws.div_ceil(rayon::current_num_threads().max(1) * 4).max(1);
    let chunks: Vec<Result<Vec<Vec<DVector<f64>>>, UqError>> = eps
        .par_chunks(chunk)
        .enumerate()
        .map(|(c, block)| {
            let mut predictor = Predictor::new(model, queries, cs, projection)?;
            block
                .iter()
                .enumerate()
                .map(|(j, e)| {
                    let theta = layout.with_values(post.reparameterize(e));
                    predictor.predict(&theta).map_err(|source| UqError::Draw {
                        draw: c * chunk + j,
                        source,
                    })
                })
                .collect()
        })
        .collect();
    let mut out = Vec::with_capacity(draws);
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Type-7 empirical quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Central `beta` bands from draws laid out as `[draw][query]`.
pub fn bands_from_draws(draws: &[Vec<DVector<f64>>], beta: f64) -> PredictiveBands {
    let s = draws.len();
    let nq = draws[0].len();
    let n = draws[0][0].len();
    let mut mean = DMatrix::zeros(nq, n);
    let mut lower = DMatrix::zeros(nq, n);
    let mut upper = DMatrix::zeros(nq, n);
    let mut column = vec![0.0; s];
    let (pl, pu) = ((1.0 - beta) / 2.0, (1.0 + beta) / 2.0);
    for q in 0..nq {
        for k in 0..n {
            for (d, draw) in draws.iter().enumerate() {
                column[d] = draw[q][k];
            }
            // Centred on the first draw so identical draws give an exact mean.
            let c0 = column[0];
            let m = c0 + column.iter().map(|x| x - c0).sum::<f64>() / s as f64;
            column.sort_by(f64::total_cmp);
            mean[(q, k)] = m;
            lower[(q, k)] = quantile_sorted(&column, pl).min(m);
            upper[(q, k)] = quantile_sorted(&column, pu).max(m);
        }
    }
    PredictiveBands {
        mean,
        lower,
        upper,
        samples: s,
        beta,
    }
}

#[allow(clippy::too_many_arguments)]
pub fn predictive_bands(
    model: &PcmlModel,
    cs: &ConstraintSet,
    projection: Option<ProjectionSettings>,
    post: &GaussianPosterior,
    queries: &DMatrix<f64>,
    samples: usize,
    beta: f64,
    seed: u64,
) -> Result<PredictiveBands, UqError> {
    if samples < 100 {
        return Err(UqError::Config("band estimates need at least 100 samples".into()));
    }
    if !(beta > 0.0 && beta <= 1.0) {
        return Err(UqError::Config(format!("beta must lie in (0, 1], got {beta}")));
    }
    let draws = predictive_draws(model, cs, projection, post, queries, samples, seed)?;
    Ok(bands_from_draws(&draws, beta))
}

/// Fraction of `truth` entries inside `[lower, upper]`.
pub fn coverage(bands: &PredictiveBands, truth: &DMatrix<f64>) -> Result<f64, UqError> {
    if truth.shape() != bands.mean.shape() {
        return Err(UqError::Shape(format!(
            "truth is {:?}, bands are {:?}",
            truth.shape(),
            bands.mean.shape()
        )));
    }
    let inside = truth
        .iter()
        .zip(bands.lower.iter().zip(bands.upper.iter()))
        .filter(|(t, (l, u))| l <= t && t <= u)
        .count();
    Ok(inside as f64 / truth.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kl_examples() {
        let prior = Prior::standard_normal(1);
        let same = GaussianPosterior::new(vec![0.0], vec![0.0], vec![true]).unwrap();
        assert_eq!(kl_gaussian(&same, &prior), 0.0);
        let shifted = GaussianPosterior::new(vec![1.0], vec![0.0], vec![true]).unwrap();
        assert!((kl_gaussian(&shifted, &prior) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn inactive_coordinates_are_fixed_and_excluded() {
        let post = GaussianPosterior::around(&[1.0, 2.0], -1.0, &[true, false]);
        let th = post.reparameterize(&[1.0, 1.0]);
        assert_eq!(th[1], 2.0);
        assert!((th[0] - (1.0 + (-1.0f64).exp())).abs() < 1e-15);
        let single = GaussianPosterior::around(&[1.0], -1.0, &[true]);
        let prior2 = Prior::standard_normal(2);
        let prior1 = Prior::standard_normal(1);
        let a = GaussianPosterior::new(vec![1.0, 2.0], vec![-1.0, f64::NEG_INFINITY], vec![true, false]).unwrap();
        assert_eq!(kl_gaussian(&a, &prior2), kl_gaussian(&single, &prior1));
    }

    #[test]
    fn type7_quantiles() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile_sorted(&xs, 0.0), 1.0);
        assert_eq!(quantile_sorted(&xs, 1.0), 4.0);
        assert_eq!(quantile_sorted(&xs, 0.5), 2.5);
        assert!((quantile_sorted(&xs, 0.25) - 1.75).abs() < 1e-15);
    }

    #[test]
    fn full_level_bands_are_min_and_max() {
        let draws: Vec<Vec<DVector<f64>>> = [3.0, -1.0, 2.0, 7.0]
            .iter()
            .map(|&v| vec![DVector::from_element(1, v)])
            .collect();
        let b = bands_from_draws(&draws, 1.0);
        assert_eq!(b.lower[(0, 0)], -1.0);
        assert_eq!(b.upper[(0, 0)], 7.0);
        assert_eq!(b.mean[(0, 0)], 2.75);
    }

    #[test]
    fn coverage_examples() {
        let b = PredictiveBands {
            mean: DMatrix::from_element(2, 1, 1.0),
            lower: DMatrix::from_element(2, 1, 0.5),
            upper: DMatrix::from_element(2, 1, 1.5),
            samples: 100,
            beta: 0.95,
        };
        assert_eq!(coverage(&b, &b.mean).unwrap(), 1.0);
        assert_eq!(coverage(&b, &DMatrix::from_element(2, 1, 2.0)).unwrap(), 0.0);
        assert!(coverage(&b, &DMatrix::zeros(3, 1)).is_err());
    }
}
