//! Synthetic chemical-process benchmarks, data generation, evaluation metrics
//! and the paired standalone-ML versus constrained comparison.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{ExprGraph, NodeId, Tensor};
use crate::linalg;
use crate::model::{
    AlgebraicPhysics, Dataset, MlComponent, ModelError, NeuralOde, ParameterVector, PcmlModel,
    PhysicsComponent, PhysicsMap, Topology,
};
use crate::physics::{
    self, make_species_balance, AffineFamily, ConstraintSet, OdeSystem, PhysicsError, SeriesReactionRhs,
    SpeciesBalance,
};
use crate::train::{self, deployed_predictions, ProjectionSettings, TrainConfig, TrainError, TrainReport};
use crate::uq::{self, GaussianPosterior, PredictiveBands, Prior, UqError, ViConfig, ViReport};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BenchError {
    #[error("invalid benchmark configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Uq(#[from] UqError),
}

pub const REACTOR_K1: f64 = 1.0;
pub const REACTOR_K2: f64 = 0.5;
pub const REACTOR_C0: [f64; 3] = [1.0, 0.0, 0.0];
pub const REACTOR_HORIZON: f64 = 5.0;
pub const REACTOR_GRID_POINTS: usize = 21;
/// RK4 step used for the reactor ground truth.
pub const REACTOR_TRUTH_STEP: f64 = 0.01;

/// Additive Gaussian measurement noise, applied to training outputs only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub sigma: Vec<f64>,
    pub bias: Vec<f64>,
    /// ChaCha stream used for the noise draws.
    pub stream: u64,
}

impl NoiseSpec {
    pub fn gaussian(sigma: Vec<f64>) -> Self {
        let n = sigma.len();
        Self {
            sigma,
            bias: vec![0.0; n],
            stream: 1,
        }
    }

    pub fn validate(&self, outputs: usize) -> Result<(), BenchError> {
        if self.sigma.len() != outputs || self.bias.len() != outputs {
            return Err(BenchError::Config(format!(
                "noise has {} sigmas and {} biases for {outputs} outputs",
                self.sigma.len(),
                self.bias.len()
            )));
        }
        if self.sigma.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(BenchError::Config("noise sigma must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub enum GroundTruth {
    /// Batch trajectory of an ODE system integrated with fine-step RK4.
    Ode {
        system: OdeSystem,
        theta: Vec<f64>,
        step: f64,
    },
    Algebraic(fn(&[f64]) -> Vec<f64>),
}

impl GroundTruth {
    /// Noiseless outputs, one row per input row.
    pub fn evaluate(&self, inputs: &DMatrix<f64>) -> Result<DMatrix<f64>, BenchError> {
        match self {
            GroundTruth::Ode { system, theta, step } => {
                let times: Vec<f64> = inputs.column(0).iter().copied().collect();
                Ok(physics::integrate_at(system, *step, theta, &times)?)
            }
            GroundTruth::Algebraic(f) => {
                let rows: Vec<Vec<f64>> = inputs
                    .row_iter()
                    .map(|r| f(&r.iter().copied().collect::<Vec<_>>()))
                    .collect();
                let n = rows.first().map_or(0, Vec::len);
                Ok(DMatrix::from_fn(rows.len(), n, |i, k| rows[i][k]))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum InputSampling {
    /// Training times drawn from an evenly spaced grid; test times evenly
    /// spaced over the same horizon.
    TimeGrid { t0: f64, tf: f64, points: usize },
    UniformBox { lower: Vec<f64>, upper: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_train: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Units {
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// Shared axis label for plots of all outputs.
    pub y_axis: String,
}

#[derive(Debug, Clone)]
pub struct BenchmarkProblem {
    pub name: String,
    pub truth: GroundTruth,
    pub sampling: InputSampling,
    pub constraints: ConstraintSet,
    pub noise: NoiseSpec,
    pub split: SplitSpec,
    pub units: Units,
}

impl BenchmarkProblem {
    pub fn input_dim(&self) -> usize {
        match &self.sampling {
            InputSampling::TimeGrid { .. } => 1,
            InputSampling::UniformBox { lower, .. } => lower.len(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.constraints.dim()
    }

    pub fn with_noise_sigma(mut self, sigma: f64) -> Self {
        self.noise.sigma = vec![sigma; self.output_dim()];
        self
    }

    pub fn with_split(mut self, n_train: usize, n_test: usize) -> Self {
        self.split = SplitSpec { n_train, n_test };
        self
    }
}

/// Batch series reaction A → B → C with total-concentration conservation.
pub fn reactor_problem() -> BenchmarkProblem {
    let system = OdeSystem::new(
        Arc::new(SeriesReactionRhs),
        REACTOR_C0.to_vec(),
        0.0,
        REACTOR_HORIZON,
        REACTOR_GRID_POINTS,
    )
    .expect("reactor system is well formed");
    let constraints =
        make_species_balance(&SpeciesBalance::series_abc(REACTOR_C0)).expect("series reaction conserves moles");
    BenchmarkProblem {
        name: "reactor".into(),
        truth: GroundTruth::Ode {
            system,
            theta: vec![REACTOR_K1, REACTOR_K2],
            step: REACTOR_TRUTH_STEP,
        },
        sampling: InputSampling::TimeGrid {
            t0: 0.0,
            tf: REACTOR_HORIZON,
            points: REACTOR_GRID_POINTS,
        },
        constraints,
        noise: NoiseSpec::gaussian(vec![0.02; 3]),
        split: SplitSpec {
            n_train: 20,
            n_test: 51,
        },
        units: Units {
            inputs: vec!["time [h]".into()],
            outputs: vec!["C_A [mol/L]".into(), "C_B [mol/L]".into(), "C_C [mol/L]".into()],
            y_axis: "concentration [mol/L]".into(),
        },
    }
}

/// Outlet split fraction of the mixer: leans towards stream 1 when inlet 1
/// is the richer stream.
pub fn mixer_split(x1: f64, x2: f64) -> f64 {
    0.5 + 0.25 * (2.0 * (x1 - x2)).tanh()
}

/// Steady two-inlet mixer feeding a splitter. Inputs `(F₁, x₁, F₂, x₂)`,
/// outputs `(F_out,1, F_out,2, x_out)`.
pub fn mixer_outputs(u: &[f64]) -> Vec<f64> {
    let (f1, x1, f2, x2) = (u[0], u[1], u[2], u[3]);
    let total = f1 + f2;
    let s = mixer_split(x1, x2);
    vec![s * total, (1.0 - s) * total, (f1 * x1 + f2 * x2) / total]
}

/// Total and component mass balances of the mixer.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MixerBalance;

impl AffineFamily for MixerBalance {
    fn rows(&self) -> usize {
        2
    }

    fn constraints(&self, u: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
        let total = u[0] + u[2];
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 0.0, 0.0, 0.0, total]);
        let b = DVector::from_vec(vec![total, u[0] * u[1] + u[2] * u[3]]);
        (a, b)
    }
}

pub fn mixer_problem() -> BenchmarkProblem {
    BenchmarkProblem {
        name: "mixer".into(),
        truth: GroundTruth::Algebraic(mixer_outputs),
        sampling: InputSampling::UniformBox {
            lower: vec![0.5, 0.1, 0.5, 0.1],
            upper: vec![2.0, 0.9, 2.0, 0.9],
        },
        constraints: ConstraintSet::input_dependent(3, Arc::new(MixerBalance)).expect("mixer balance is well formed"),
        noise: NoiseSpec::gaussian(vec![0.01; 3]),
        split: SplitSpec {
            n_train: 40,
            n_test: 100,
        },
        units: Units {
            inputs: vec!["F_1 [kg/s]".into(), "x_1 [-]".into(), "F_2 [kg/s]".into(), "x_2 [-]".into()],
            outputs: vec!["F_out1 [kg/s]".into(), "F_out2 [kg/s]".into(), "x_out [-]".into()],
            y_axis: "flow [kg/s] / mass fraction [-]".into(),
        },
    }
}

pub fn problem_by_name(name: &str) -> Result<BenchmarkProblem, BenchError> {
    match name {
        "reactor" => Ok(reactor_problem()),
        "mixer" => Ok(mixer_problem()),
        other => Err(BenchError::Config(format!(
            "unknown problem {other:?}, expected \"reactor\" or \"mixer\""
        ))),
    }
}

/// Noiseless outputs at the training and test inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub train: DMatrix<f64>,
    pub test: DMatrix<f64>,
}

fn linspace(t0: f64, tf: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![t0],
        _ => (0..n).map(|i| t0 + (tf - t0) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Deterministic train/test datasets: noisy training outputs, noiseless test
/// outputs.
pub fn generate_data(
    prob: &BenchmarkProblem,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(Dataset, Dataset, Truth), BenchError> {
    if n_train == 0 || n_test == 0 {
        return Err(BenchError::Config("n_train and n_test must be at least 1".into()));
    }
    let out = prob.output_dim();
    prob.noise.validate(out)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (u_train, u_test) = match &prob.sampling {
        InputSampling::TimeGrid { t0, tf, points } => {
            let grid = linspace(*t0, *tf, *points);
            let mut order: Vec<usize> = (0..grid.len()).collect();
            order.shuffle(&mut rng);
            let train: Vec<f64> = if n_train <= grid.len() {
                let mut pick = order[..n_train].to_vec();
                pick.sort_unstable();
                pick.into_iter().map(|i| grid[i]).collect()
            } else {
                (0..n_train).map(|i| grid[i % grid.len()]).collect()
            };
            (
                DMatrix::from_column_slice(n_train, 1, &train),
                DMatrix::from_column_slice(n_test, 1, &linspace(*t0, *tf, n_test)),
            )
        }
        InputSampling::UniformBox { lower, upper } => {
            let mut draw = |n: usize| {
                let mut m = DMatrix::zeros(n, lower.len());
                for i in 0..n {
                    for k in 0..lower.len() {
                        m[(i, k)] = rng.random_range(lower[k]..upper[k]);
                    }
                }
                m
            };
            let train = draw(n_train);
            let test = draw(n_test);
            (train, test)
        }
    };
    let truth_train = prob.truth.evaluate(&u_train)?;
    let truth_test = prob.truth.evaluate(&u_test)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(prob.noise.stream);
    let mut y_train = truth_train.clone();
    for i in 0..n_train {
        for k in 0..out {
            let s = prob.noise.sigma[k];
            let e = if s > 0.0 {
                Normal::new(0.0, s).expect("sigma validated").sample(&mut noise_rng)
            } else {
                0.0
            };
            y_train[(i, k)] += prob.noise.bias[k] + e;
        }
    }
    let train = Dataset::new(u_train, y_train)?;
    let test = Dataset::new(u_test, truth_test.clone())?;
    Ok((
        train,
        test,
        Truth {
            train: truth_train,
            test: truth_test,
        },
    ))
}

/// Architecture choice for a benchmark model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    /// Hidden layer widths of the ML component.
    pub hidden: Vec<usize>,
    pub topology: Topology,
    /// RK4 step of neural differential models.
    pub ode_step: f64,
    /// Project the learned rate onto the null space of fixed linear
    /// constraints so the integrated state conserves them.
    pub conservative_rhs: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            hidden: vec![8],
            topology: Topology::MlToP,
            ode_step: 0.125,
            conservative_rhs: false,
        }
    }
}

/// Perfect mixing with an even split, the mechanistic prior for the
/// physics-first topology.
#[derive(Debug, Clone, Copy)]
struct EvenSplitMixer;

impl AlgebraicPhysics for EvenSplitMixer {
    fn output_dim(&self) -> usize {
        3
    }
    fn latent_dim(&self) -> usize {
        0
    }
    fn param_dim(&self) -> usize {
        0
    }
    fn build(&self, g: &mut ExprGraph, u: &[f64], _z: Option<NodeId>, _theta: NodeId) -> NodeId {
        let total = u[0] + u[2];
        g.constant_vector(&[0.5 * total, 0.5 * total, (u[0] * u[1] + u[2] * u[3]) / total])
    }
}

/// Mass-balanced mixer whose split fraction is the latent `z`.
#[derive(Debug, Clone, Copy)]
struct LearnedSplitMixer;

impl AlgebraicPhysics for LearnedSplitMixer {
    fn output_dim(&self) -> usize {
        3
    }
    fn latent_dim(&self) -> usize {
        1
    }
    fn param_dim(&self) -> usize {
        0
    }
    fn build(&self, g: &mut ExprGraph, u: &[f64], z: Option<NodeId>, _theta: NodeId) -> NodeId {
        let total = u[0] + u[2];
        let a = g.constant(Tensor::matrix(3, 1, vec![total, -total, 0.0]));
        let c = g.constant_vector(&[0.0, total, (u[0] * u[1] + u[2] * u[3]) / total]);
        let split = g.matvec(a, z.expect("split physics consumes z"));
        g.add(split, c)
    }
}

/// Row-major `I − Aᵀ(AAᵀ)⁻¹A` for a fixed linear constraint set.
fn null_space_projector(cs: &ConstraintSet) -> Result<Vec<f64>, BenchError> {
    let a = match cs.fixed_linear() {
        Some((a, _)) if cs.is_linear() => a,
        _ => {
            return Err(BenchError::Config(
                "conservative_rhs needs a fixed linear constraint set".into(),
            ))
        }
    };
    let gram = a * a.transpose();
    let inv = gram
        .try_inverse()
        .ok_or_else(|| BenchError::Config("constraint matrix is rank deficient".into()))?;
    let p = DMatrix::identity(a.ncols(), a.ncols()) - a.transpose() * inv * a;
    Ok(linalg::to_row_major(&p))
}

/// Benchmark model for `spec`. The reactor uses a neural differential model
/// of the species concentrations.
pub fn build_model(prob: &BenchmarkProblem, spec: &ModelSpec) -> Result<PcmlModel, BenchError> {
    let layers = |input: usize, output: usize| {
        let mut l = vec![input];
        l.extend(&spec.hidden);
        l.push(output);
        MlComponent::new(l)
    };
    match (&prob.truth, spec.topology) {
        (GroundTruth::Ode { system, .. }, Topology::MlToP) => {
            let n = system.x0.len();
            let physics = PhysicsComponent::fixed(PhysicsMap::Ode(NeuralOde {
                x0: system.x0.clone(),
                t0: system.t0,
                step: spec.ode_step,
                rhs_projector: if spec.conservative_rhs {
                    Some(null_space_projector(&prob.constraints)?)
                } else {
                    None
                },
            }))?;
            Ok(PcmlModel::new(layers(n, n)?, physics, Topology::MlToP, 1)?)
        }
        (GroundTruth::Ode { .. }, t) => Err(BenchError::Config(format!(
            "the {} problem supports only the ml_to_p topology, got {t:?}",
            prob.name
        ))),
        (GroundTruth::Algebraic(_), Topology::MlToP) => {
            let (d, n) = (prob.input_dim(), prob.output_dim());
            let physics = PhysicsComponent::fixed(PhysicsMap::PassThrough { dim: n })?;
            Ok(PcmlModel::new(layers(d, n)?, physics, Topology::MlToP, d)?)
        }
        (GroundTruth::Algebraic(_), Topology::PToMl) => {
            let (d, n) = (prob.input_dim(), prob.output_dim());
            let physics = PhysicsComponent::fixed(PhysicsMap::Custom(Arc::new(EvenSplitMixer)))?;
            Ok(PcmlModel::new(layers(d + n, n)?, physics, Topology::PToMl, d)?)
        }
        (GroundTruth::Algebraic(_), Topology::Bidirectional) => {
            let (d, n) = (prob.input_dim(), prob.output_dim());
            let physics = PhysicsComponent::fixed(PhysicsMap::Custom(Arc::new(LearnedSplitMixer)))?;
            Ok(PcmlModel::new(layers(d + n, 1)?, physics, Topology::Bidirectional, d)?)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse_train: f64,
    pub rmse_test: f64,
    pub max_violation: f64,
    pub mean_violation: f64,
    pub coverage95: Option<f64>,
    pub mean_band_width: Option<f64>,
    pub wall_time_secs: f64,
}

fn rmse(preds: &[DVector<f64>], target: &DMatrix<f64>) -> f64 {
    let mut sq = 0.0;
    for (i, p) in preds.iter().enumerate() {
        for k in 0..p.len() {
            let d = p[k] - target[(i, k)];
            sq += d * d;
        }
    }
    (sq / target.len() as f64).sqrt()
}

/// Metrics from predictions alone. `wall_time_secs` is left at zero.
pub fn metrics_from_predictions(
    cs: &ConstraintSet,
    test_inputs: &DMatrix<f64>,
    test_preds: &[DVector<f64>],
    test_truth: &DMatrix<f64>,
    train_preds: &[DVector<f64>],
    train_targets: &DMatrix<f64>,
    bands: Option<&PredictiveBands>,
) -> Result<MetricsReport, BenchError> {
    if test_preds.len() != test_truth.nrows() || train_preds.len() != train_targets.nrows() {
        return Err(BenchError::Config("prediction and target counts differ".into()));
    }
    let mut max_v = 0.0f64;
    let mut sum_v = 0.0;
    for (i, p) in test_preds.iter().enumerate() {
        let u: Vec<f64> = test_inputs.row(i).iter().copied().collect();
        let v = if cs.is_empty() {
            0.0
        } else {
            linalg::inf_norm(&cs.residual(&u, p.as_slice())?)
        };
        max_v = max_v.max(v);
        sum_v += v;
    }
    let (coverage95, mean_band_width) = match bands {
        Some(b) => (Some(uq::coverage(b, test_truth)?), Some(b.mean_width())),
        None => (None, None),
    };
    Ok(MetricsReport {
        rmse_train: rmse(train_preds, train_targets),
        rmse_test: rmse(test_preds, test_truth),
        max_violation: max_v,
        mean_violation: sum_v / test_preds.len().max(1) as f64,
        coverage95,
        mean_band_width,
        wall_time_secs: 0.0,
    })
}

/// What to evaluate: a point estimate or a posterior summarised by bands.
#[derive(Debug, Clone, Copy)]
pub enum Estimate<'a> {
    Point(&'a ParameterVector),
    Posterior {
        posterior: &'a GaussianPosterior,
        samples: usize,
        beta: f64,
        seed: u64,
    },
}

fn predictions_at(
    model: &PcmlModel,
    prob: &BenchmarkProblem,
    est: &Estimate<'_>,
    projection: Option<ProjectionSettings>,
    inputs: &DMatrix<f64>,
) -> Result<(Vec<DVector<f64>>, Option<PredictiveBands>), BenchError> {
    match est {
        Estimate::Point(theta) => {
            let mut p = train::Predictor::new(model, inputs, &prob.constraints, projection)?;
            Ok((p.predict(theta)?, None))
        }
        Estimate::Posterior {
            posterior,
            samples,
            beta,
            seed,
        } => {
            let bands =
                uq::predictive_bands(model, &prob.constraints, projection, posterior, inputs, *samples, *beta, *seed)?;
            let mean = bands.mean.row_iter().map(|r| r.transpose()).collect();
            Ok((mean, Some(bands)))
        }
    }
}

/// Test-set metrics of a trained model. Predictions are the model's deployed
/// outputs (projected when `projection` is set); with a posterior, the
/// predictive mean.
pub fn evaluate(
    model: &PcmlModel,
    est: Estimate<'_>,
    projection: Option<ProjectionSettings>,
    prob: &BenchmarkProblem,
    train: &Dataset,
    test: &Dataset,
) -> Result<(MetricsReport, Option<PredictiveBands>), BenchError> {
    let start = Instant::now();
    let (test_preds, bands) = predictions_at(model, prob, &est, projection, &test.u)?;
    let (train_preds, _) = match est {
        Estimate::Posterior { posterior, .. } => {
            let mean = ParameterVector::new(posterior.mu.clone(), model.layout())?;
            predictions_at(model, prob, &Estimate::Point(&mean), projection, &train.u)?
        }
        point => predictions_at(model, prob, &point, projection, &train.u)?,
    };
    let mut m = metrics_from_predictions(
        &prob.constraints,
        &test.u,
        &test_preds,
        &test.y,
        &train_preds,
        &train.y,
        bands.as_ref(),
    )?;
    m.wall_time_secs = start.elapsed().as_secs_f64();
    Ok((m, bands))
}

const COMPARISON_EPOCHS: usize = 6000;

fn comparison_model() -> ModelSpec {
    ModelSpec {
        hidden: vec![16],
        ..ModelSpec::default()
    }
}

/// One arm of an experiment: architecture, training and optional VI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArmConfig {
    pub name: String,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub vi: Option<ViConfig>,
}

impl Default for ArmConfig {
    fn default() -> Self {
        Self {
            name: "model".into(),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            vi: None,
        }
    }
}

impl ArmConfig {
    /// Neural differential model trained on the data alone.
    pub fn standalone_ml() -> Self {
        Self {
            name: "ml".into(),
            model: comparison_model(),
            train: TrainConfig {
                lambda_p: 0.0,
                max_epochs: COMPARISON_EPOCHS,
                ..TrainConfig::default()
            },
            vi: Some(ViConfig::default()),
        }
    }

    /// Same architecture with its predictions projected onto the constraints.
    pub fn pcml() -> Self {
        Self {
            name: "pcml".into(),
            model: comparison_model(),
            train: TrainConfig {
                mode: train::TrainMode::HardSequential,
                max_epochs: COMPARISON_EPOCHS,
                ..TrainConfig::default()
            },
            vi: Some(ViConfig::default()),
        }
    }
}

/// Everything produced by one arm on one dataset.
#[derive(Debug, Clone)]
pub struct ArmOutcome {
    pub metrics: MetricsReport,
    pub train_report: TrainReport,
    pub vi_report: Option<ViReport>,
    pub posterior: Option<GaussianPosterior>,
    pub bands: Option<PredictiveBands>,
    /// Deployed point predictions at the test inputs.
    pub test_predictions: Vec<DVector<f64>>,
}

/// Offset separating the band-sampling stream from the VI stream.
pub const BAND_SEED_OFFSET: u64 = 0x5eed_ba4d;

/// Trains, optionally runs VI and evaluates `arm` on the given data.
pub fn run_arm(
    prob: &BenchmarkProblem,
    arm: &ArmConfig,
    train_data: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<ArmOutcome, BenchError> {
    let start = Instant::now();
    let model = build_model(prob, &arm.model)?;
    let cfg = TrainConfig {
        seed,
        ..arm.train.clone()
    };
    let report = train::train(&model, train_data, &prob.constraints, &cfg)?;
    let theta = report.theta.clone();
    let projection = cfg.mode.is_hard().then(|| cfg.projection());
    let test_predictions = deployed_predictions(&model, &test.u, &prob.constraints, &theta, cfg.mode, cfg.projection())?;
    let (metrics, vi_report, posterior, bands) = match &arm.vi {
        None => {
            let (m, _) = evaluate(&model, Estimate::Point(&theta), projection, prob, train_data, test)?;
            (m, None, None, None)
        }
        Some(vi) => {
            let vi = ViConfig { seed, ..vi.clone() };
            let noise = prob.noise.sigma.iter().copied().fold(0.0, f64::max);
            if !(noise > 0.0) {
                return Err(BenchError::Config("VI needs a positive noise sigma".into()));
            }
            let prior = Prior::standard_normal(model.param_count());
            let (post, vr) =
                uq::train_vi(&model, train_data, &prob.constraints, projection, &vi, &prior, noise, &theta)?;
            let est = Estimate::Posterior {
                posterior: &post,
                samples: vi.band_samples,
                beta: vi.beta,
                seed: seed.wrapping_add(BAND_SEED_OFFSET),
            };
            let (m, bands) = evaluate(&model, est, projection, prob, train_data, test)?;
            (m, Some(vr), Some(post), bands)
        }
    };
    Ok(ArmOutcome {
        metrics: MetricsReport {
            wall_time_secs: start.elapsed().as_secs_f64(),
            ..metrics
        },
        train_report: report,
        vi_report,
        posterior,
        bands,
        test_predictions,
    })
}

/// One arm's result on one seed; failures are kept as messages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub seed: u64,
    pub arm: String,
    pub metrics: Option<MetricsReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<ComparisonRow>,
    /// Seeds where both arms succeeded.
    pub paired_seeds: usize,
    /// Seeds where the constrained arm has the lower test RMSE.
    pub rmse_wins: usize,
    /// Seeds where the constrained arm has the strictly narrower mean band.
    pub band_wins: usize,
    pub mean_band_width_ml: Option<f64>,
    pub mean_band_width_pcml: Option<f64>,
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.collect::<Option<Vec<f64>>>()?;
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Paired runs of a standalone-ML arm and a constrained arm on `seeds`, both
/// trained on the same data per seed.
pub fn compare_ml_vs_pcml(
    prob: &BenchmarkProblem,
    ml: &ArmConfig,
    pcml: &ArmConfig,
    seeds: &[u64],
) -> Result<ComparisonTable, BenchError> {
    if seeds.len() < 3 {
        return Err(BenchError::Config(format!(
            "a comparison needs at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    let per_seed: Vec<(u64, Result<MetricsReport, String>, Result<MetricsReport, String>)> = seeds
        .par_iter()
        .map(|&seed| {
            let data = generate_data(prob, prob.split.n_train, prob.split.n_test, seed);
            let run = |arm: &ArmConfig| match &data {
                Ok((tr, te, _)) => run_arm(prob, arm, tr, te, seed)
                    .map(|o| o.metrics)
                    .map_err(|e| e.to_string()),
                Err(e) => Err(e.to_string()),
            };
            (seed, run(ml), run(pcml))
        })
        .collect();
    let mut rows = Vec::with_capacity(2 * seeds.len());
    let (mut paired, mut rmse_wins, mut band_wins) = (0, 0, 0);
    for (seed, a, b) in &per_seed {
        if let (Ok(m), Ok(p)) = (a, b) {
            paired += 1;
            if p.rmse_test < m.rmse_test {
                rmse_wins += 1;
            }
            if let (Some(wm), Some(wp)) = (m.mean_band_width, p.mean_band_width) {
                if wp < wm {
                    band_wins += 1;
                }
            }
        }
        for (arm, r) in [(&ml.name, a), (&pcml.name, b)] {
            rows.push(ComparisonRow {
                seed: *seed,
                arm: arm.clone(),
                metrics: r.as_ref().ok().cloned(),
                error: r.as_ref().err().cloned(),
            });
        }
    }
    let width = |name: &String| {
        mean_of(
            rows.iter()
                .filter(|r| &r.arm == name && r.metrics.is_some())
                .map(|r| r.metrics.as_ref().and_then(|m| m.mean_band_width)),
        )
    };
    let (mean_band_width_ml, mean_band_width_pcml) = (width(&ml.name), width(&pcml.name));
    Ok(ComparisonTable {
        rows,
        paired_seeds: paired,
        rmse_wins,
        band_wins,
        mean_band_width_ml,
        mean_band_width_pcml,
    })
}
