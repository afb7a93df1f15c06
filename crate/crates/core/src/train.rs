//! Training regimes: soft penalty, hard projection in the forward pass, and
//! an augmented-Lagrangian method that treats the physics as explicit
//! per-sample equality constraints.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::linalg;
use crate::model::{
    init_parameters, BatchEvaluator, Dataset, ModelError, ParameterVector, PcmlModel, Topology,
};
use crate::physics::{ConstraintSet, PhysicsError};
use crate::project::{self, ProjectError, ProjectionResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Soft,
    HardSequential,
    HardSimultaneous,
}

impl TrainMode {
    /// Whether deployed predictions are projected onto the constraints.
    pub fn is_hard(self) -> bool {
        !matches!(self, TrainMode::Soft)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiplierUpdate {
    /// `μ ← μ + ρ c`
    Classic,
    /// Pure quadratic penalty.
    Frozen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlConfig {
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    /// Grow the penalty when violation shrinks by less than this factor.
    pub shrink_factor: f64,
    pub multiplier_update: MultiplierUpdate,
    pub tol: f64,
    pub inner_epochs: usize,
    pub stall_window: usize,
    pub stall_factor: f64,
    /// Optional `[lo, hi]` box on each predicted output, as a quadratic penalty.
    pub bounds: Option<Vec<[f64; 2]>>,
}

impl Default for AlConfig {
    fn default() -> Self {
        Self {
            initial_penalty: 10.0,
            penalty_growth: 10.0,
            shrink_factor: 0.25,
            multiplier_update: MultiplierUpdate::Classic,
            tol: 1e-6,
            inner_epochs: 100,
            stall_window: 3,
            stall_factor: 0.5,
            bounds: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub lambda_d: f64,
    pub lambda_p: f64,
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop when the relative change of the total loss falls to this value.
    pub loss_tol: f64,
    pub seed: u64,
    pub projection_tol: f64,
    pub projection_max_iters: usize,
    pub al: AlConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Soft,
            lambda_d: 1.0,
            lambda_p: 1.0,
            learning_rate: 1e-2,
            max_epochs: 2000,
            loss_tol: 1e-14,
            seed: 0,
            projection_tol: project::DEFAULT_TOL,
            projection_max_iters: project::DEFAULT_MAX_ITERS,
            al: AlConfig::default(),
        }
    }
}

fn positive(name: &str, v: f64) -> Result<(), TrainError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(TrainError::Config(format!("{name} must be positive and finite, got {v}")))
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        for (name, v) in [("lambda_d", self.lambda_d), ("lambda_p", self.lambda_p)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.lambda_d + self.lambda_p > 0.0) {
            return Err(TrainError::Config("lambda_d + lambda_p must be positive".into()));
        }
        positive("learning_rate", self.learning_rate)?;
        positive("loss_tol", self.loss_tol)?;
        positive("projection_tol", self.projection_tol)?;
        positive("al.initial_penalty", self.al.initial_penalty)?;
        positive("al.tol", self.al.tol)?;
        if self.max_epochs == 0 {
            return Err(TrainError::Config("max_epochs must be at least 1".into()));
        }
        if self.projection_max_iters == 0 || self.al.inner_epochs == 0 || self.al.stall_window == 0 {
            return Err(TrainError::Config(
                "projection_max_iters, al.inner_epochs and al.stall_window must be at least 1".into(),
            ));
        }
        if !(self.al.penalty_growth >= 1.0) {
            return Err(TrainError::Config("al.penalty_growth must be at least 1".into()));
        }
        if !(self.al.shrink_factor > 0.0 && self.al.shrink_factor < 1.0)
            || !(self.al.stall_factor > 0.0 && self.al.stall_factor < 1.0)
        {
            return Err(TrainError::Config(
                "al.shrink_factor and al.stall_factor must lie in (0, 1)".into(),
            ));
        }
        if let Some(bounds) = &self.al.bounds {
            if bounds.iter().any(|[lo, hi]| !(lo <= hi)) {
                return Err(TrainError::Config("al.bounds entries need lo <= hi".into()));
            }
        }
        Ok(())
    }

    pub fn projection(&self) -> ProjectionSettings {
        ProjectionSettings {
            tol: self.projection_tol,
            max_iters: self.projection_max_iters,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StallReport {
    pub outer: usize,
    pub violation: f64,
    pub penalty: f64,
    /// True when the epoch budget ran out rather than progress stalling.
    pub budget_exhausted: bool,
    pub history: Vec<OuterRecord>,
    pub theta: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("epoch {epoch:?}, sample {sample}: projection failed: {source}")]
    Projection {
        epoch: Option<usize>,
        sample: usize,
        #[source]
        source: ProjectError,
    },
    #[error("loss became non-finite at epoch {epoch}")]
    Divergence { epoch: usize },
    #[error("augmented Lagrangian stalled at outer iteration {} with violation {:e} (penalty {:e})", .0.outer, .0.violation, .0.penalty)]
    Stalled(Box<StallReport>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
}

impl TrainError {
    fn at_epoch(self, epoch: usize) -> Self {
        match self {
            TrainError::Projection { sample, source, .. } => TrainError::Projection {
                epoch: Some(epoch),
                sample,
                source,
            },
            TrainError::Model(ModelError::Graph(AutodiffError::NumericOverflow { .. }))
            | TrainError::Model(ModelError::Physics(PhysicsError::BlowUp { .. })) => {
                TrainError::Divergence { epoch }
            }
            other => other,
        }
    }
}

/// Adam moments and hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerState {
    pub fn new(len: usize, learning_rate: f64) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Coordinates with `mask[k] == false` are
/// left untouched, moments included.
pub fn adam_step(state: &mut OptimizerState, theta: &mut [f64], grad: &[f64], mask: Option<&[bool]>) {
    assert_eq!(theta.len(), grad.len());
    assert_eq!(theta.len(), state.m.len());
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for k in 0..theta.len() {
        if mask.is_some_and(|m| !m[k]) {
            continue;
        }
        let g = grad[k];
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g;
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[k] / c1;
        let v_hat = state.v[k] / c2;
        theta[k] -= state.learning_rate * m_hat / (v_hat.sqrt() + state.eps);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub data_loss: f64,
    pub physics_loss: f64,
    pub total_loss: f64,
    pub max_violation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuterRecord {
    pub outer: usize,
    pub epochs: usize,
    pub penalty: f64,
    pub max_violation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "reason")]
pub enum Termination {
    MaxEpochs,
    LossConverged { epoch: usize },
    ConstraintsSatisfied { outer: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub epochs: Vec<EpochRecord>,
    pub outer: Vec<OuterRecord>,
    pub theta: ParameterVector,
    pub wall_time_secs: f64,
    pub termination: Termination,
}

#[derive(Serialize)]
struct ReportSummary<'a> {
    mode: TrainMode,
    epochs: usize,
    final_record: Option<&'a EpochRecord>,
    outer: &'a [OuterRecord],
    termination: Termination,
    wall_time_secs: f64,
}

impl TrainReport {
    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }

    /// Compact JSON summary without the per-epoch trajectory.
    pub fn summary_json(&self) -> String {
        serde_json::to_string_pretty(&ReportSummary {
            mode: self.mode,
            epochs: self.epochs.len(),
            final_record: self.epochs.last(),
            outer: &self.outer,
            termination: self.termination,
            wall_time_secs: self.wall_time_secs,
        })
        .expect("summary serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectionSettings {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for ProjectionSettings {
    fn default() -> Self {
        Self {
            tol: project::DEFAULT_TOL,
            max_iters: project::DEFAULT_MAX_ITERS,
        }
    }
}

/// Batched model predictions with optional output projection, differentiable
/// in `θ`.
#[derive(Debug, Clone)]
pub struct Predictor<'a> {
    eval: BatchEvaluator<'a>,
    cs: &'a ConstraintSet,
    projection: Option<ProjectionSettings>,
    results: Vec<ProjectionResult>,
}

impl<'a> Predictor<'a> {
    pub fn new(
        model: &'a PcmlModel,
        inputs: &DMatrix<f64>,
        cs: &'a ConstraintSet,
        projection: Option<ProjectionSettings>,
    ) -> Result<Self, TrainError> {
        if cs.dim() != model.output_dim() {
            return Err(TrainError::Config(format!(
                "constraints act on {} variables, model predicts {}",
                cs.dim(),
                model.output_dim()
            )));
        }
        Ok(Self {
            eval: BatchEvaluator::new(model, inputs)?,
            cs,
            projection,
            results: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.eval.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eval.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        self.eval.input(i)
    }

    pub fn constraints(&self) -> &ConstraintSet {
        self.cs
    }

    pub fn predict(&mut self, theta: &ParameterVector) -> Result<Vec<DVector<f64>>, TrainError> {
        let raw = self.eval.evaluate(theta)?.y_hat;
        let Some(settings) = self.projection else {
            return Ok(raw);
        };
        self.results.clear();
        for (i, r) in raw.iter().enumerate() {
            let res = project::project(self.cs, self.eval.input(i), r, settings.tol, settings.max_iters)
                .map_err(|source| TrainError::Projection {
                    epoch: None,
                    sample: i,
                    source,
                })?;
            self.results.push(res);
        }
        Ok(self.results.iter().map(|r| r.v_proj.clone()).collect())
    }

    /// `θ`-gradient of `Σᵢ upstreamᵢ · predictionᵢ` at the last `predict`.
    pub fn vjp(&mut self, upstream: &[DVector<f64>]) -> Result<Vec<f64>, TrainError> {
        if self.projection.is_none() {
            return Ok(self.eval.vjp(upstream)?);
        }
        let mut seeds = Vec::with_capacity(upstream.len());
        for (i, (res, g)) in self.results.iter().zip(upstream).enumerate() {
            let s = project::project_backward(res, self.cs, self.eval.input(i), g).map_err(|source| {
                TrainError::Projection {
                    epoch: None,
                    sample: i,
                    source,
                }
            })?;
            seeds.push(s);
        }
        Ok(self.eval.vjp(&seeds)?)
    }
}

fn check_shapes(model: &PcmlModel, data: &Dataset, cs: &ConstraintSet) -> Result<(), TrainError> {
    if data.u.ncols() != model.input_dim() || data.y.ncols() != model.output_dim() {
        return Err(TrainError::Config(format!(
            "dataset is {} -> {}, model is {} -> {}",
            data.u.ncols(),
            data.y.ncols(),
            model.input_dim(),
            model.output_dim()
        )));
    }
    if cs.dim() != model.output_dim() {
        return Err(TrainError::Config(format!(
            "constraints act on {} variables, model predicts {}",
            cs.dim(),
            model.output_dim()
        )));
    }
    Ok(())
}

/// `Σᵢ ‖yᵢ − ŷᵢ‖²` on raw model predictions.
pub fn data_loss(model: &PcmlModel, data: &Dataset, theta: &ParameterVector) -> Result<f64, TrainError> {
    let mut eval = BatchEvaluator::new(model, &data.u)?;
    let pred = eval.evaluate(theta)?;
    Ok(pred
        .y_hat
        .iter()
        .enumerate()
        .map(|(i, p)| (data.output(i) - p).norm_squared())
        .sum())
}

/// `Σᵢ ‖c(uᵢ, ŷᵢ)‖²` on raw (unprojected) model predictions.
pub fn physics_loss(
    model: &PcmlModel,
    data: &Dataset,
    theta: &ParameterVector,
    cs: &ConstraintSet,
) -> Result<f64, TrainError> {
    check_shapes(model, data, cs)?;
    let mut eval = BatchEvaluator::new(model, &data.u)?;
    let pred = eval.evaluate(theta)?;
    let mut total = 0.0;
    for (i, p) in pred.y_hat.iter().enumerate() {
        total += cs.residual(eval.input(i), p.as_slice())?.norm_squared();
    }
    Ok(total)
}

struct LossParts {
    record: EpochRecord,
    upstream: Vec<DVector<f64>>,
}

fn penalized_parts(
    preds: &[DVector<f64>],
    data: &Dataset,
    cs: &ConstraintSet,
    inputs: impl Fn(usize) -> Vec<f64>,
    lambda_d: f64,
    lambda_p: f64,
    epoch: usize,
) -> Result<LossParts, TrainError> {
    let mut data_loss = 0.0;
    let mut physics_loss = 0.0;
    let mut max_violation = 0.0f64;
    let mut upstream = Vec::with_capacity(preds.len());
    for (i, p) in preds.iter().enumerate() {
        let e = p - data.output(i);
        data_loss += e.norm_squared();
        let u = inputs(i);
        let r = cs.residual(&u, p.as_slice())?;
        physics_loss += r.norm_squared();
        max_violation = max_violation.max(linalg::inf_norm(&r));
        let mut g = e * (2.0 * lambda_d);
        if !cs.is_empty() {
            let j = cs.residual_jacobian(&u, p.as_slice())?;
            g += j.transpose() * r * (2.0 * lambda_p);
        }
        upstream.push(g);
    }
    Ok(LossParts {
        record: EpochRecord {
            epoch,
            data_loss,
            physics_loss,
            total_loss: lambda_d * data_loss + lambda_p * physics_loss,
            max_violation,
        },
        upstream,
    })
}

/// Soft or hard-sequential objective and its `θ`-gradient at one point.
pub fn penalized_objective(
    model: &PcmlModel,
    data: &Dataset,
    cs: &ConstraintSet,
    cfg: &TrainConfig,
    theta: &ParameterVector,
) -> Result<(EpochRecord, Vec<f64>), TrainError> {
    check_shapes(model, data, cs)?;
    let projection = (cfg.mode == TrainMode::HardSequential).then(|| cfg.projection());
    let mut predictor = Predictor::new(model, &data.u, cs, projection)?;
    let preds = predictor.predict(theta)?;
    let parts = penalized_parts(&preds, data, cs, |i| data.input(i), cfg.lambda_d, cfg.lambda_p, 0)?;
    let grad = predictor.vjp(&parts.upstream)?;
    Ok((parts.record, grad))
}

fn train_penalized(
    model: &PcmlModel,
    data: &Dataset,
    cs: &ConstraintSet,
    cfg: &TrainConfig,
    theta0: ParameterVector,
) -> Result<TrainReport, TrainError> {
    let start = Instant::now();
    cfg.validate()?;
    check_shapes(model, data, cs)?;
    let projection = (cfg.mode == TrainMode::HardSequential).then(|| cfg.projection());
    let mut predictor = Predictor::new(model, &data.u, cs, projection)?;
    let mask = model.trainable_mask();
    let mut theta = theta0;
    let mut opt = OptimizerState::new(theta.len(), cfg.learning_rate);
    let mut epochs = Vec::with_capacity(cfg.max_epochs);
    let mut termination = Termination::MaxEpochs;
    for epoch in 0..cfg.max_epochs {
        let preds = predictor.predict(&theta).map_err(|e| e.at_epoch(epoch))?;
        let parts = penalized_parts(&preds, data, cs, |i| data.input(i), cfg.lambda_d, cfg.lambda_p, epoch)?;
        if !parts.record.total_loss.is_finite() {
            return Err(TrainError::Divergence { epoch });
        }
        let prev = epochs.last().map(|r: &EpochRecord| r.total_loss);
        epochs.push(parts.record);
        if let Some(prev) = prev {
            if (parts.record.total_loss - prev).abs() <= cfg.loss_tol * prev.abs() {
                termination = Termination::LossConverged { epoch };
                break;
            }
        }
        let grad = predictor.vjp(&parts.upstream).map_err(|e| e.at_epoch(epoch))?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(TrainError::Divergence { epoch });
        }
        adam_step(&mut opt, &mut theta.values, &grad, Some(&mask));
    }
    Ok(TrainReport {
        mode: cfg.mode,
        epochs,
        outer: Vec::new(),
        theta,
        wall_time_secs: start.elapsed().as_secs_f64(),
        termination,
    })
}

/// Adam on `λ_d L_d + λ_p L_p`.
pub fn train_soft(
    model: &PcmlModel,
    data: &Dataset,
    cs: &ConstraintSet,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    train_soft_from(model, data, cs, cfg, init_parameters(model, cfg.seed))
}

pub fn train_soft_from(
    model: &PcmlModel,
    data: &Dataset,
    cs: &ConstraintSet,
    cfg: &TrainConfig,
    theta0: ParameterVector,
) -> Result<TrainReport, TrainError> {
    let cfg = TrainConfig {
        mode: TrainMode::Soft,
        ..cfg.clone()
    };
    train_penalized(model, data, cs, &cfg, theta0)
}

/// Adam with every prediction projected onto the constraints in the forward
/// pass and differentiated through the projection.
pub fn train_hard_sequential(
    model: &PcmlModel,
    data: &Dataset,
    cs: &ConstraintSet,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    train_hard_sequential_from(model, data, cs, cfg, init_parameters(model, cfg.seed))
}

pub fn train_hard_sequential_from(
    model: &PcmlModel,
    data: &Dataset,
    cs: &ConstraintSet,
    cfg: &TrainConfig,
    theta0: ParameterVector,
) -> Result<TrainReport, TrainError> {
    if model.topology() != Topology::MlToP {
        return Err(TrainError::Config(
            "sequential projection training requires the MlToP topology".into(),
        ));
    }
    let cfg = TrainConfig {
        mode: TrainMode::HardSequential,
        ..cfg.clone()
    };
    train_penalized(model, data, cs, &cfg, theta0)
}

/// Lifted variables, multipliers and penalty of the augmented Lagrangian.
///
/// Per sample the lifted vector stacks, in order, the fixed-point output
/// (bidirectional models), the projected prediction `v` and the projection
/// multipliers (non-empty constraint sets).
#[derive(Debug, Clone, PartialEq)]
pub struct AlState {
    pub lifted: Vec<DVector<f64>>,
    pub multipliers: Vec<DVector<f64>>,
    pub penalty: f64,
}

/// Augmented Lagrangian of the constrained learning problem
///
/// ```text
/// min  λ_d Σᵢ ‖yᵢ − predᵢ‖²
/// s.t. ŷᵢ − G(uᵢ, ŷᵢ, θ) = 0          (bidirectional)
///      vᵢ − ŷᵢ − J(vᵢ)ᵀ κᵢ = 0
///      c(uᵢ, vᵢ) = 0
/// ```
///
/// in which `ŷᵢ` is the model output for non-bidirectional topologies and
/// `predᵢ = vᵢ` whenever constraints are present.
#[derive(Debug, Clone)]
pub struct AlProblem<'a> {
    eval: BatchEvaluator<'a>,
    cs: &'a ConstraintSet,
    ys: Vec<DVector<f64>>,
    lambda_d: f64,
    bounds: Option<Vec<[f64; 2]>>,
    bidirectional: bool,
    n: usize,
    m: usize,
    /// Model output (or fixed-point map value) at the current point.
    base: Vec<DVector<f64>>,
}

impl<'a> AlProblem<'a> {
    pub fn new(
        model: &'a PcmlModel,
        data: &'a Dataset,
        cs: &'a ConstraintSet,
        cfg: &TrainConfig,
    ) -> Result<Self, TrainError> {
        check_shapes(model, data, cs)?;
        Ok(Self {
            eval: BatchEvaluator::new(model, &data.u)?,
            cs,
            ys: (0..data.len()).map(|i| data.output(i)).collect(),
            lambda_d: cfg.lambda_d,
            bounds: cfg.al.bounds.clone(),
            bidirectional: model.topology() == Topology::Bidirectional,
            n: model.output_dim(),
            m: cs.num_constraints(),
            base: Vec::new(),
        })
    }

    fn nb(&self) -> usize {
        if self.bidirectional {
            self.n
        } else {
            0
        }
    }

    fn nv(&self) -> usize {
        if self.m > 0 {
            self.n
        } else {
            0
        }
    }

    pub fn lifted_dim(&self) -> usize {
        self.nb() + self.nv() + self.m
    }

    /// Lifted variables at the observed outputs, zero multipliers.
    pub fn initial_state(&self, penalty: f64) -> AlState {
        let dim = self.lifted_dim();
        let lifted = self
            .ys
            .iter()
            .map(|y| {
                let mut x = DVector::zeros(dim);
                if self.bidirectional {
                    x.rows_mut(0, self.n).copy_from(y);
                }
                if self.m > 0 {
                    x.rows_mut(self.nb(), self.n).copy_from(y);
                }
                x
            })
            .collect();
        AlState {
            lifted,
            multipliers: vec![DVector::zeros(dim); self.ys.len()],
            penalty,
        }
    }

    fn refresh(&mut self, theta: &ParameterVector, lifted: &[DVector<f64>]) -> Result<(), TrainError> {
        self.base = if self.bidirectional {
            let fb: Vec<DVector<f64>> = lifted.iter().map(|x| x.rows(0, self.n).into_owned()).collect();
            self.eval.evaluate_map(theta, &fb)?.y_hat
        } else {
            self.eval.evaluate(theta)?.y_hat
        };
        Ok(())
    }

    fn pred(&self, i: usize, x: &DVector<f64>) -> DVector<f64> {
        if self.m > 0 {
            x.rows(self.nb(), self.n).into_owned()
        } else if self.bidirectional {
            x.rows(0, self.n).into_owned()
        } else {
            self.base[i].clone()
        }
    }

    fn constraint(&self, i: usize, x: &DVector<f64>) -> Result<DVector<f64>, TrainError> {
        let (nb, n, m) = (self.nb(), self.n, self.m);
        let mut h = DVector::zeros(self.lifted_dim());
        if self.bidirectional {
            h.rows_mut(0, n).copy_from(&(x.rows(0, n) - &self.base[i]));
        }
        if m > 0 {
            let u = self.eval.input(i);
            let v = x.rows(nb, n).into_owned();
            let kappa = x.rows(nb + n, m).into_owned();
            let y_in = if self.bidirectional {
                x.rows(0, n).into_owned()
            } else {
                self.base[i].clone()
            };
            let jac = self.cs.residual_jacobian(u, v.as_slice())?;
            h.rows_mut(nb, n).copy_from(&(&v - y_in - jac.transpose() * kappa));
            h.rows_mut(nb + n, m).copy_from(&self.cs.residual(u, v.as_slice())?);
        }
        Ok(h)
    }

    fn constraint_jacobian(&mut self, i: usize, x: &DVector<f64>) -> Result<DMatrix<f64>, TrainError> {
        let (nb, n, m) = (self.nb(), self.n, self.m);
        let dim = self.lifted_dim();
        let mut jh = DMatrix::zeros(dim, dim);
        if self.bidirectional {
            let gy = self.eval.map_jacobian(i)?;
            jh.view_mut((0, 0), (n, n))
                .copy_from(&(DMatrix::identity(n, n) - gy));
        }
        if m > 0 {
            let u = self.eval.input(i).to_vec();
            let v = x.rows(nb, n).into_owned();
            let kappa = x.rows(nb + n, m).into_owned();
            let jac = self.cs.residual_jacobian(&u, v.as_slice())?;
            let k = project::kkt_matrix(self.cs, &u, &v, &jac, &kappa, 0.0);
            jh.view_mut((nb, nb), (n + m, n + m)).copy_from(&k);
            if self.bidirectional {
                for r in 0..n {
                    jh[(nb + r, r)] = -1.0;
                }
            }
        }
        Ok(jh)
    }

    /// Penalty on `pred` leaving its box, with gradient and Gauss-Newton diagonal.
    fn bound_terms(&self, pred: &DVector<f64>, rho: f64) -> (f64, DVector<f64>, DVector<f64>) {
        let mut value = 0.0;
        let mut grad = DVector::zeros(pred.len());
        let mut diag = DVector::zeros(pred.len());
        if let Some(bounds) = &self.bounds {
            for (k, [lo, hi]) in bounds.iter().enumerate().take(pred.len()) {
                let d = if pred[k] < *lo {
                    pred[k] - lo
                } else if pred[k] > *hi {
                    pred[k] - hi
                } else {
                    continue;
                };
                value += 0.5 * rho * d * d;
                grad[k] = rho * d;
                diag[k] = rho;
            }
        }
        (value, grad, diag)
    }

    fn sample_value(&self, i: usize, x: &DVector<f64>, state: &AlState) -> Result<f64, TrainError> {
        let pred = self.pred(i, x);
        let mut value = self.lambda_d * (&self.ys[i] - &pred).norm_squared();
        value += self.bound_terms(&pred, state.penalty).0;
        if self.lifted_dim() > 0 {
            let h = self.constraint(i, x)?;
            value += state.multipliers[i].dot(&h) + 0.5 * state.penalty * h.norm_squared();
        }
        Ok(value)
    }

    fn total_value(&self, lifted: &[DVector<f64>], state: &AlState) -> Result<f64, TrainError> {
        let mut total = 0.0;
        for (i, x) in lifted.iter().enumerate() {
            total += self.sample_value(i, x, state)?;
        }
        Ok(total)
    }

    /// Augmented Lagrangian value at `(θ, state)`.
    pub fn lagrangian(&mut self, theta: &ParameterVector, state: &AlState) -> Result<f64, TrainError> {
        self.refresh(theta, &state.lifted)?;
        self.total_value(&state.lifted, state)
    }

    /// `∂L/∂θ` at `(θ, state)`.
    pub fn gradient_theta(&mut self, theta: &ParameterVector, state: &AlState) -> Result<Vec<f64>, TrainError> {
        self.refresh(theta, &state.lifted)?;
        self.gradient_theta_refreshed(state)
    }

    fn gradient_theta_refreshed(&mut self, state: &AlState) -> Result<Vec<f64>, TrainError> {
        let (nb, n) = (self.nb(), self.n);
        let mut seeds = Vec::with_capacity(self.ys.len());
        for (i, x) in state.lifted.iter().enumerate() {
            if self.lifted_dim() == 0 {
                let pred = &self.base[i];
                let mut s = (pred - &self.ys[i]) * (2.0 * self.lambda_d);
                s += self.bound_terms(pred, state.penalty).1;
                seeds.push(s);
                continue;
            }
            let h = self.constraint(i, x)?;
            let w = &state.multipliers[i] + h * state.penalty;
            // Both the fixed-point block and the projection block enter as `… − model output`.
            let offset = if self.bidirectional { 0 } else { nb };
            seeds.push(-w.rows(offset, n).into_owned());
        }
        Ok(if self.bidirectional {
            self.eval.map_vjp(&seeds)?
        } else {
            self.eval.vjp(&seeds)?
        })
    }

    /// `∂L/∂xᵢ` for every sample at `(θ, state)`.
    pub fn gradient_lifted(
        &mut self,
        theta: &ParameterVector,
        state: &AlState,
    ) -> Result<Vec<DVector<f64>>, TrainError> {
        self.refresh(theta, &state.lifted)?;
        let mut out = Vec::with_capacity(self.ys.len());
        for i in 0..self.ys.len() {
            out.push(self.lifted_gradient_and_hessian(i, state)?.0);
        }
        Ok(out)
    }

    fn pred_offset(&self) -> usize {
        if self.m > 0 {
            self.nb()
        } else {
            0
        }
    }

    fn lifted_gradient_and_hessian(
        &mut self,
        i: usize,
        state: &AlState,
    ) -> Result<(DVector<f64>, DMatrix<f64>), TrainError> {
        let x = &state.lifted[i];
        let dim = self.lifted_dim();
        let h = self.constraint(i, x)?;
        let jh = self.constraint_jacobian(i, x)?;
        let w = &state.multipliers[i] + &h * state.penalty;
        let mut grad = jh.transpose() * w;
        let mut hess = jh.transpose() * &jh * state.penalty;
        let pred = self.pred(i, x);
        let off = self.pred_offset();
        let (_, bg, bd) = self.bound_terms(&pred, state.penalty);
        let dg = (&pred - &self.ys[i]) * (2.0 * self.lambda_d) + bg;
        for k in 0..self.n {
            grad[off + k] += dg[k];
            hess[(off + k, off + k)] += 2.0 * self.lambda_d + bd[k];
        }
        let scale = (0..dim).fold(1.0f64, |a, k| a.max(hess[(k, k)]));
        for k in 0..dim {
            hess[(k, k)] += 1e-12 * scale;
        }
        Ok((grad, hess))
    }

    /// One Gauss-Newton step on all lifted variables with a shared
    /// backtracking step length. Requires a prior `refresh` at `θ`.
    fn gauss_newton_step(&mut self, theta: &ParameterVector, state: &mut AlState) -> Result<f64, TrainError> {
        if self.lifted_dim() == 0 {
            return Ok(0.0);
        }
        let mut dirs = Vec::with_capacity(self.ys.len());
        let mut slope = 0.0;
        for i in 0..self.ys.len() {
            let (g, hm) = self.lifted_gradient_and_hessian(i, state)?;
            let d = linalg::solve(&hm, &(-&g)).unwrap_or_else(|| DVector::zeros(g.len()));
            slope += g.dot(&d);
            dirs.push(d);
        }
        let phi0 = self.total_value(&state.lifted, state)?;
        let mut alpha = 1.0;
        for _ in 0..=30 {
            let trial: Vec<DVector<f64>> = state
                .lifted
                .iter()
                .zip(&dirs)
                .map(|(x, d)| x + d * alpha)
                .collect();
            if self.bidirectional {
                self.refresh(theta, &trial)?;
            }
            let phi = self.total_value(&trial, state)?;
            if phi.is_finite() && phi <= phi0 + 1e-4 * alpha * slope {
                let step = dirs.iter().map(|d| linalg::inf_norm(d)).fold(0.0, f64::max) * alpha;
                state.lifted = trial;
                return Ok(step);
            }
            alpha *= 0.5;
        }
        if self.bidirectional {
            self.refresh(theta, &state.lifted)?;
        }
        Ok(0.0)
    }

    /// Max ∞-norm of the per-sample constraint vectors. Requires a prior `refresh`.
    fn violation(&self, state: &AlState) -> Result<(f64, Vec<DVector<f64>>), TrainError> {
        let mut worst = 0.0f64;
        let mut hs = Vec::with_capacity(self.ys.len());
        for (i, x) in state.lifted.iter().enumerate() {
            let h = if self.lifted_dim() > 0 {
                self.constraint(i, x)?
            } else {
                DVector::zeros(0)
            };
            worst = worst.max(linalg::inf_norm(&h));
            hs.push(h);
        }
        Ok((worst, hs))
    }

    fn record(&self, epoch: usize, state: &AlState, lambda_p: f64) -> Result<EpochRecord, TrainError> {
        let mut data_loss = 0.0;
        let mut physics_loss = 0.0;
        for (i, x) in state.lifted.iter().enumerate() {
            let pred = self.pred(i, x);
            data_loss += (&self.ys[i] - &pred).norm_squared();
            physics_loss += self
                .cs
                .residual(self.eval.input(i), pred.as_slice())?
                .norm_squared();
        }
        Ok(EpochRecord {
            epoch,
            data_loss,
            physics_loss,
            total_loss: self.lambda_d * data_loss + lambda_p * physics_loss,
            max_violation: self.violation(state)?.0,
        })
    }
}

/// Augmented-Lagrangian training. Each epoch takes one Adam step on `θ` and
/// one Gauss-Newton step on the lifted variables; every `inner_epochs` the
/// lifted variables are re-solved, multipliers are updated and the penalty
/// grows if the violation did not shrink enough.
pub fn train_hard_simultaneous(
    model: &PcmlModel,
    data: &Dataset,
    cs: &ConstraintSet,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    train_hard_simultaneous_from(model, data, cs, cfg, init_parameters(model, cfg.seed))
}

const LIFTED_SOLVE_STEPS: usize = 20;

pub fn train_hard_simultaneous_from(
    model: &PcmlModel,
    data: &Dataset,
    cs: &ConstraintSet,
    cfg: &TrainConfig,
    theta0: ParameterVector,
) -> Result<TrainReport, TrainError> {
    let start = Instant::now();
    cfg.validate()?;
    let al = &cfg.al;
    let mut prob = AlProblem::new(model, data, cs, cfg)?;
    let mut state = prob.initial_state(al.initial_penalty);
    let mask = model.trainable_mask();
    let mut theta = theta0;
    let mut opt = OptimizerState::new(theta.len(), cfg.learning_rate);
    let mut epochs = Vec::with_capacity(cfg.max_epochs);
    let mut outer_log: Vec<OuterRecord> = Vec::new();
    let n_outer = cfg.max_epochs.div_ceil(al.inner_epochs);
    let mut epoch = 0;
    let mut last_violation = f64::INFINITY;
    let mut satisfied_at = None;
    // First outer iteration of the current run above tolerance.
    let mut above_since = 0;

    for outer in 0..n_outer {
        for _ in 0..al.inner_epochs {
            if epoch >= cfg.max_epochs {
                break;
            }
            prob.refresh(&theta, &state.lifted).map_err(|e| e.at_epoch(epoch))?;
            let rec = prob.record(epoch, &state, cfg.lambda_p)?;
            if !rec.total_loss.is_finite() {
                return Err(TrainError::Divergence { epoch });
            }
            epochs.push(rec);
            let grad = prob.gradient_theta_refreshed(&state).map_err(|e| e.at_epoch(epoch))?;
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Divergence { epoch });
            }
            adam_step(&mut opt, &mut theta.values, &grad, Some(&mask));
            prob.refresh(&theta, &state.lifted).map_err(|e| e.at_epoch(epoch))?;
            prob.gauss_newton_step(&theta, &mut state).map_err(|e| e.at_epoch(epoch))?;
            epoch += 1;
        }
        prob.refresh(&theta, &state.lifted)?;
        for _ in 0..LIFTED_SOLVE_STEPS {
            if prob.gauss_newton_step(&theta, &mut state)? < 1e-14 {
                break;
            }
        }
        prob.refresh(&theta, &state.lifted)?;
        let (violation, hs) = prob.violation(&state)?;
        if !violation.is_finite() {
            return Err(TrainError::Divergence { epoch });
        }
        outer_log.push(OuterRecord {
            outer,
            epochs: epoch,
            penalty: state.penalty,
            max_violation: violation,
        });
        let stall = |budget_exhausted| {
            TrainError::Stalled(Box::new(StallReport {
                outer,
                violation,
                penalty: state.penalty,
                budget_exhausted,
                history: outer_log.clone(),
                theta: theta.values.clone(),
            }))
        };
        if violation <= al.tol {
            satisfied_at.get_or_insert(outer);
            above_since = outer + 1;
        } else {
            satisfied_at = None;
            if outer >= above_since + al.stall_window
                && violation > al.stall_factor * outer_log[outer - al.stall_window].max_violation
            {
                return Err(stall(false));
            }
            if outer + 1 == n_outer {
                return Err(stall(true));
            }
        }
        if al.multiplier_update == MultiplierUpdate::Classic {
            for (mu, h) in state.multipliers.iter_mut().zip(&hs) {
                *mu += h * state.penalty;
            }
        }
        if violation > al.tol && violation > al.shrink_factor * last_violation {
            state.penalty *= al.penalty_growth;
        }
        last_violation = violation;
    }
    Ok(TrainReport {
        mode: TrainMode::HardSimultaneous,
        epochs,
        outer: outer_log,
        theta,
        wall_time_secs: start.elapsed().as_secs_f64(),
        termination: Termination::ConstraintsSatisfied {
            outer: satisfied_at.unwrap_or(0),
        },
    })
}

/// Dispatches on `cfg.mode`.
pub fn train(
    model: &PcmlModel,
    data: &Dataset,
    cs: &ConstraintSet,
    cfg: &TrainConfig,
) -> Result<TrainReport, TrainError> {
    match cfg.mode {
        TrainMode::Soft => train_soft(model, data, cs, cfg),
        TrainMode::HardSequential => train_hard_sequential(model, data, cs, cfg),
        TrainMode::HardSimultaneous => train_hard_simultaneous(model, data, cs, cfg),
    }
}

/// Deployed predictions: projected for hard modes, raw otherwise.
pub fn deployed_predictions(
    model: &PcmlModel,
    inputs: &DMatrix<f64>,
    cs: &ConstraintSet,
    theta: &ParameterVector,
    mode: TrainMode,
    projection: ProjectionSettings,
) -> Result<Vec<DVector<f64>>, TrainError> {
    let mut p = Predictor::new(model, inputs, cs, mode.is_hard().then_some(projection))?;
    p.predict(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MlComponent, PhysicsComponent, PhysicsMap};

    fn linear_model(inputs: usize, outputs: usize) -> PcmlModel {
        let ml = MlComponent::new(vec![inputs, outputs]).unwrap();
        let physics = PhysicsComponent::fixed(PhysicsMap::PassThrough { dim: outputs }).unwrap();
        PcmlModel::new(ml, physics, Topology::MlToP, inputs).unwrap()
    }

    #[test]
    fn adam_zero_gradient_keeps_theta() {
        let mut s = OptimizerState::new(3, 0.1);
        let mut th = vec![1.0, -2.0, 3.0];
        adam_step(&mut s, &mut th, &[0.0; 3], None);
        assert_eq!(th, vec![1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_first_step_is_learning_rate() {
        let mut s = OptimizerState::new(3, 0.01);
        let mut th = vec![0.0; 3];
        adam_step(&mut s, &mut th, &[5.0, -1e-3, 2e4], None);
        for (t, sign) in th.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((t - sign * 0.01).abs() < 1e-6, "{t}");
        }
    }

    #[test]
    fn adam_mask_freezes_coordinates() {
        let mut s = OptimizerState::new(2, 0.1);
        let mut th = vec![0.3, 0.3];
        adam_step(&mut s, &mut th, &[1.0, 1.0], Some(&[true, false]));
        assert_eq!(th[1].to_bits(), 0.3f64.to_bits());
        assert!(th[0] < 0.3);
    }

    #[test]
    fn data_loss_arithmetic() {
        let model = linear_model(1, 2);
        let theta = ParameterVector::new(vec![0.0; 4], model.layout()).unwrap();
        let data = Dataset::new(
            DMatrix::from_row_slice(1, 1, &[0.5]),
            DMatrix::from_row_slice(1, 2, &[1.0, 2.0]),
        )
        .unwrap();
        assert_eq!(data_loss(&model, &data, &theta).unwrap(), 5.0);
    }

    #[test]
    fn physics_loss_arithmetic() {
        let model = linear_model(1, 3);
        // predictions equal the biases
        let mut values = vec![0.0; 6];
        values[3..].copy_from_slice(&[0.2, 0.5, 0.4]);
        let theta = ParameterVector::new(values, model.layout()).unwrap();
        let data = Dataset::new(DMatrix::zeros(1, 1), DMatrix::zeros(1, 3)).unwrap();
        let cs = ConstraintSet::linear(DMatrix::from_row_slice(1, 3, &[1.0; 3]), DVector::from_element(1, 1.0)).unwrap();
        assert!((physics_loss(&model, &data, &theta, &cs).unwrap() - 0.01).abs() < 1e-15);
    }

    #[test]
    fn config_validation_names_field() {
        let cfg = TrainConfig {
            learning_rate: -1.0,
            ..TrainConfig::default()
        };
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("learning_rate"), "{err}");
        let cfg = TrainConfig {
            lambda_d: 0.0,
            lambda_p: 0.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sequential_rejects_bidirectional() {
        let (model, _) = crate::model::tests_support::linear_bidirectional();
        let data = Dataset::new(DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, 2.0)).unwrap();
        let cs = ConstraintSet::empty(1);
        let r = train_hard_sequential(&model, &data, &cs, &TrainConfig::default());
        assert!(matches!(r, Err(TrainError::Config(_))));
    }
}
