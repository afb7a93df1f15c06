//! Hybrid model structures: an ML component, a physics component and the
//! topology coupling them.
//!
//! * `MlToP`: `z = φ_ML(u)`, `ŷ = φ_P(u, z)`.
//! * `PToMl`: `w = φ_P(u)`, `ŷ = w + φ_ML([u; w])` (additive correction).
//! * `Bidirectional`: `z = φ_ML([u; ŷ])`, `ŷ = φ_P(u, z)`, solved as a fixed
//!   point by damped Picard iteration and differentiated implicitly.
//!
//! Evaluation goes through [`BatchEvaluator`], which records the model once
//! per input batch and re-evaluates it for every parameter vector.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ExprGraph, Gradient, NodeId, Tensor};
use crate::linalg;
use crate::physics::{self, PhysicsError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid dataset: {0}")]
    Data(String),
    #[error("fixed-point iteration diverged after {iterations} iterations (residual {residual:e})")]
    Divergence { residual: f64, iterations: usize },
    #[error("row {row}: {source}")]
    Row {
        row: usize,
        #[source]
        source: Box<ModelError>,
    },
    #[error("implicit backward: fixed-point Jacobian is singular")]
    SingularFixedPoint,
    #[error("evaluate must be called before vjp")]
    NotEvaluated,
    #[error(transparent)]
    Graph(#[from] AutodiffError),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
}

/// Coupling structure between the ML and physics components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Topology {
    MlToP,
    PToMl,
    Bidirectional,
}

/// Fully connected network with tanh hidden layers and a linear output layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlComponent {
    layer_sizes: Vec<usize>,
}

impl MlComponent {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self, ModelError> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(ModelError::Dimension(format!(
                "layer sizes {layer_sizes:?} need at least two positive entries"
            )));
        }
        Ok(Self { layer_sizes })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// `params` holds `[W₁, b₁, W₂, b₂, …]` leaves.
    pub fn build(&self, g: &mut ExprGraph, input: NodeId, params: &[NodeId]) -> NodeId {
        let mut h = input;
        let last = self.num_layers() - 1;
        for layer in 0..self.num_layers() {
            let wh = g.matvec(params[2 * layer], h);
            let a = g.add(wh, params[2 * layer + 1]);
            h = if layer == last { a } else { g.tanh(a) };
        }
        h
    }
}

/// A user-supplied algebraic physics map `ŷ = φ_P(u, z, θ_P)`.
pub trait AlgebraicPhysics: Send + Sync + fmt::Debug {
    fn output_dim(&self) -> usize;
    /// Dimension of `z` consumed; zero for maps of `u` alone.
    fn latent_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn build(&self, g: &mut ExprGraph, u: &[f64], z: Option<NodeId>, theta_p: NodeId) -> NodeId;
}

/// Neural differential model: `dx/dt = φ_ML(x)`, `x(t0) = x0`, `ŷ(t) = x(t)`.
/// The model input is the query time.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralOde {
    pub x0: Vec<f64>,
    pub t0: f64,
    pub step: f64,
    /// Optional row-major `n × n` matrix applied to `φ_ML(x)`, e.g. the
    /// projector onto the null space of a conserved linear combination.
    pub rhs_projector: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub enum PhysicsMap {
    /// `ŷ = z`
    PassThrough { dim: usize },
    /// `ŷ = z + θ_P`
    Offset { dim: usize },
    Ode(NeuralOde),
    Custom(Arc<dyn AlgebraicPhysics>),
}

impl PhysicsMap {
    pub fn output_dim(&self) -> usize {
        match self {
            PhysicsMap::PassThrough { dim } | PhysicsMap::Offset { dim } => *dim,
            PhysicsMap::Ode(ode) => ode.x0.len(),
            PhysicsMap::Custom(c) => c.output_dim(),
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            PhysicsMap::PassThrough { dim } | PhysicsMap::Offset { dim } => *dim,
            PhysicsMap::Ode(ode) => ode.x0.len(),
            PhysicsMap::Custom(c) => c.latent_dim(),
        }
    }

    pub fn param_dim(&self) -> usize {
        match self {
            PhysicsMap::PassThrough { .. } | PhysicsMap::Ode(_) => 0,
            PhysicsMap::Offset { dim } => *dim,
            PhysicsMap::Custom(c) => c.param_dim(),
        }
    }

    fn build(&self, g: &mut ExprGraph, u: &[f64], z: Option<NodeId>, theta_p: NodeId) -> NodeId {
        match self {
            PhysicsMap::PassThrough { .. } => z.expect("pass-through physics needs z"),
            PhysicsMap::Offset { .. } => g.add(z.expect("offset physics needs z"), theta_p),
            PhysicsMap::Custom(c) => c.build(g, u, z, theta_p),
            PhysicsMap::Ode(_) => unreachable!("ODE physics is recorded by the batch builder"),
        }
    }
}

/// Physics map plus its learnable parameters `θ_P`.
#[derive(Debug, Clone)]
pub struct PhysicsComponent {
    map: PhysicsMap,
    nominal: Vec<f64>,
    trainable: Vec<bool>,
}

impl PhysicsComponent {
    pub fn new(map: PhysicsMap, nominal: Vec<f64>, trainable: Vec<bool>) -> Result<Self, ModelError> {
        if nominal.len() != map.param_dim() || trainable.len() != nominal.len() {
            return Err(ModelError::Dimension(format!(
                "physics map takes {} parameters; got {} nominal values and {} mask entries",
                map.param_dim(),
                nominal.len(),
                trainable.len()
            )));
        }
        Ok(Self {
            map,
            nominal,
            trainable,
        })
    }

    /// A parameter-free map.
    pub fn fixed(map: PhysicsMap) -> Result<Self, ModelError> {
        let n = map.param_dim();
        Self::new(map, vec![0.0; n], vec![false; n])
    }

    pub fn map(&self) -> &PhysicsMap {
        &self.map
    }

    pub fn nominal(&self) -> &[f64] {
        &self.nominal
    }

    pub fn trainable(&self) -> &[bool] {
        &self.trainable
    }

    pub fn output_dim(&self) -> usize {
        self.map.output_dim()
    }
}

/// Damped Picard settings for the bidirectional fixed point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedPointConfig {
    pub damping: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            damping: 0.5,
            max_iters: 500,
            tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    MlWeight(usize),
    MlBias(usize),
    Physics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub role: TensorRole,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Maps slices of the flat parameter vector to model tensors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterLayout {
    segments: Vec<Segment>,
    len: usize,
}

impl ParameterLayout {
    fn for_model(ml: &MlComponent, physics_dim: usize) -> Self {
        let mut segments = Vec::new();
        let mut offset = 0;
        let mut push = |role, rows, cols| {
            segments.push(Segment {
                role,
                offset,
                rows,
                cols,
            });
            offset += rows * cols;
        };
        for (layer, w) in ml.layer_sizes.windows(2).enumerate() {
            push(TensorRole::MlWeight(layer), w[1], w[0]);
            push(TensorRole::MlBias(layer), w[1], 1);
        }
        push(TensorRole::Physics, physics_dim, 1);
        Self {
            segments,
            len: offset,
        }
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn physics_segment(&self) -> &Segment {
        self.segments.last().expect("layout always has a physics segment")
    }
}

/// Flat parameter vector `θ = (θ_ML, θ_P)` with its layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub values: Vec<f64>,
    pub layout: ParameterLayout,
}

impl ParameterVector {
    pub fn new(values: Vec<f64>, layout: ParameterLayout) -> Result<Self, ModelError> {
        if values.len() != layout.len() {
            return Err(ModelError::Dimension(format!(
                "{} parameter values for a layout of {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { values, layout })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// One tensor per layout segment.
    pub fn unflatten(&self) -> Vec<Tensor> {
        self.layout
            .segments
            .iter()
            .map(|s| Tensor::matrix(s.rows, s.cols, self.values[s.range()].to_vec()))
            .collect()
    }

    pub fn flatten(layout: &ParameterLayout, tensors: &[Tensor]) -> Result<Self, ModelError> {
        if tensors.len() != layout.segments.len() {
            return Err(ModelError::Dimension(format!(
                "{} tensors for {} segments",
                tensors.len(),
                layout.segments.len()
            )));
        }
        let mut values = Vec::with_capacity(layout.len);
        for (t, s) in tensors.iter().zip(&layout.segments) {
            if t.shape() != (s.rows, s.cols) {
                return Err(ModelError::Dimension(format!(
                    "tensor {:?} is {}x{}, segment expects {}x{}",
                    s.role, t.rows, t.cols, s.rows, s.cols
                )));
            }
            values.extend_from_slice(&t.data);
        }
        Ok(Self {
            values,
            layout: layout.clone(),
        })
    }

    pub fn physics(&self) -> &[f64] {
        &self.values[self.layout.physics_segment().range()]
    }

    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        Self {
            values,
            layout: self.layout.clone(),
        }
    }
}

/// Paired inputs and observed outputs, one sample per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub u: DMatrix<f64>,
    pub y: DMatrix<f64>,
}

impl Dataset {
    pub fn new(u: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self, ModelError> {
        if u.nrows() == 0 {
            return Err(ModelError::Data("dataset has no samples".into()));
        }
        if u.nrows() != y.nrows() {
            return Err(ModelError::Data(format!(
                "{} input rows but {} output rows",
                u.nrows(),
                y.nrows()
            )));
        }
        if u.iter().chain(y.iter()).any(|x| !x.is_finite()) {
            return Err(ModelError::Data("dataset contains non-finite entries".into()));
        }
        Ok(Self { u, y })
    }

    pub fn len(&self) -> usize {
        self.u.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input(&self, i: usize) -> Vec<f64> {
        self.u.row(i).iter().copied().collect()
    }

    pub fn output(&self, i: usize) -> DVector<f64> {
        self.y.row(i).transpose()
    }
}

/// ML component + physics component + coupling topology.
#[derive(Debug, Clone)]
pub struct PcmlModel {
    ml: MlComponent,
    physics: PhysicsComponent,
    topology: Topology,
    input_dim: usize,
    pub fixed_point: FixedPointConfig,
}

impl PcmlModel {
    pub fn new(
        ml: MlComponent,
        physics: PhysicsComponent,
        topology: Topology,
        input_dim: usize,
    ) -> Result<Self, ModelError> {
        let out = physics.output_dim();
        let latent = physics.map.latent_dim();
        let mismatch = |what: String| Err(ModelError::Dimension(what));
        if let PhysicsMap::Ode(ode) = &physics.map {
            if topology != Topology::MlToP {
                return mismatch("neural ODE physics requires the MlToP topology".into());
            }
            if input_dim != 1 {
                return mismatch("neural ODE models take time as their only input".into());
            }
            if ml.input_dim() != ode.x0.len() || ml.output_dim() != ode.x0.len() {
                return mismatch(format!(
                    "ODE state has dimension {} but ML maps {} -> {}",
                    ode.x0.len(),
                    ml.input_dim(),
                    ml.output_dim()
                ));
            }
            if ode.rhs_projector.as_ref().is_some_and(|p| p.len() != ode.x0.len() * ode.x0.len()) {
                return mismatch("ODE rhs projector must be n × n".into());
            }
            if !(ode.step > 0.0) {
                return mismatch("ODE step must be positive".into());
            }
        } else {
            let (want_in, want_out) = match topology {
                Topology::MlToP => (input_dim, latent),
                Topology::PToMl => (input_dim + out, out),
                Topology::Bidirectional => (input_dim + out, latent),
            };
            if topology == Topology::PToMl && latent != 0 {
                return mismatch("PToMl physics must not consume z".into());
            }
            if topology != Topology::PToMl && latent == 0 {
                return mismatch("physics map must consume z for this topology".into());
            }
            if ml.input_dim() != want_in || ml.output_dim() != want_out {
                return mismatch(format!(
                    "{topology:?} needs ML {want_in} -> {want_out}, got {} -> {}",
                    ml.input_dim(),
                    ml.output_dim()
                ));
            }
        }
        Ok(Self {
            ml,
            physics,
            topology,
            input_dim,
            fixed_point: FixedPointConfig::default(),
        })
    }

    pub fn with_fixed_point(mut self, cfg: FixedPointConfig) -> Self {
        self.fixed_point = cfg;
        self
    }

    pub fn ml(&self) -> &MlComponent {
        &self.ml
    }

    pub fn physics(&self) -> &PhysicsComponent {
        &self.physics
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.physics.output_dim()
    }

    pub fn layout(&self) -> ParameterLayout {
        ParameterLayout::for_model(&self.ml, self.physics.map.param_dim())
    }

    pub fn param_count(&self) -> usize {
        self.layout().len()
    }

    /// `true` for every parameter a trainer may update.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = vec![true; self.ml.param_count()];
        mask.extend_from_slice(&self.physics.trainable);
        mask
    }
}

/// Glorot-uniform weights, zero biases, nominal physics parameters.
pub fn init_parameters(model: &PcmlModel, rng_seed: u64) -> ParameterVector {
    let layout = model.layout();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut values = vec![0.0; layout.len()];
    for s in layout.segments() {
        match s.role {
            TensorRole::MlWeight(_) => {
                let limit = (6.0 / (s.rows + s.cols) as f64).sqrt();
                for v in &mut values[s.range()] {
                    *v = rng.random_range(-limit..=limit);
                }
            }
            TensorRole::MlBias(_) => {}
            TensorRole::Physics => {
                values[s.range()].copy_from_slice(model.physics.nominal());
            }
        }
    }
    ParameterVector { values, layout }
}

/// Predictions for a batch: `ŷ` and the latent `z` of every sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchPrediction {
    pub y_hat: Vec<DVector<f64>>,
    pub z: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
struct Recorded {
    graph: ExprGraph,
    params: Vec<NodeId>,
    /// Per-sample `ŷ` node (the map output `G` for bidirectional models).
    y_hat: Vec<NodeId>,
    z: Vec<NodeId>,
    y_all: NodeId,
    /// Bidirectional: per-sample leaves carrying the fed-back `ŷ`.
    feedback: Vec<NodeId>,
}

/// Records a model over a fixed batch of inputs and evaluates it with value
/// and vector-Jacobian products in `θ`.
#[derive(Debug, Clone)]
pub struct BatchEvaluator<'m> {
    model: &'m PcmlModel,
    inputs: Vec<Vec<f64>>,
    rec: Recorded,
    /// Bidirectional fixed points from the last `evaluate`.
    fixed_points: Vec<DVector<f64>>,
    evaluated: bool,
    scratch: Option<Gradient>,
}

impl<'m> BatchEvaluator<'m> {
    pub fn new(model: &'m PcmlModel, inputs: &DMatrix<f64>) -> Result<Self, ModelError> {
        if inputs.ncols() != model.input_dim {
            return Err(ModelError::Dimension(format!(
                "inputs have {} columns, model expects {}",
                inputs.ncols(),
                model.input_dim
            )));
        }
        let rows: Vec<Vec<f64>> = inputs.row_iter().map(|r| r.iter().copied().collect()).collect();
        let rec = record(model, &rows)?;
        Ok(Self {
            model,
            inputs: rows,
            rec,
            fixed_points: Vec::new(),
            evaluated: false,
            scratch: None,
        })
    }

    pub fn model(&self) -> &PcmlModel {
        self.model
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i]
    }

    fn bind_theta(&mut self, theta: &ParameterVector) -> Result<(), ModelError> {
        if theta.layout != self.model.layout() {
            return Err(ModelError::Dimension(
                "parameter layout does not match the model".into(),
            ));
        }
        for (leaf, seg) in self.rec.params.iter().zip(theta.layout.segments()) {
            self.rec.graph.bind(*leaf, &theta.values[seg.range()])?;
        }
        Ok(())
    }

    fn collect(&self, nodes: &[NodeId]) -> Vec<DVector<f64>> {
        nodes
            .iter()
            .map(|&n| DVector::from_column_slice(&self.rec.graph.value(n).data))
            .collect()
    }

    /// Forward pass for every sample.
    pub fn evaluate(&mut self, theta: &ParameterVector) -> Result<BatchPrediction, ModelError> {
        self.evaluated = false;
        self.bind_theta(theta)?;
        if self.model.topology == Topology::Bidirectional {
            return self.solve_fixed_points();
        }
        self.rec.graph.evaluate()?;
        self.evaluated = true;
        Ok(BatchPrediction {
            y_hat: self.collect(&self.rec.y_hat),
            z: self.collect(&self.rec.z),
        })
    }

    fn solve_fixed_points(&mut self) -> Result<BatchPrediction, ModelError> {
        let cfg = self.model.fixed_point;
        let n = self.len();
        let out = self.model.output_dim();
        let mut y: Vec<DVector<f64>> = vec![DVector::zeros(out); n];
        let mut done = vec![false; n];
        let mut residuals = vec![f64::INFINITY; n];
        for _ in 0..=cfg.max_iters {
            for (leaf, yi) in self.rec.feedback.iter().zip(&y) {
                self.rec.graph.bind(*leaf, yi.as_slice())?;
            }
            self.rec.graph.evaluate()?;
            let mapped = self.collect(&self.rec.y_hat);
            for i in 0..n {
                if done[i] {
                    continue;
                }
                let r = linalg::inf_norm(&(&mapped[i] - &y[i]));
                residuals[i] = r;
                if r <= cfg.tol {
                    done[i] = true;
                } else {
                    y[i] = &y[i] * (1.0 - cfg.damping) + &mapped[i] * cfg.damping;
                }
            }
            if done.iter().all(|&d| d) {
                self.fixed_points = y.clone();
                self.evaluated = true;
                return Ok(BatchPrediction {
                    y_hat: y,
                    z: self.collect(&self.rec.z),
                });
            }
        }
        let row = done.iter().position(|d| !d).unwrap_or(0);
        let err = ModelError::Divergence {
            residual: residuals[row],
            iterations: cfg.max_iters,
        };
        Err(if n == 1 {
            err
        } else {
            ModelError::Row {
                row,
                source: Box::new(err),
            }
        })
    }

    fn flatten_gradient(&self, grad: &Gradient) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.model.param_count());
        for k in 0..self.rec.params.len() {
            out.extend_from_slice(&grad.by_ordinal(k).data);
        }
        out
    }

    fn take_scratch(&mut self) -> Gradient {
        let mut g = self
            .scratch
            .take()
            .unwrap_or_else(|| self.rec.graph.zero_gradient());
        g.zero();
        g
    }

    /// Gradient in `θ` of `Σᵢ seedsᵢ · ŷᵢ` at the last evaluated point.
    /// Bidirectional models are differentiated through their fixed point.
    pub fn vjp(&mut self, seeds: &[DVector<f64>]) -> Result<Vec<f64>, ModelError> {
        if !self.evaluated {
            return Err(ModelError::NotEvaluated);
        }
        if seeds.len() != self.len() {
            return Err(ModelError::Dimension(format!(
                "{} seeds for {} samples",
                seeds.len(),
                self.len()
            )));
        }
        let seeds = if self.model.topology == Topology::Bidirectional {
            let mut adjusted = Vec::with_capacity(seeds.len());
            for (i, s) in seeds.iter().enumerate() {
                // (I − ∂G/∂ŷ)ᵀ w = s
                let jac = self.map_jacobian(i)?;
                let k = DMatrix::identity(jac.nrows(), jac.ncols()) - jac;
                let w = linalg::solve(&k.transpose(), s).ok_or(ModelError::SingularFixedPoint)?;
                adjusted.push(w);
            }
            adjusted
        } else {
            seeds.to_vec()
        };
        self.backward_concat(&seeds)
    }

    fn backward_concat(&mut self, seeds: &[DVector<f64>]) -> Result<Vec<f64>, ModelError> {
        let seed: Vec<f64> = seeds.iter().flat_map(|s| s.iter().copied()).collect();
        let mut grad = self.take_scratch();
        self.rec
            .graph
            .backward_accumulate(self.rec.y_all, &seed, &mut grad)?;
        let out = self.flatten_gradient(&grad);
        self.scratch = Some(grad);
        Ok(out)
    }

    /// Bidirectional only: evaluates `G(ŷ_in) = φ_P(u, φ_ML([u; ŷ_in]))` per sample.
    pub fn evaluate_map(
        &mut self,
        theta: &ParameterVector,
        feedback: &[DVector<f64>],
    ) -> Result<BatchPrediction, ModelError> {
        assert_eq!(self.model.topology, Topology::Bidirectional);
        self.evaluated = false;
        self.bind_theta(theta)?;
        for (leaf, yi) in self.rec.feedback.iter().zip(feedback) {
            self.rec.graph.bind(*leaf, yi.as_slice())?;
        }
        self.rec.graph.evaluate()?;
        self.evaluated = true;
        Ok(BatchPrediction {
            y_hat: self.collect(&self.rec.y_hat),
            z: self.collect(&self.rec.z),
        })
    }

    /// Bidirectional only: `θ`-gradient of `Σᵢ seedsᵢ · Gᵢ` at the last
    /// `evaluate_map` point, with the fed-back `ŷ` held fixed.
    pub fn map_vjp(&mut self, seeds: &[DVector<f64>]) -> Result<Vec<f64>, ModelError> {
        if !self.evaluated {
            return Err(ModelError::NotEvaluated);
        }
        self.backward_concat(seeds)
    }

    /// Bidirectional only: `∂Gᵢ/∂ŷ_in,ᵢ` at the current graph point.
    pub fn map_jacobian(&mut self, i: usize) -> Result<DMatrix<f64>, ModelError> {
        let out = self.model.output_dim();
        let node = self.rec.y_hat[i];
        let leaf = self.rec.feedback[i];
        let mut jac = DMatrix::zeros(out, out);
        let mut seed = vec![0.0; out];
        for r in 0..out {
            seed.iter_mut().for_each(|s| *s = 0.0);
            seed[r] = 1.0;
            let grad = self.rec.graph.backward(node, &seed)?;
            let row = grad.wrt(leaf).expect("feedback leaf");
            for c in 0..out {
                jac[(r, c)] = row.data[c];
            }
        }
        Ok(jac)
    }
}

fn record(model: &PcmlModel, inputs: &[Vec<f64>]) -> Result<Recorded, ModelError> {
    let mut g = ExprGraph::new();
    let layout = model.layout();
    let params: Vec<NodeId> = layout
        .segments()
        .iter()
        .map(|s| {
            let name = match s.role {
                TensorRole::MlWeight(l) => format!("W{l}"),
                TensorRole::MlBias(l) => format!("b{l}"),
                TensorRole::Physics => "theta_p".to_string(),
            };
            g.leaf(&name, s.rows, s.cols)
        })
        .collect();
    let ml_params = &params[..params.len() - 1];
    let theta_p = *params.last().unwrap();
    let out_dim = model.output_dim();
    let mut y_hat = Vec::with_capacity(inputs.len());
    let mut z = Vec::with_capacity(inputs.len());
    let mut feedback = Vec::new();

    match (&model.physics.map, model.topology) {
        (PhysicsMap::Ode(ode), _) => {
            let times: Vec<f64> = inputs.iter().map(|u| u[0]).collect();
            let x0 = g.constant_vector(&ode.x0);
            let ml = &model.ml;
            let n = ode.x0.len();
            let projector = ode
                .rhs_projector
                .as_ref()
                .map(|p| g.constant(Tensor::matrix(n, n, p.clone())));
            let mut rhs = |g: &mut ExprGraph, _t: f64, x: NodeId| {
                let f = ml.build(g, x, ml_params);
                match projector {
                    Some(p) => g.matvec(p, f),
                    None => f,
                }
            };
            let traj = physics::record_rk4(&mut g, &mut rhs, x0, ode.t0, ode.step, &times)?;
            for &state in &traj.states {
                y_hat.push(state);
                z.push(ml.build(&mut g, state, ml_params));
            }
        }
        (map, Topology::MlToP) => {
            for u in inputs {
                let uc = g.constant_vector(u);
                let zi = model.ml.build(&mut g, uc, ml_params);
                y_hat.push(map.build(&mut g, u, Some(zi), theta_p));
                z.push(zi);
            }
        }
        (map, Topology::PToMl) => {
            for u in inputs {
                let w = map.build(&mut g, u, None, theta_p);
                let uc = g.constant_vector(u);
                let joined = g.concat(&[uc, w]);
                let correction = model.ml.build(&mut g, joined, ml_params);
                y_hat.push(g.add(w, correction));
                z.push(w);
            }
        }
        (map, Topology::Bidirectional) => {
            for (i, u) in inputs.iter().enumerate() {
                let fb = g.leaf(&format!("y_feedback_{i}"), out_dim, 1);
                let uc = g.constant_vector(u);
                let joined = g.concat(&[uc, fb]);
                let zi = model.ml.build(&mut g, joined, ml_params);
                y_hat.push(map.build(&mut g, u, Some(zi), theta_p));
                z.push(zi);
                feedback.push(fb);
            }
        }
    }
    let y_all = g.concat(&y_hat);
    Ok(Recorded {
        graph: g,
        params,
        y_hat,
        z,
        y_all,
        feedback,
    })
}

/// `ŷ` and `z` for one input.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub y_hat: DVector<f64>,
    pub z: DVector<f64>,
}

pub fn forward(model: &PcmlModel, u: &[f64], theta: &ParameterVector) -> Result<Forward, ModelError> {
    let inputs = DMatrix::from_row_slice(1, u.len(), u);
    let mut eval = BatchEvaluator::new(model, &inputs)?;
    let mut pred = eval.evaluate(theta)?;
    Ok(Forward {
        y_hat: pred.y_hat.pop().unwrap(),
        z: pred.z.pop().unwrap(),
    })
}

/// Row-wise forward over `inputs`; returns `(Ŷ, Z)` with one row per input.
pub fn predict_batch(
    model: &PcmlModel,
    inputs: &DMatrix<f64>,
    theta: &ParameterVector,
) -> Result<(DMatrix<f64>, DMatrix<f64>), ModelError> {
    if inputs.nrows() == 0 {
        return Err(ModelError::Data("empty input batch".into()));
    }
    let mut eval = BatchEvaluator::new(model, inputs)?;
    let pred = eval.evaluate(theta)?;
    Ok((stack_rows(&pred.y_hat), stack_rows(&pred.z)))
}

/// Stacks column vectors as matrix rows.
pub fn stack_rows(rows: &[DVector<f64>]) -> DMatrix<f64> {
    let cols = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(rows.len(), cols, |r, c| rows[r][c])
}


#[cfg(test)]
mod tests {
    use super::tests_support::linear_bidirectional;
    use super::*;

    #[test]
    fn param_count_formula() {
        let ml = MlComponent::new(vec![3, 8, 8, 2]).unwrap();
        assert_eq!(ml.param_count(), 3 * 8 + 8 + 8 * 8 + 8 + 8 * 2 + 2);
    }

    #[test]
    fn pass_through_physics_returns_ml_output() {
        let ml = MlComponent::new(vec![2, 4, 2]).unwrap();
        let physics = PhysicsComponent::fixed(PhysicsMap::PassThrough { dim: 2 }).unwrap();
        let model = PcmlModel::new(ml, physics, Topology::MlToP, 2).unwrap();
        let theta = init_parameters(&model, 3);
        for u in [[0.1, 0.2], [-1.0, 4.0]] {
            let f = forward(&model, &u, &theta).unwrap();
            assert_eq!(f.y_hat, f.z);
        }
    }

    #[test]
    fn bidirectional_linear_fixed_point() {
        let (model, theta) = linear_bidirectional();
        let f = forward(&model, &[0.0], &theta).unwrap();
        assert!((f.y_hat[0] - 2.0).abs() < 1e-9);
        assert!((f.z[0] - 1.0).abs() < 1e-9);
        // substituting back: ŷ − (z + 1) within tol
        assert!((f.y_hat[0] - (f.z[0] + 1.0)).abs() <= model.fixed_point.tol);
    }

    #[test]
    fn bidirectional_divergence_reports_residual() {
        let (model, theta) = linear_bidirectional();
        let theta = theta.with_values(vec![0.0, 3.0, 0.0]);
        let model = model.with_fixed_point(FixedPointConfig {
            damping: 1.0,
            max_iters: 50,
            tol: 1e-10,
        });
        match forward(&model, &[0.0], &theta) {
            Err(ModelError::Divergence { residual, iterations }) => {
                assert_eq!(iterations, 50);
                assert!(residual > 1.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ptoml_with_zero_correction_is_raw_physics() {
        #[derive(Debug)]
        struct Doubler;
        impl AlgebraicPhysics for Doubler {
            fn output_dim(&self) -> usize {
                2
            }
            fn latent_dim(&self) -> usize {
                0
            }
            fn param_dim(&self) -> usize {
                0
            }
            fn build(&self, g: &mut ExprGraph, u: &[f64], _z: Option<NodeId>, _t: NodeId) -> NodeId {
                g.constant_vector(&[2.0 * u[0], u[0] + u[1]])
            }
        }
        let ml = MlComponent::new(vec![4, 3, 2]).unwrap();
        let physics = PhysicsComponent::fixed(PhysicsMap::Custom(Arc::new(Doubler))).unwrap();
        let model = PcmlModel::new(ml, physics, Topology::PToMl, 2).unwrap();
        let mut theta = init_parameters(&model, 1);
        // zero the output layer so the correction vanishes
        let last_w = model.layout().segments()[2];
        theta.values[last_w.range()].iter_mut().for_each(|v| *v = 0.0);
        let f = forward(&model, &[1.5, -0.5], &theta).unwrap();
        assert_eq!(f.y_hat.as_slice(), &[3.0, 1.0]);
    }

    #[test]
    fn init_is_deterministic_with_zero_biases_and_bounded_weights() {
        let ml = MlComponent::new(vec![30, 70, 3]).unwrap();
        let physics = PhysicsComponent::new(PhysicsMap::Offset { dim: 3 }, vec![0.1, 0.2, 0.3], vec![true; 3]).unwrap();
        let model = PcmlModel::new(ml, physics, Topology::MlToP, 30).unwrap();
        let a = init_parameters(&model, 42);
        let b = init_parameters(&model, 42);
        assert_eq!(a, b);
        assert_ne!(a, init_parameters(&model, 43));
        for s in a.layout.segments() {
            let vals = &a.values[s.range()];
            match s.role {
                TensorRole::MlBias(_) => assert!(vals.iter().all(|&v| v == 0.0)),
                TensorRole::MlWeight(_) => {
                    let limit = (6.0 / (s.rows + s.cols) as f64).sqrt();
                    assert!(vals.iter().all(|v| v.abs() <= limit));
                }
                TensorRole::Physics => assert_eq!(vals, &[0.1, 0.2, 0.3]),
            }
        }
    }

    #[test]
    fn dimension_checks() {
        let ml = MlComponent::new(vec![2, 3]).unwrap();
        let physics = PhysicsComponent::fixed(PhysicsMap::PassThrough { dim: 2 }).unwrap();
        assert!(PcmlModel::new(ml, physics, Topology::MlToP, 2).is_err());
        assert!(MlComponent::new(vec![3]).is_err());
        assert!(Dataset::new(DMatrix::zeros(0, 1), DMatrix::zeros(0, 1)).is_err());
        assert!(Dataset::new(DMatrix::zeros(2, 1), DMatrix::zeros(3, 1)).is_err());
    }
}
