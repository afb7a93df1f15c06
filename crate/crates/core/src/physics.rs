//! Physical knowledge carriers: equality-constraint sets describing the
//! feasible manifold, ODE systems and a fixed-step RK4 integrator that
//! records onto an [`ExprGraph`] so trajectories stay differentiable.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ExprGraph, NodeId, Tensor};
use crate::linalg;

/// Relative pivot tolerance for the full-row-rank check on linear constraints.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PhysicsError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("linear constraint matrix is rank deficient")]
    RankDeficient,
    #[error("constraint set with {constraints} constraints on {dim} variables is not under-determined")]
    NotUnderdetermined { constraints: usize, dim: usize },
    #[error("stoichiometry does not conserve total moles (column {column} sums to {sum})")]
    NotConserving { column: usize, sum: f64 },
    #[error("invalid integrator configuration: {0}")]
    Integrator(String),
    #[error("integration blew up near t = {time}")]
    BlowUp { time: f64 },
    #[error(transparent)]
    Graph(#[from] AutodiffError),
}

/// A scalar equality residual `c(u, v)` with analytic derivatives in `v`.
pub trait NonlinearResidual: Send + Sync + fmt::Debug {
    fn value(&self, u: &[f64], v: &[f64]) -> f64;
    fn gradient(&self, u: &[f64], v: &[f64]) -> DVector<f64>;
    fn hessian(&self, u: &[f64], v: &[f64]) -> DMatrix<f64>;
}

/// `coefficient * Π v_k^{powers[k]}`
#[derive(Debug, Clone, PartialEq)]
pub struct Monomial {
    pub coefficient: f64,
    pub powers: Vec<u32>,
}

/// Polynomial residual in the constrained variables; ignores `u`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialResidual {
    dim: usize,
    terms: Vec<Monomial>,
}

impl PolynomialResidual {
    pub fn new(dim: usize, terms: Vec<Monomial>) -> Result<Self, PhysicsError> {
        if let Some(t) = terms.iter().find(|t| t.powers.len() != dim) {
            return Err(PhysicsError::Dimension(format!(
                "monomial has {} powers, expected {dim}",
                t.powers.len()
            )));
        }
        Ok(Self { dim, terms })
    }

    /// `v₁² + v₂² − r²`
    pub fn circle(radius: f64) -> Self {
        Self {
            dim: 2,
            terms: vec![
                Monomial { coefficient: 1.0, powers: vec![2, 0] },
                Monomial { coefficient: 1.0, powers: vec![0, 2] },
                Monomial { coefficient: -radius * radius, powers: vec![0, 0] },
            ],
        }
    }

    /// `v₁ v₂ − c`
    pub fn hyperbola(c: f64) -> Self {
        Self {
            dim: 2,
            terms: vec![
                Monomial { coefficient: 1.0, powers: vec![1, 1] },
                Monomial { coefficient: -c, powers: vec![0, 0] },
            ],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    fn monomial_derivative(t: &Monomial, v: &[f64], wrt: &[usize]) -> f64 {
        let mut coef = t.coefficient;
        let mut powers: Vec<i64> = t.powers.iter().map(|&p| p as i64).collect();
        for &k in wrt {
            if powers[k] == 0 {
                return 0.0;
            }
            coef *= powers[k] as f64;
            powers[k] -= 1;
        }
        powers
            .iter()
            .zip(v)
            .fold(coef, |acc, (&p, &x)| acc * x.powi(p as i32))
    }
}

impl NonlinearResidual for PolynomialResidual {
    fn value(&self, _u: &[f64], v: &[f64]) -> f64 {
        self.terms
            .iter()
            .map(|t| Self::monomial_derivative(t, v, &[]))
            .sum()
    }

    fn gradient(&self, _u: &[f64], v: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.dim, |k, _| {
            self.terms
                .iter()
                .map(|t| Self::monomial_derivative(t, v, &[k]))
                .sum()
        })
    }

    fn hessian(&self, _u: &[f64], v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(self.dim, self.dim, |i, j| {
            self.terms
                .iter()
                .map(|t| Self::monomial_derivative(t, v, &[i, j]))
                .sum()
        })
    }
}

/// Linear constraints `A(u) v = b(u)` whose coefficients depend on the input.
pub trait AffineFamily: Send + Sync + fmt::Debug {
    fn rows(&self) -> usize;
    fn constraints(&self, u: &[f64]) -> (DMatrix<f64>, DVector<f64>);
}

#[derive(Debug, Clone)]
pub enum LinearPart {
    Fixed { a: DMatrix<f64>, b: DVector<f64> },
    InputDependent(Arc<dyn AffineFamily>),
}

impl LinearPart {
    fn rows(&self) -> usize {
        match self {
            LinearPart::Fixed { a, .. } => a.nrows(),
            LinearPart::InputDependent(f) => f.rows(),
        }
    }
}

/// Equality constraints `[A v − b; c₁(u, v); …] = 0` on an `n`-dimensional
/// constrained variable.
#[derive(Debug, Clone)]
pub struct ConstraintSet {
    dim: usize,
    linear: Option<LinearPart>,
    nonlinear: Vec<Arc<dyn NonlinearResidual>>,
}

impl ConstraintSet {
    pub fn new(
        dim: usize,
        linear: Option<LinearPart>,
        nonlinear: Vec<Arc<dyn NonlinearResidual>>,
    ) -> Result<Self, PhysicsError> {
        if let Some(LinearPart::Fixed { a, b }) = &linear {
            if a.ncols() != dim || a.nrows() != b.len() {
                return Err(PhysicsError::Dimension(format!(
                    "A is {}x{}, b has {} entries, dim is {dim}",
                    a.nrows(),
                    a.ncols(),
                    b.len()
                )));
            }
            if !linalg::has_full_row_rank(a, RANK_TOLERANCE) {
                return Err(PhysicsError::RankDeficient);
            }
        }
        let set = Self {
            dim,
            linear,
            nonlinear,
        };
        let m = set.num_constraints();
        if m >= dim {
            return Err(PhysicsError::NotUnderdetermined {
                constraints: m,
                dim,
            });
        }
        Ok(set)
    }

    pub fn linear(a: DMatrix<f64>, b: DVector<f64>) -> Result<Self, PhysicsError> {
        let dim = a.ncols();
        Self::new(dim, Some(LinearPart::Fixed { a, b }), Vec::new())
    }

    pub fn input_dependent(dim: usize, family: Arc<dyn AffineFamily>) -> Result<Self, PhysicsError> {
        Self::new(dim, Some(LinearPart::InputDependent(family)), Vec::new())
    }

    pub fn nonlinear(
        dim: usize,
        residuals: Vec<Arc<dyn NonlinearResidual>>,
    ) -> Result<Self, PhysicsError> {
        Self::new(dim, None, residuals)
    }

    /// The vacuous set `0 = 0`.
    pub fn empty(dim: usize) -> Self {
        Self {
            dim,
            linear: None,
            nonlinear: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_linear(&self) -> usize {
        self.linear.as_ref().map_or(0, LinearPart::rows)
    }

    pub fn num_constraints(&self) -> usize {
        self.num_linear() + self.nonlinear.len()
    }

    pub fn is_empty(&self) -> bool {
        self.num_constraints() == 0
    }

    /// True when every constraint is affine in `v`.
    pub fn is_linear(&self) -> bool {
        self.nonlinear.is_empty()
    }

    /// `(A, b)` when the linear part does not depend on the input.
    pub fn fixed_linear(&self) -> Option<(&DMatrix<f64>, &DVector<f64>)> {
        match self.linear.as_ref()? {
            LinearPart::Fixed { a, b } => Some((a, b)),
            LinearPart::InputDependent(_) => None,
        }
    }

    /// `(A, b)` evaluated at `u`, if a linear part exists.
    pub fn linear_at(&self, u: &[f64]) -> Option<(DMatrix<f64>, DVector<f64>)> {
        match self.linear.as_ref()? {
            LinearPart::Fixed { a, b } => Some((a.clone(), b.clone())),
            LinearPart::InputDependent(f) => Some(f.constraints(u)),
        }
    }

    fn check_dim(&self, v: &[f64]) -> Result<(), PhysicsError> {
        if v.len() != self.dim {
            return Err(PhysicsError::Dimension(format!(
                "constrained variable has {} entries, expected {}",
                v.len(),
                self.dim
            )));
        }
        Ok(())
    }

    /// Stacked residual `[A v − b; c₁(u, v); …]`.
    pub fn residual(&self, u: &[f64], v: &[f64]) -> Result<DVector<f64>, PhysicsError> {
        self.check_dim(v)?;
        let mut out = Vec::with_capacity(self.num_constraints());
        if let Some((a, b)) = self.linear_at(u) {
            let av = &a * DVector::from_column_slice(v) - b;
            out.extend(av.iter());
        }
        out.extend(self.nonlinear.iter().map(|c| c.value(u, v)));
        Ok(DVector::from_vec(out))
    }

    /// Stacked Jacobian `[A; ∇c₁ᵀ; …]` with respect to `v`.
    pub fn residual_jacobian(&self, u: &[f64], v: &[f64]) -> Result<DMatrix<f64>, PhysicsError> {
        self.check_dim(v)?;
        let mut jac = DMatrix::zeros(self.num_constraints(), self.dim);
        let mut row = 0;
        if let Some((a, _)) = self.linear_at(u) {
            jac.rows_mut(0, a.nrows()).copy_from(&a);
            row = a.nrows();
        }
        for c in &self.nonlinear {
            jac.row_mut(row).copy_from(&c.gradient(u, v).transpose());
            row += 1;
        }
        Ok(jac)
    }

    /// `Σⱼ wⱼ ∇²cⱼ(u, v)` over the stacked rows; affine rows contribute nothing.
    pub fn weighted_hessian(&self, u: &[f64], v: &[f64], weights: &[f64]) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.dim, self.dim);
        let offset = self.num_linear();
        for (j, c) in self.nonlinear.iter().enumerate() {
            let w = weights[offset + j];
            if w != 0.0 {
                h += c.hessian(u, v) * w;
            }
        }
        h
    }
}

/// Stoichiometric description of a closed batch reaction network.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesBalance {
    /// Species × reactions stoichiometric coefficients.
    pub stoichiometry: DMatrix<f64>,
    pub initial: Vec<f64>,
}

impl SpeciesBalance {
    /// A → B → C with one column per reaction.
    pub fn series_abc(initial: [f64; 3]) -> Self {
        Self {
            stoichiometry: DMatrix::from_row_slice(3, 2, &[-1.0, 0.0, 1.0, -1.0, 0.0, 1.0]),
            initial: initial.to_vec(),
        }
    }
}

/// Total-mole conservation `Σᵢ Cᵢ = Σᵢ Cᵢ(0)` for a mole-conserving network.
pub fn make_species_balance(desc: &SpeciesBalance) -> Result<ConstraintSet, PhysicsError> {
    let n = desc.stoichiometry.nrows();
    if desc.initial.len() != n {
        return Err(PhysicsError::Dimension(format!(
            "{} initial concentrations for {n} species",
            desc.initial.len()
        )));
    }
    for (column, col) in desc.stoichiometry.column_iter().enumerate() {
        let sum: f64 = col.iter().sum();
        if sum.abs() > 1e-12 {
            return Err(PhysicsError::NotConserving { column, sum });
        }
    }
    let a = DMatrix::from_element(1, n, 1.0);
    let b = DVector::from_element(1, desc.initial.iter().sum());
    ConstraintSet::linear(a, b)
}

/// Right-hand side `f(t, x, θ)` recorded onto an expression graph.
pub trait OdeRhs: Send + Sync + fmt::Debug {
    fn state_dim(&self) -> usize;
    fn param_dim(&self) -> usize;
    fn build(&self, g: &mut ExprGraph, t: f64, x: NodeId, theta: NodeId) -> NodeId;
}

/// `dx/dt = M x`
#[derive(Debug, Clone, PartialEq)]
pub struct LinearRhs {
    matrix: Tensor,
}

impl LinearRhs {
    pub fn new(matrix: &DMatrix<f64>) -> Self {
        Self {
            matrix: Tensor::matrix(matrix.nrows(), matrix.ncols(), linalg::to_row_major(matrix)),
        }
    }
}

impl OdeRhs for LinearRhs {
    fn state_dim(&self) -> usize {
        self.matrix.rows
    }

    fn param_dim(&self) -> usize {
        0
    }

    fn build(&self, g: &mut ExprGraph, _t: f64, x: NodeId, _theta: NodeId) -> NodeId {
        let m = g.constant(self.matrix.clone());
        g.matvec(m, x)
    }
}

/// Mass-action kinetics of A → B → C with rate constants `θ = (k₁, k₂)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SeriesReactionRhs;

impl OdeRhs for SeriesReactionRhs {
    fn state_dim(&self) -> usize {
        3
    }

    fn param_dim(&self) -> usize {
        2
    }

    fn build(&self, g: &mut ExprGraph, _t: f64, x: NodeId, theta: NodeId) -> NodeId {
        // rates r = k ⊙ (C_A, C_B); dC/dt = N r
        let select = g.constant(Tensor::matrix(2, 3, vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]));
        let reactants = g.matvec(select, x);
        let rates = g.mul(theta, reactants);
        let stoich = g.constant(Tensor::matrix(3, 2, vec![-1.0, 0.0, 1.0, -1.0, 0.0, 1.0]));
        g.matvec(stoich, rates)
    }
}

/// Initial-value problem observed on an evenly spaced grid over `[t0, tf]`.
#[derive(Debug, Clone)]
pub struct OdeSystem {
    pub rhs: Arc<dyn OdeRhs>,
    pub x0: Vec<f64>,
    pub t0: f64,
    pub tf: f64,
    pub n_obs: usize,
}

impl OdeSystem {
    pub fn new(
        rhs: Arc<dyn OdeRhs>,
        x0: Vec<f64>,
        t0: f64,
        tf: f64,
        n_obs: usize,
    ) -> Result<Self, PhysicsError> {
        if x0.len() != rhs.state_dim() {
            return Err(PhysicsError::Dimension(format!(
                "initial state has {} entries, rhs expects {}",
                x0.len(),
                rhs.state_dim()
            )));
        }
        if n_obs < 2 || !(tf > t0) {
            return Err(PhysicsError::Integrator(
                "need tf > t0 and at least two observation times".into(),
            ));
        }
        Ok(Self {
            rhs,
            x0,
            t0,
            tf,
            n_obs,
        })
    }

    pub fn observation_interval(&self) -> f64 {
        (self.tf - self.t0) / (self.n_obs - 1) as f64
    }

    pub fn observation_times(&self) -> Vec<f64> {
        let dt = self.observation_interval();
        (0..self.n_obs).map(|i| self.t0 + i as f64 * dt).collect()
    }
}

/// Fixed-step classic RK4 settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    pub step: f64,
    pub steps_per_interval: usize,
}

impl IntegratorConfig {
    /// Step size chosen so `steps_per_interval` steps span one observation interval.
    pub fn for_system(sys: &OdeSystem, steps_per_interval: usize) -> Self {
        Self {
            step: sys.observation_interval() / steps_per_interval.max(1) as f64,
            steps_per_interval,
        }
    }

    pub fn validate(&self, sys: &OdeSystem) -> Result<(), PhysicsError> {
        if !(self.step > 0.0) || self.steps_per_interval == 0 {
            return Err(PhysicsError::Integrator(
                "step must be positive and steps_per_interval nonzero".into(),
            ));
        }
        let dt = sys.observation_interval();
        let span = self.step * self.steps_per_interval as f64;
        if (span - dt).abs() > 1e-12 * dt.max(1.0) {
            return Err(PhysicsError::Integrator(format!(
                "{} steps of {} span {span}, observation interval is {dt}",
                self.steps_per_interval, self.step
            )));
        }
        Ok(())
    }
}

/// Records one classic RK4 step of size `h` from `(t, x)`.
pub fn rk4_step<F>(g: &mut ExprGraph, rhs: &mut F, t: f64, x: NodeId, h: f64) -> NodeId
where
    F: FnMut(&mut ExprGraph, f64, NodeId) -> NodeId,
{
    let k1 = rhs(g, t, x);
    let d1 = g.scale(k1, 0.5 * h);
    let x1 = g.add(x, d1);
    let k2 = rhs(g, t + 0.5 * h, x1);
    let d2 = g.scale(k2, 0.5 * h);
    let x2 = g.add(x, d2);
    let k3 = rhs(g, t + 0.5 * h, x2);
    let d3 = g.scale(k3, h);
    let x3 = g.add(x, d3);
    let k4 = rhs(g, t + h, x3);
    let k23 = g.add(k2, k3);
    let k23 = g.scale(k23, 2.0);
    let s = g.add(k1, k23);
    let s = g.add(s, k4);
    let incr = g.scale(s, h / 6.0);
    g.add(x, incr)
}

/// States at each query time, recorded as graph nodes.
#[derive(Debug, Clone)]
pub struct RecordedTrajectory {
    /// One node per query time, in query order.
    pub states: Vec<NodeId>,
    /// `(first node index, time)` for every recorded step, ascending by node.
    pub step_marks: Vec<(usize, f64)>,
}

impl RecordedTrajectory {
    /// Start time of the step that produced `node`.
    pub fn time_of_node(&self, node: usize) -> Option<f64> {
        self.step_marks
            .iter()
            .take_while(|(first, _)| *first <= node)
            .last()
            .map(|&(_, t)| t)
    }
}

/// Integrates on the fixed grid `t0 + k h` and branches a partial step for
/// query times between grid points. The main trajectory is shared, so a
/// state at time `t` is computed by the same operations regardless of which
/// other times are queried.
pub fn record_rk4<F>(
    g: &mut ExprGraph,
    rhs: &mut F,
    x0: NodeId,
    t0: f64,
    h: f64,
    query_times: &[f64],
) -> Result<RecordedTrajectory, PhysicsError>
where
    F: FnMut(&mut ExprGraph, f64, NodeId) -> NodeId,
{
    if !(h > 0.0) {
        return Err(PhysicsError::Integrator("step must be positive".into()));
    }
    let mut order: Vec<usize> = (0..query_times.len()).collect();
    order.sort_by(|&a, &b| query_times[a].total_cmp(&query_times[b]));
    let mut grid = vec![x0];
    let mut states = vec![x0; query_times.len()];
    let mut step_marks = Vec::new();
    for &q in &order {
        let t = query_times[q];
        if !t.is_finite() || t < t0 - 1e-12 {
            return Err(PhysicsError::Integrator(format!(
                "query time {t} precedes initial time {t0}"
            )));
        }
        let k = (((t - t0) / h) + 1e-9).floor().max(0.0) as usize;
        while grid.len() <= k {
            let j = grid.len() - 1;
            let tj = t0 + j as f64 * h;
            step_marks.push((g.len(), tj));
            let next = rk4_step(g, rhs, tj, grid[j], h);
            grid.push(next);
        }
        let tk = t0 + k as f64 * h;
        let rem = t - tk;
        states[q] = if rem <= 1e-12 * h.max(t.abs()) {
            grid[k]
        } else {
            step_marks.push((g.len(), tk));
            rk4_step(g, rhs, tk, grid[k], rem)
        };
    }
    step_marks.sort_by_key(|m| m.0);
    Ok(RecordedTrajectory { states, step_marks })
}

/// Integrates `sys` with RK4 and returns the state at every observation time
/// (rows) for parameters `theta`.
pub fn integrate(
    sys: &OdeSystem,
    cfg: &IntegratorConfig,
    theta: &[f64],
) -> Result<DMatrix<f64>, PhysicsError> {
    cfg.validate(sys)?;
    integrate_at(sys, cfg.step, theta, &sys.observation_times())
}

/// Like [`integrate`] but at arbitrary query times `≥ t0`.
pub fn integrate_at(
    sys: &OdeSystem,
    step: f64,
    theta: &[f64],
    times: &[f64],
) -> Result<DMatrix<f64>, PhysicsError> {
    if theta.len() != sys.rhs.param_dim() {
        return Err(PhysicsError::Dimension(format!(
            "{} parameters supplied, rhs expects {}",
            theta.len(),
            sys.rhs.param_dim()
        )));
    }
    let mut g = ExprGraph::new();
    let x0 = g.leaf("x0", sys.x0.len(), 1);
    let th = g.leaf("theta", theta.len(), 1);
    let rhs = sys.rhs.clone();
    let mut f = |g: &mut ExprGraph, t: f64, x: NodeId| rhs.build(g, t, x, th);
    let traj = record_rk4(&mut g, &mut f, x0, sys.t0, step, times)?;
    g.bind(x0, &sys.x0)?;
    g.bind(th, theta)?;
    if let Err(e) = g.evaluate() {
        return Err(match e {
            AutodiffError::NumericOverflow { node, .. } => PhysicsError::BlowUp {
                time: traj.time_of_node(node).unwrap_or(sys.t0),
            },
            other => other.into(),
        });
    }
    let n = sys.x0.len();
    Ok(DMatrix::from_fn(times.len(), n, |r, c| {
        g.value(traj.states[r]).data[c]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sum_to_one() -> ConstraintSet {
        ConstraintSet::linear(
            DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
            DVector::from_vec(vec![1.0]),
        )
        .unwrap()
    }

    #[test]
    fn linear_residual_examples() {
        let cs = sum_to_one();
        assert_eq!(cs.residual(&[], &[0.5, 0.5]).unwrap()[0], 0.0);
        assert_eq!(cs.residual(&[], &[1.0, 1.0]).unwrap()[0], 1.0);
        assert!(matches!(cs.residual(&[], &[1.0]), Err(PhysicsError::Dimension(_))));
    }

    #[test]
    fn circle_residual_and_jacobian() {
        let cs = ConstraintSet::nonlinear(2, vec![Arc::new(PolynomialResidual::circle(1.0))]).unwrap();
        assert_eq!(cs.residual(&[], &[1.0, 0.0]).unwrap()[0], 0.0);
        let j = cs.residual_jacobian(&[], &[1.0, 0.0]).unwrap();
        assert_eq!(j, DMatrix::from_row_slice(1, 2, &[2.0, 0.0]));
    }

    #[test]
    fn linear_jacobian_is_a() {
        let cs = sum_to_one();
        for v in [[0.0, 0.0], [3.0, -7.0]] {
            assert_eq!(
                cs.residual_jacobian(&[], &v).unwrap(),
                DMatrix::from_row_slice(1, 2, &[1.0, 1.0])
            );
        }
    }

    #[test]
    fn rejects_rank_deficient_and_overdetermined() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert_eq!(
            ConstraintSet::linear(a, DVector::zeros(2)).unwrap_err(),
            PhysicsError::RankDeficient
        );
        let a = DMatrix::identity(2, 2);
        assert!(matches!(
            ConstraintSet::linear(a, DVector::zeros(2)),
            Err(PhysicsError::NotUnderdetermined { .. })
        ));
    }

    #[test]
    fn species_balance_examples() {
        let cs = make_species_balance(&SpeciesBalance::series_abc([1.0, 0.0, 0.0])).unwrap();
        let (a, b) = cs.linear_at(&[]).unwrap();
        assert_eq!(a, DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]));
        assert_eq!(b[0], 1.0);
        assert!(cs.residual(&[], &[0.2, 0.5, 0.3]).unwrap()[0].abs() < 1e-15);
        assert!((cs.residual(&[], &[0.2, 0.5, 0.4]).unwrap()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn non_conserving_network_rejected() {
        let desc = SpeciesBalance {
            stoichiometry: DMatrix::from_row_slice(2, 1, &[-1.0, 2.0]),
            initial: vec![1.0, 0.0],
        };
        assert!(matches!(
            make_species_balance(&desc),
            Err(PhysicsError::NotConserving { column: 0, .. })
        ));
    }

    fn decay(x0: f64, t0: f64, tf: f64, n_obs: usize) -> OdeSystem {
        let m = DMatrix::from_element(1, 1, -1.0);
        OdeSystem::new(Arc::new(LinearRhs::new(&m)), vec![x0], t0, tf, n_obs).unwrap()
    }

    #[test]
    fn zero_field_is_constant() {
        let m = DMatrix::zeros(1, 1);
        let sys = OdeSystem::new(Arc::new(LinearRhs::new(&m)), vec![5.0], 0.0, 2.0, 5).unwrap();
        let traj = integrate(&sys, &IntegratorConfig::for_system(&sys, 10), &[]).unwrap();
        assert!(traj.iter().all(|&x| x == 5.0));
    }

    #[test]
    fn exponential_decay_matches_closed_form() {
        let sys = decay(1.0, 0.0, 1.0, 2);
        let cfg = IntegratorConfig { step: 0.01, steps_per_interval: 100 };
        let traj = integrate(&sys, &cfg, &[]).unwrap();
        assert!((traj[(1, 0)] - (-1.0f64).exp()).abs() < 1e-6);
        assert!((traj[(1, 0)] - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn integrator_config_must_span_interval() {
        let sys = decay(1.0, 0.0, 1.0, 3);
        let bad = IntegratorConfig { step: 0.1, steps_per_interval: 3 };
        assert!(matches!(integrate(&sys, &bad, &[]), Err(PhysicsError::Integrator(_))));
    }

    #[test]
    fn partial_steps_reach_off_grid_times() {
        let sys = decay(1.0, 0.0, 1.0, 2);
        let out = integrate_at(&sys, 0.01, &[], &[0.333, 0.0, 0.7]).unwrap();
        assert!((out[(0, 0)] - (-0.333f64).exp()).abs() < 1e-9);
        assert_eq!(out[(1, 0)], 1.0);
        assert!((out[(2, 0)] - (-0.7f64).exp()).abs() < 1e-9);
    }

    #[test]
    fn blow_up_reports_time() {
        let m = DMatrix::from_element(1, 1, 1e80);
        let sys = OdeSystem::new(Arc::new(LinearRhs::new(&m)), vec![1.0], 0.0, 2.0, 3).unwrap();
        let err = integrate(&sys, &IntegratorConfig::for_system(&sys, 1), &[]).unwrap_err();
        match err {
            PhysicsError::BlowUp { time } => assert!((0.0..=2.0).contains(&time)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn time_translation_invariance() {
        let a = decay(1.0, 0.0, 2.0, 9);
        let b = decay(1.0, 3.5, 5.5, 9);
        let ta = integrate(&a, &IntegratorConfig::for_system(&a, 4), &[]).unwrap();
        let tb = integrate(&b, &IntegratorConfig::for_system(&b, 4), &[]).unwrap();
        assert_eq!(ta, tb);
    }

    #[test]
    fn series_reaction_conserves_moles() {
        let sys = OdeSystem::new(Arc::new(SeriesReactionRhs), vec![1.0, 0.0, 0.0], 0.0, 5.0, 21).unwrap();
        let traj = integrate(&sys, &IntegratorConfig::for_system(&sys, 25), &[1.0, 0.5]).unwrap();
        for row in traj.row_iter() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }
}
