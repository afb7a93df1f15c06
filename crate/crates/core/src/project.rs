//! Euclidean projection onto a constraint manifold and its derivative.
//!
//! The projection solves `min ‖v − v0‖²` subject to `c(u, v) = 0`. The KKT
//! conditions are written as
//!
//! ```text
//! v − v0 − J(v)ᵀ λ = 0
//! c(u, v)          = 0
//! ```
//!
//! so that for linear constraints `v = v0 + Aᵀλ`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg;
use crate::physics::{ConstraintSet, PhysicsError, RANK_TOLERANCE};

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITERS: usize = 50;

const BACKTRACK_FACTOR: f64 = 0.5;
const MAX_BACKTRACKS: usize = 30;
const SHIFT_START: f64 = 1e-8;
const SHIFT_GROWTH: f64 = 10.0;
const SHIFT_MAX: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub v_proj: DVector<f64>,
    pub iterations: usize,
    pub final_residual_norm: f64,
    pub multipliers: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProjectError {
    #[error("constraint matrix is rank deficient")]
    RankDeficient,
    #[error("KKT matrix is singular after regularization (iteration {iteration})")]
    Singular { iteration: usize },
    #[error("projection did not converge in {iterations} iterations (residual {residual:e})", iterations = best.iterations, residual = best.final_residual_norm)]
    NonConvergence { best: Box<ProjectionResult> },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Physics(#[from] PhysicsError),
}

/// Closed-form orthogonal projection onto `{v : A v = b}`.
pub fn linear_project(
    v: &DVector<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
) -> Result<ProjectionResult, ProjectError> {
    if a.ncols() != v.len() || a.nrows() != b.len() {
        return Err(ProjectError::Dimension(format!(
            "A is {}x{}, b has {}, v has {}",
            a.nrows(),
            a.ncols(),
            b.len(),
            v.len()
        )));
    }
    if !linalg::has_full_row_rank(a, RANK_TOLERANCE) {
        return Err(ProjectError::RankDeficient);
    }
    // Aᵀ = QR, so A v = b becomes Qᵀ v = R⁻ᵀ b without squaring cond(A).
    let qr = a.transpose().qr();
    let (q, r) = (qr.q(), qr.r());
    let w = r.transpose().solve_lower_triangular(b).ok_or(ProjectError::RankDeficient)?;
    let gap = q.transpose() * v - w;
    let v_proj = v - &q * &gap;
    let lambda = -r.solve_upper_triangular(&gap).ok_or(ProjectError::RankDeficient)?;
    let final_residual_norm = linalg::inf_norm(&(a * &v_proj - b));
    Ok(ProjectionResult {
        v_proj,
        iterations: 1,
        final_residual_norm,
        multipliers: lambda,
    })
}

/// `F(v, λ) = [v − v0 − Jᵀλ; c(u, v)]`.
fn kkt_residual(
    cs: &ConstraintSet,
    u: &[f64],
    v0: &DVector<f64>,
    v: &DVector<f64>,
    lambda: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>, DVector<f64>), ProjectError> {
    let c = cs.residual(u, v.as_slice())?;
    let j = cs.residual_jacobian(u, v.as_slice())?;
    let n = v.len();
    let mut f = DVector::zeros(n + c.len());
    f.rows_mut(0, n).copy_from(&(v - v0 - j.transpose() * lambda));
    f.rows_mut(n, c.len()).copy_from(&c);
    Ok((f, j, c))
}

/// Newton matrix `[[I − Σ λⱼ ∇²cⱼ + δI, −Jᵀ], [J, 0]]`.
pub fn kkt_matrix(
    cs: &ConstraintSet,
    u: &[f64],
    v: &DVector<f64>,
    jac: &DMatrix<f64>,
    lambda: &DVector<f64>,
    shift: f64,
) -> DMatrix<f64> {
    let n = v.len();
    let m = jac.nrows();
    let mut k = DMatrix::zeros(n + m, n + m);
    let h = cs.weighted_hessian(u, v.as_slice(), lambda.as_slice());
    let mut top = DMatrix::identity(n, n) - h;
    for i in 0..n {
        top[(i, i)] += shift;
    }
    k.view_mut((0, 0), (n, n)).copy_from(&top);
    k.view_mut((0, n), (n, m)).copy_from(&(-jac.transpose()));
    k.view_mut((n, 0), (m, n)).copy_from(jac);
    k
}

fn solve_shifted(
    cs: &ConstraintSet,
    u: &[f64],
    v: &DVector<f64>,
    jac: &DMatrix<f64>,
    lambda: &DVector<f64>,
    rhs: &DVector<f64>,
    transpose: bool,
) -> Option<DVector<f64>> {
    let mut shift = 0.0;
    loop {
        let k = kkt_matrix(cs, u, v, jac, lambda, shift);
        let k = if transpose { k.transpose() } else { k };
        if let Some(x) = linalg::solve(&k, rhs) {
            return Some(x);
        }
        shift = if shift == 0.0 {
            SHIFT_START
        } else {
            shift * SHIFT_GROWTH
        };
        if shift > SHIFT_MAX * (1.0 + 1e-12) {
            return None;
        }
    }
}

/// Newton's method on the KKT system with backtracking on `‖F‖`.
pub fn newton_project(
    v0: &DVector<f64>,
    cs: &ConstraintSet,
    u: &[f64],
    tol: f64,
    max_iters: usize,
) -> Result<ProjectionResult, ProjectError> {
    assert!(tol > 0.0, "projection tolerance must be positive");
    let n = cs.dim();
    let m = cs.num_constraints();
    if v0.len() != n {
        return Err(ProjectError::Dimension(format!(
            "v0 has {} entries, constraint set acts on {n}",
            v0.len()
        )));
    }
    let c0 = cs.residual(u, v0.as_slice())?;
    let c0_norm = linalg::inf_norm(&c0);
    let mut v = v0.clone();
    let mut lambda = DVector::zeros(m);
    if c0_norm <= tol {
        return Ok(ProjectionResult {
            v_proj: v,
            iterations: 0,
            final_residual_norm: c0_norm,
            multipliers: lambda,
        });
    }
    let (mut f, mut jac, _) = kkt_residual(cs, u, v0, &v, &lambda)?;
    let mut best = ProjectionResult {
        v_proj: v.clone(),
        iterations: 0,
        final_residual_norm: c0_norm,
        multipliers: lambda.clone(),
    };
    for iter in 1..=max_iters {
        let step = solve_shifted(cs, u, &v, &jac, &lambda, &(-&f), false)
            .ok_or(ProjectError::Singular { iteration: iter })?;
        let f_norm = f.norm();
        let mut alpha = 1.0;
        let mut trial = None;
        for _ in 0..=MAX_BACKTRACKS {
            let v_t = &v + step.rows(0, n) * alpha;
            let l_t = &lambda + step.rows(n, m) * alpha;
            let eval = kkt_residual(cs, u, v0, &v_t, &l_t)?;
            let better = eval.0.norm() < f_norm;
            trial = Some((v_t, l_t, eval));
            if better {
                break;
            }
            alpha *= BACKTRACK_FACTOR;
        }
        let (v_t, l_t, (f_t, j_t, c_t)) = trial.expect("at least one trial step");
        v = v_t;
        lambda = l_t;
        f = f_t;
        jac = j_t;
        let feas = linalg::inf_norm(&c_t);
        let stat = f.rows(0, n).iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if feas < best.final_residual_norm {
            best = ProjectionResult {
                v_proj: v.clone(),
                iterations: iter,
                final_residual_norm: feas,
                multipliers: lambda.clone(),
            };
        }
        if feas <= tol && stat <= tol {
            return Ok(ProjectionResult {
                v_proj: v,
                iterations: iter,
                final_residual_norm: feas,
                multipliers: lambda,
            });
        }
    }
    best.iterations = max_iters;
    Err(ProjectError::NonConvergence {
        best: Box::new(best),
    })
}

/// Projects `v0` with the closed form when every constraint is affine and
/// with Newton otherwise. The empty set is the identity.
pub fn project(
    cs: &ConstraintSet,
    u: &[f64],
    v0: &DVector<f64>,
    tol: f64,
    max_iters: usize,
) -> Result<ProjectionResult, ProjectError> {
    if cs.is_empty() {
        return Ok(ProjectionResult {
            v_proj: v0.clone(),
            iterations: 0,
            final_residual_norm: 0.0,
            multipliers: DVector::zeros(0),
        });
    }
    if cs.is_linear() {
        let (a, b) = cs.linear_at(u).expect("linear set has a linear part");
        return linear_project(v0, &a, &b);
    }
    newton_project(v0, cs, u, tol, max_iters)
}

/// Vector-Jacobian product of the projection map at a converged result:
/// solves `Kᵀ w = [g; 0]` and returns the `v` block of `w`.
pub fn project_backward(
    result: &ProjectionResult,
    cs: &ConstraintSet,
    u: &[f64],
    upstream: &DVector<f64>,
) -> Result<DVector<f64>, ProjectError> {
    let n = cs.dim();
    if upstream.len() != n {
        return Err(ProjectError::Dimension(format!(
            "upstream gradient has {} entries, expected {n}",
            upstream.len()
        )));
    }
    if cs.is_empty() {
        return Ok(upstream.clone());
    }
    let m = cs.num_constraints();
    let jac = cs.residual_jacobian(u, result.v_proj.as_slice())?;
    let mut rhs = DVector::zeros(n + m);
    rhs.rows_mut(0, n).copy_from(upstream);
    let w = solve_shifted(cs, u, &result.v_proj, &jac, &result.multipliers, &rhs, true)
        .ok_or(ProjectError::Singular { iteration: 0 })?;
    Ok(w.rows(0, n).into_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::physics::PolynomialResidual;
    use std::sync::Arc;

    fn dv(x: &[f64]) -> DVector<f64> {
        DVector::from_column_slice(x)
    }

    fn circle() -> ConstraintSet {
        ConstraintSet::nonlinear(2, vec![Arc::new(PolynomialResidual::circle(1.0))]).unwrap()
    }

    #[test]
    fn linear_examples() {
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let r = linear_project(&dv(&[0.0, 0.0]), &a, &dv(&[1.0])).unwrap();
        assert!((r.v_proj - dv(&[0.5, 0.5])).amax() < 1e-15);

        let r = linear_project(&dv(&[0.3, 0.7]), &a, &dv(&[1.0])).unwrap();
        assert!((r.v_proj - dv(&[0.3, 0.7])).amax() < 1e-15);

        let a3 = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 1.0]);
        let r = linear_project(&dv(&[1.0, 2.0, 3.0]), &a3, &dv(&[3.0])).unwrap();
        assert!((r.v_proj - dv(&[0.0, 1.0, 2.0])).amax() < 1e-14);
    }

    #[test]
    fn rank_deficient_is_rejected() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        assert_eq!(
            linear_project(&dv(&[0.0; 3]), &a, &dv(&[1.0, 2.0])),
            Err(ProjectError::RankDeficient)
        );
    }

    #[test]
    fn circle_and_hyperbola() {
        let r = newton_project(&dv(&[2.0, 0.0]), &circle(), &[], 1e-10, 50).unwrap();
        assert!((r.v_proj - dv(&[1.0, 0.0])).amax() < 1e-10);
        assert!((r.multipliers[0] + 0.5).abs() < 1e-9);

        let hyp = ConstraintSet::nonlinear(2, vec![Arc::new(PolynomialResidual::hyperbola(1.0))]).unwrap();
        let r = newton_project(&dv(&[2.0, 2.0]), &hyp, &[], 1e-10, 50).unwrap();
        assert!((r.v_proj - dv(&[1.0, 1.0])).amax() < 1e-10);
        assert!((r.multipliers[0] + 1.0).abs() < 1e-9);
    }

    #[test]
    fn feasible_start_takes_no_iterations() {
        let v0 = dv(&[0.6, 0.8]);
        let r = newton_project(&v0, &circle(), &[], 1e-10, 50).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.v_proj, v0);
    }

    #[test]
    fn iteration_cap_reports_best_iterate() {
        match newton_project(&dv(&[5.0, 3.0]), &circle(), &[], 1e-10, 1) {
            Err(ProjectError::NonConvergence { best }) => {
                assert_eq!(best.iterations, 1);
                assert!(best.final_residual_norm < 33.0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn singular_kkt_is_reported() {
        // At the origin the circle Jacobian vanishes and the step is undefined.
        let r = newton_project(&dv(&[0.0, 0.0]), &circle(), &[], 1e-10, 50);
        assert!(matches!(r, Err(ProjectError::Singular { .. })), "{r:?}");
    }

    #[test]
    fn linear_backward_is_projector() {
        let a = DMatrix::from_row_slice(1, 3, &[1.0, 2.0, -1.0]);
        let b = dv(&[0.5]);
        let cs = ConstraintSet::linear(a.clone(), b.clone()).unwrap();
        let v0 = dv(&[0.2, -0.4, 1.0]);
        let r = project(&cs, &[], &v0, 1e-10, 50).unwrap();
        let g = dv(&[1.0, -2.0, 0.5]);
        let back = project_backward(&r, &cs, &[], &g).unwrap();
        let gram = (&a * a.transpose())[(0, 0)];
        let p = DMatrix::identity(3, 3) - a.transpose() * &a / gram;
        assert!((back - &p * g).amax() < 1e-12);
        let zero = project_backward(&r, &cs, &[], &DVector::zeros(3)).unwrap();
        assert_eq!(zero.amax(), 0.0);
    }

    #[test]
    fn circle_backward_matches_finite_differences() {
        let cs = circle();
        let v0 = dv(&[1.7, -0.9]);
        let g = dv(&[0.3, 1.1]);
        let r = newton_project(&v0, &cs, &[], 1e-12, 50).unwrap();
        let back = project_backward(&r, &cs, &[], &g).unwrap();
        let h = 1e-6;
        for k in 0..2 {
            let mut p = v0.clone();
            p[k] += h;
            let mut m = v0.clone();
            m[k] -= h;
            let fp = newton_project(&p, &cs, &[], 1e-12, 50).unwrap().v_proj.dot(&g);
            let fm = newton_project(&m, &cs, &[], 1e-12, 50).unwrap().v_proj.dot(&g);
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - back[k]).abs() <= 1e-4 * fd.abs().max(1e-8), "{fd} vs {}", back[k]);
        }
    }
}
