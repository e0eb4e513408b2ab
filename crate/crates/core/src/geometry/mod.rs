//! Constraint manifolds, their Gram matrices and the projections used by the
//! constrained integrator.
//!
//! A [`ConstraintSystem`] supplies a constraint `C(q)`, its Jacobian and the
//! potential energy of the target density on `M = {C(q) = 0}` with respect to
//! the Hausdorff measure. The lifted posterior of a [`crate::model::Model`]
//! is [`LiftedModel`]; [`AffineSystem`] is a small linear test case.

mod affine;
mod lifted;

use std::cell::OnceCell;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use affine::{AffineSystem, DenseJacobian};
pub use lifted::{GramFactor, LiftedJacobian, LiftedModel};

use crate::error::{Error, Result};

/// Default projection tolerance on `‖C‖_∞`.
pub const DEFAULT_TAU: f64 = 1e-9;
/// Default cap on projection iterations.
pub const DEFAULT_MAX_ITER: usize = 50;

/// Linear-algebra view of the constraint Jacobian `DC(q)` at one point.
pub trait ConstraintJacobian {
    /// `DC v`.
    fn apply(&self, v: &DVector<f64>) -> DVector<f64>;
    /// `DCᵀ λ`.
    fn apply_transpose(&self, lambda: &DVector<f64>) -> DVector<f64>;
    /// Solves `G x = b` with `G = DC DCᵀ`.
    fn gram_solve(&self, b: &DVector<f64>) -> Result<DVector<f64>>;
    /// `log det G`.
    fn log_det_gram(&self) -> Result<f64>;
    /// Solves `DC(self) DC(origin)ᵀ x = b`.
    fn cross_solve(&self, origin: &Self, b: &DVector<f64>) -> Result<DVector<f64>>;
}

/// A constraint function together with the potential of the density on its
/// zero level set.
pub trait ConstraintSystem: Sync {
    type Jacobian: ConstraintJacobian;

    /// Dimension of the ambient space.
    fn dim(&self) -> usize;
    /// Number of constraints.
    fn n_constraints(&self) -> usize;

    fn residual(&self, q: &DVector<f64>) -> Result<DVector<f64>>;
    fn jacobian(&self, q: &DVector<f64>) -> Result<Self::Jacobian>;

    /// Residual and Jacobian together; override when one pass yields both.
    fn residual_and_jacobian(&self, q: &DVector<f64>) -> Result<(DVector<f64>, Self::Jacobian)> {
        Ok((self.residual(q)?, self.jacobian(q)?))
    }

    /// Potential energy `U(q)`, which may use the factorization held in `jac`.
    fn potential(&self, q: &DVector<f64>, jac: &Self::Jacobian) -> Result<f64>;
    /// `∇U(q)`.
    fn grad_potential(&self, q: &DVector<f64>, jac: &Self::Jacobian) -> Result<DVector<f64>>;

    /// Coordinates reported as the chain state (all of `q` by default).
    fn state<'a>(&self, q: &'a DVector<f64>) -> &'a [f64] {
        q.as_slice()
    }

    /// Inverse of [`ConstraintSystem::state`]: the manifold point whose state
    /// is `state`. By default `state` is the full position.
    fn lift_state(&self, state: &[f64]) -> Result<DVector<f64>> {
        if state.len() != self.dim() {
            return Err(Error::Invalid(format!("state has length {}, expected {}", state.len(), self.dim())));
        }
        Ok(DVector::from_column_slice(state))
    }
}

/// A position with cached residual, Jacobian (and through it the Gram
/// factorization), potential and gradient.
pub struct ManifoldPoint<J> {
    pub q: DVector<f64>,
    pub residual: DVector<f64>,
    pub jacobian: J,
    potential: OnceCell<f64>,
    gradient: OnceCell<DVector<f64>>,
}

impl<J: ConstraintJacobian> ManifoldPoint<J> {
    /// Evaluates and caches the residual and Jacobian at `q`.
    pub fn new<S: ConstraintSystem<Jacobian = J>>(system: &S, q: DVector<f64>) -> Result<Self> {
        let (residual, jacobian) = system.residual_and_jacobian(&q)?;
        Ok(Self::from_parts(q, residual, jacobian))
    }

    pub fn from_parts(q: DVector<f64>, residual: DVector<f64>, jacobian: J) -> Self {
        Self { q, residual, jacobian, potential: OnceCell::new(), gradient: OnceCell::new() }
    }

    pub fn residual_norm(&self) -> f64 {
        self.residual.amax()
    }

    pub fn potential<S: ConstraintSystem<Jacobian = J>>(&self, system: &S) -> Result<f64> {
        if let Some(u) = self.potential.get() {
            return Ok(*u);
        }
        let u = system.potential(&self.q, &self.jacobian)?;
        Ok(*self.potential.get_or_init(|| u))
    }

    pub fn grad_potential<S: ConstraintSystem<Jacobian = J>>(&self, system: &S) -> Result<&DVector<f64>> {
        if self.gradient.get().is_none() {
            let g = system.grad_potential(&self.q, &self.jacobian)?;
            let _ = self.gradient.set(g);
        }
        Ok(self.gradient.get().expect("gradient cached above"))
    }
}

/// Position and momentum on the cotangent bundle of the manifold.
pub struct PhaseState<J> {
    pub point: ManifoldPoint<J>,
    pub p: DVector<f64>,
}

impl<J: ConstraintJacobian> PhaseState<J> {
    /// `H = U(q) + ½‖p‖²`.
    pub fn hamiltonian<S: ConstraintSystem<Jacobian = J>>(&self, system: &S) -> Result<f64> {
        Ok(self.point.potential(system)? + 0.5 * self.p.norm_squared())
    }
}

/// Orthogonal projection onto the tangent space, `p̃ − DCᵀ G⁻¹ DC p̃`.
pub fn project_momentum<J: ConstraintJacobian>(p_tilde: &DVector<f64>, jac: &J) -> Result<DVector<f64>> {
    let lambda = jac.gram_solve(&jac.apply(p_tilde))?;
    Ok(p_tilde - jac.apply_transpose(&lambda))
}

/// Position projection method.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionSolver {
    /// Re-evaluates `DC(q_m)` at every iterate.
    #[default]
    Newton,
    /// Reuses the Gram factorization at the origin throughout.
    SymmetricNewton,
}

/// Outcome of a position projection; failure is a flag, never an error.
pub struct Projection<J> {
    /// The projected point when successful.
    pub point: Option<ManifoldPoint<J>>,
    /// Lagrange multipliers with `q = q̃ − DC(q_origin)ᵀ λ`.
    pub lambda: DVector<f64>,
    pub iters: usize,
    pub failed: bool,
}

impl<J> Projection<J> {
    fn failure(lambda: DVector<f64>, iters: usize) -> Self {
        Self { point: None, lambda, iters, failed: true }
    }
}

/// Projects `q_tilde` onto the manifold along the normal space at `origin`,
/// solving `C(q̃ − DC(q_origin)ᵀ λ) = 0` for `λ` from `λ₀ = 0`.
///
/// Stops once `‖C‖_∞ < tau`. Fails after `max_iter` iterations, on a failed
/// solve, on non-finite values, or once the residual grows past
/// `1e3·(1 + ‖C(q̃)‖_∞)`.
pub fn project_position<S: ConstraintSystem>(
    system: &S,
    q_tilde: &DVector<f64>,
    origin: &ManifoldPoint<S::Jacobian>,
    tau: f64,
    max_iter: usize,
    solver: ProjectionSolver,
) -> Projection<S::Jacobian> {
    let mut lambda = DVector::zeros(system.n_constraints());
    let mut q = q_tilde.clone();
    let mut guard = f64::INFINITY;
    for iter in 0..=max_iter {
        let (residual, jac) = match solver {
            ProjectionSolver::Newton => match system.residual_and_jacobian(&q) {
                Ok((r, j)) => (r, Some(j)),
                Err(_) => return Projection::failure(lambda, iter),
            },
            ProjectionSolver::SymmetricNewton => match system.residual(&q) {
                Ok(r) => (r, None),
                Err(_) => return Projection::failure(lambda, iter),
            },
        };
        let norm = residual.amax();
        if !norm.is_finite() {
            return Projection::failure(lambda, iter);
        }
        if iter == 0 {
            guard = 1e3 * (1.0 + norm);
        } else if norm > guard {
            return Projection::failure(lambda, iter);
        }
        if norm < tau {
            let jac = match jac {
                Some(j) => j,
                None => match system.jacobian(&q) {
                    Ok(j) => j,
                    Err(_) => return Projection::failure(lambda, iter),
                },
            };
            let point = ManifoldPoint::from_parts(q, residual, jac);
            return Projection { point: Some(point), lambda, iters: iter, failed: false };
        }
        if iter == max_iter {
            break;
        }
        let delta = match &jac {
            Some(j) => j.cross_solve(&origin.jacobian, &residual),
            None => origin.jacobian.gram_solve(&residual),
        };
        let delta = match delta {
            Ok(d) if d.iter().all(|v| v.is_finite()) => d,
            _ => return Projection::failure(lambda, iter),
        };
        q -= origin.jacobian.apply_transpose(&delta);
        lambda += delta;
    }
    Projection::failure(lambda, max_iter)
}

/// `log det` of a symmetric positive-definite matrix via Cholesky.
pub(crate) fn spd_log_det(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

pub(crate) fn cholesky(m: DMatrix<f64>, what: &str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    m.cholesky().ok_or_else(|| Error::Numerical(format!("Cholesky of {what} failed")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::ToyLoopModel;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn coordinate_hyperplane(dim: usize) -> AffineSystem {
        let mut a = DMatrix::zeros(1, dim);
        a[(0, 0)] = 1.0;
        AffineSystem::new(a, DVector::zeros(1))
    }

    #[test]
    fn momentum_projection_on_coordinate_hyperplane() {
        let sys = coordinate_hyperplane(4);
        let pt = ManifoldPoint::new(&sys, DVector::zeros(4)).unwrap();
        let p = project_momentum(&DVector::from_vec(vec![2.0, -1.0, 0.5, 3.0]), &pt.jacobian).unwrap();
        assert_eq!(p.as_slice(), &[0.0, -1.0, 0.5, 3.0]);
    }

    #[test]
    fn tangent_momentum_is_unchanged_and_normal_momentum_vanishes() {
        let sys = LiftedModel::new(ToyLoopModel::new(0.3));
        let q = sys.lift(&[0.4, 0.9]).unwrap();
        let pt = ManifoldPoint::new(&sys, q).unwrap();
        let p = project_momentum(&DVector::from_vec(vec![0.3, -1.2, 0.7]), &pt.jacobian).unwrap();
        let again = project_momentum(&p, &pt.jacobian).unwrap();
        assert!((&again - &p).amax() < 1e-12);
        let normal = pt.jacobian.apply_transpose(&DVector::from_vec(vec![1.7]));
        assert!(project_momentum(&normal, &pt.jacobian).unwrap().amax() < 1e-10);
    }

    #[test]
    fn newton_is_exact_on_affine_constraints() {
        let a = DMatrix::from_row_slice(2, 4, &[1.0, 2.0, 0.0, -1.0, 0.5, 0.0, 1.0, 1.0]);
        let sys = AffineSystem::new(a.clone(), DVector::from_vec(vec![1.0, -2.0]));
        let origin = ManifoldPoint::new(&sys, sys.particular_solution()).unwrap();
        let q_tilde = DVector::from_vec(vec![3.0, -1.0, 2.0, 0.5]);
        for solver in [ProjectionSolver::Newton, ProjectionSolver::SymmetricNewton] {
            let proj = project_position(&sys, &q_tilde, &origin, 1e-9, 50, solver);
            assert!(!proj.failed);
            assert_eq!(proj.iters, 1);
            assert!(proj.point.unwrap().residual_norm() < 1e-12);
        }
    }

    #[test]
    fn on_manifold_point_is_returned_unchanged() {
        let sys = LiftedModel::new(ToyLoopModel::new(0.1));
        let q = sys.lift(&[0.2, 0.8]).unwrap();
        let origin = ManifoldPoint::new(&sys, q.clone()).unwrap();
        for solver in [ProjectionSolver::Newton, ProjectionSolver::SymmetricNewton] {
            let proj = project_position(&sys, &q, &origin, 1e-9, 50, solver);
            assert!(!proj.failed);
            assert_eq!(proj.iters, 0);
            assert_eq!(proj.point.unwrap().q, q);
        }
    }

    #[test]
    fn toy_tangent_perturbation_converges_for_both_solvers() {
        let sys = LiftedModel::new(ToyLoopModel::new(0.1));
        let origin = ManifoldPoint::new(&sys, sys.lift(&[0.3, 0.95]).unwrap()).unwrap();
        let dir = project_momentum(&DVector::from_vec(vec![1.0, 0.4, -0.2]), &origin.jacobian).unwrap();
        let q_tilde = &origin.q + dir.normalize() * 0.1;
        let newton = project_position(&sys, &q_tilde, &origin, 1e-9, 50, ProjectionSolver::Newton);
        let sym = project_position(&sys, &q_tilde, &origin, 1e-9, 50, ProjectionSolver::SymmetricNewton);
        assert!(!newton.failed && !sym.failed);
        assert!(newton.iters <= 10, "{} iterations", newton.iters);
        let qn = newton.point.unwrap().q;
        let qs = sym.point.unwrap().q;
        // Residual recomputed from scratch rather than taken from the cache.
        assert!(sys.residual(&qn).unwrap().amax() < 1e-9);
        assert!((qn - qs).amax() < 1e-8);
    }

    #[test]
    fn correction_lies_in_origin_normal_space() {
        let sys = LiftedModel::new(ToyLoopModel::new(0.2));
        let origin = ManifoldPoint::new(&sys, sys.lift(&[-0.6, 0.7]).unwrap()).unwrap();
        let q_tilde = &origin.q + DVector::from_vec(vec![0.05, 0.08, -0.1]);
        let proj = project_position(&sys, &q_tilde, &origin, 1e-9, 50, ProjectionSolver::Newton);
        let q = proj.point.unwrap().q;
        let diff = &q_tilde - &q;
        let normal = origin.jacobian.apply_transpose(&DVector::from_element(1, 1.0));
        // Residual of the least-squares fit of diff onto the normal direction.
        let coef = diff.dot(&normal) / normal.norm_squared();
        assert!((diff - normal * coef).amax() < 1e-8);
    }

    #[test]
    fn symmetric_newton_reports_divergence_as_failure() {
        let sys = LiftedModel::new(ToyLoopModel::new(0.01));
        let origin = ManifoldPoint::new(&sys, sys.lift(&[0.0, 1.0]).unwrap()).unwrap();
        let q_tilde = DVector::from_vec(vec![40.0, -30.0, 5.0]);
        let proj = project_position(&sys, &q_tilde, &origin, 1e-9, 50, ProjectionSolver::SymmetricNewton);
        assert!(proj.failed);
        assert!(proj.point.is_none());
    }

    #[test]
    fn spd_log_det_matches_eigenvalues_on_random_instances() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let b = DMatrix::from_fn(5, 5, |_, _| rng.gen_range(-1.0..1.0));
            let m = &b * b.transpose() + DMatrix::identity(5, 5) * 0.5;
            let chol = cholesky(m.clone(), "test").unwrap();
            let eig: f64 = m.symmetric_eigenvalues().iter().map(|l| l.ln()).sum();
            assert_relative_eq!(spd_log_det(&chol), eig, epsilon = 1e-10);
        }
    }

    proptest! {
        #[test]
        fn projector_is_idempotent(a in -1.2f64..1.2, b in -1.2f64..1.2,
                                   p in proptest::array::uniform3(-3.0f64..3.0)) {
            let sys = LiftedModel::new(ToyLoopModel::new(0.05));
            let pt = ManifoldPoint::new(&sys, sys.lift(&[a, b]).unwrap()).unwrap();
            let once = project_momentum(&DVector::from_row_slice(&p), &pt.jacobian).unwrap();
            let twice = project_momentum(&once, &pt.jacobian).unwrap();
            prop_assert!((&twice - &once).amax() <= 1e-10);
            prop_assert!(pt.jacobian.apply(&once).amax() <= 1e-8 * (1.0 + once.amax()));
        }
    }
}
