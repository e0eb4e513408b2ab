//! Explicit leapfrog and the constrained leapfrog with projections.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::geometry::{project_momentum, project_position, ConstraintSystem, ManifoldPoint, ProjectionSolver};

/// One explicit leapfrog step for `H = U(q) + ½‖p‖²`. Returns `(q1, p1)`.
pub fn leapfrog_step<G>(grad_u: G, q0: &DVector<f64>, p0: &DVector<f64>, eps: f64) -> (DVector<f64>, DVector<f64>)
where
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    let g0 = grad_u(q0);
    let (q1, p1, _) = leapfrog_step_with(|q| Some(grad_u(q)), |p| p.clone(), q0, p0, &g0, eps)
        .expect("gradient is total");
    (q1, p1)
}

/// Leapfrog step with a velocity map `p ↦ M⁻¹p` and the gradient at `q0`
/// supplied by the caller. Returns `(q1, p1, ∇U(q1))`, or `None` if the
/// gradient fails or the state stops being finite.
pub fn leapfrog_step_with<G, V>(
    grad_u: G,
    velocity: V,
    q0: &DVector<f64>,
    p0: &DVector<f64>,
    grad0: &DVector<f64>,
    eps: f64,
) -> Option<(DVector<f64>, DVector<f64>, DVector<f64>)>
where
    G: Fn(&DVector<f64>) -> Option<DVector<f64>>,
    V: Fn(&DVector<f64>) -> DVector<f64>,
{
    let p_half = p0 - grad0 * (0.5 * eps);
    let q1 = q0 + velocity(&p_half) * eps;
    let g1 = grad_u(&q1)?;
    let p1 = p_half - &g1 * (0.5 * eps);
    let finite = q1.iter().chain(p1.iter()).all(|v| v.is_finite());
    finite.then_some((q1, p1, g1))
}

/// Result of one constrained step. When `failed` is set, `point` is `None`
/// and `momentum` is meaningless.
pub struct StepOutcome<J> {
    pub point: Option<ManifoldPoint<J>>,
    pub momentum: DVector<f64>,
    pub failed: bool,
    pub newton_iters: usize,
}

impl<J> StepOutcome<J> {
    fn failure(p: DVector<f64>, iters: usize) -> Self {
        Self { point: None, momentum: p, failed: true, newton_iters: iters }
    }
}

/// One constrained leapfrog step from `q0` with tangent momentum `p0`:
///
/// 1. `p̃ = p0 − (ε/2)∇U(q0)`, projected onto the tangent space at `q0`;
/// 2. `q̃ = q0 + ε p̃`, projected onto the manifold along the normal space at `q0`;
/// 3. `p = (q1 − q0)/ε − (ε/2)∇U(q1)`, projected onto the tangent space at `q1`.
///
/// A negative `eps` runs the step backwards in time.
pub fn constrained_step<S: ConstraintSystem>(
    system: &S,
    q0: &ManifoldPoint<S::Jacobian>,
    p0: &DVector<f64>,
    eps: f64,
    tau: f64,
    max_iter: usize,
    solver: ProjectionSolver,
) -> Result<StepOutcome<S::Jacobian>> {
    step(system, q0, p0, eps, tau, max_iter, solver, true)
}

/// The position part of [`constrained_step`]: stops once `q1` is known and
/// returns the unprojected `p_{1/2} = (q1 − q0)/ε` as momentum. Saves the
/// potential gradient at `q1` where only the position is needed.
pub fn constrained_position_step<S: ConstraintSystem>(
    system: &S,
    q0: &ManifoldPoint<S::Jacobian>,
    p0: &DVector<f64>,
    eps: f64,
    tau: f64,
    max_iter: usize,
    solver: ProjectionSolver,
) -> Result<StepOutcome<S::Jacobian>> {
    step(system, q0, p0, eps, tau, max_iter, solver, false)
}

#[allow(clippy::too_many_arguments)]
fn step<S: ConstraintSystem>(
    system: &S,
    q0: &ManifoldPoint<S::Jacobian>,
    p0: &DVector<f64>,
    eps: f64,
    tau: f64,
    max_iter: usize,
    solver: ProjectionSolver,
    finish: bool,
) -> Result<StepOutcome<S::Jacobian>> {
    if eps == 0.0 {
        return Err(Error::Invalid("step size must be non-zero".into()));
    }
    let grad0 = match soft(q0.grad_potential(system))? {
        Some(g) => g,
        None => return Ok(StepOutcome::failure(p0.clone(), 0)),
    };
    let p_tilde = p0 - grad0 * (0.5 * eps);
    let p_tilde = project_momentum(&p_tilde, &q0.jacobian)?;
    let q_tilde = &q0.q + &p_tilde * eps;
    if q_tilde.iter().any(|v| !v.is_finite()) {
        return Ok(StepOutcome::failure(p_tilde, 0));
    }

    let proj = project_position(system, &q_tilde, q0, tau, max_iter, solver);
    let iters = proj.iters;
    let Some(q1) = proj.point else {
        return Ok(StepOutcome::failure(p_tilde, iters));
    };
    let p_half = (&q1.q - &q0.q) / eps;
    if !finish {
        return Ok(StepOutcome { point: Some(q1), momentum: p_half, failed: false, newton_iters: iters });
    }

    let grad1 = match soft(q1.grad_potential(system))? {
        Some(g) => g,
        None => return Ok(StepOutcome::failure(p_half, iters)),
    };
    let p1 = p_half - grad1 * (0.5 * eps);
    let p1 = project_momentum(&p1, &q1.jacobian)?;
    if p1.iter().any(|v| !v.is_finite()) {
        return Ok(StepOutcome::failure(p1, iters));
    }
    Ok(StepOutcome { point: Some(q1), momentum: p1, failed: false, newton_iters: iters })
}

/// Domain errors become `None` (a failed step); anything else propagates.
fn soft<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::Domain { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}
