use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{soft, standard_normal_vector, RejectReason, Sampler, TransitionStats};
use crate::error::{Error, Result};
use crate::geometry::{project_momentum, ConstraintSystem, ManifoldPoint, ProjectionSolver, DEFAULT_MAX_ITER, DEFAULT_TAU};
use crate::integrators::{constrained_position_step, constrained_step};

/// Settings of the constrained HMC kernel.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChmcConfig {
    /// Initial (or fixed) step size.
    pub eps: f64,
    /// Integrator steps per transition, or the upper bound when jittered.
    pub n_steps: usize,
    /// Draw the number of steps uniformly from `1..=n_steps`.
    pub jitter: bool,
    pub tau: f64,
    pub max_iter: usize,
    /// Reversibility tolerance on `‖q* − q_{n−1}‖_∞`.
    pub rho: f64,
    pub solver: ProjectionSolver,
    pub target_accept: f64,
    /// Also require the reversed momentum to match, to `rho·(1 + ‖p‖_∞)`.
    pub check_momentum: bool,
}

impl Default for ChmcConfig {
    fn default() -> Self {
        Self {
            eps: 0.1,
            n_steps: 10,
            jitter: false,
            tau: DEFAULT_TAU,
            max_iter: DEFAULT_MAX_ITER,
            rho: 2e-8,
            solver: ProjectionSolver::Newton,
            target_accept: 0.9,
            check_momentum: false,
        }
    }
}

impl ChmcConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.into()));
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad("eps must be positive");
        }
        if self.n_steps == 0 {
            return bad("n_steps must be at least 1");
        }
        if !(self.rho > 0.0) || !(self.tau > 0.0) || self.max_iter == 0 {
            return bad("rho, tau and max_iter must be positive");
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return bad("target_accept must lie in (0, 1)");
        }
        Ok(())
    }
}

/// Constrained HMC on the manifold of a [`ConstraintSystem`], with a
/// reversibility check after every step.
#[derive(Clone, Debug)]
pub struct Chmc<S> {
    pub system: S,
    pub config: ChmcConfig,
}

impl<S: ConstraintSystem> Chmc<S> {
    pub fn new(system: S, config: ChmcConfig) -> Self {
        Self { system, config }
    }

    /// A manifold point from a full position, checked against `tau`.
    pub fn point(&self, q: DVector<f64>) -> Result<ManifoldPoint<S::Jacobian>> {
        let pt = ManifoldPoint::new(&self.system, q)?;
        if pt.residual_norm() > self.config.tau.max(1e-8) {
            return Err(Error::Invalid(format!("initial point is off the manifold (‖C‖ = {:e})", pt.residual_norm())));
        }
        Ok(pt)
    }
}

impl<S: ConstraintSystem> Sampler for Chmc<S> {
    type State = ManifoldPoint<S::Jacobian>;

    fn init(&self, theta: &[f64]) -> Result<Self::State> {
        self.point(self.system.lift_state(theta)?)
    }

    fn transition<R: Rng + ?Sized>(&self, q0: &Self::State, eps: f64, rng: &mut R) -> Result<(Option<Self::State>, TransitionStats)> {
        let cfg = &self.config;
        let sys = &self.system;
        let n_steps = if cfg.jitter { rng.gen_range(1..=cfg.n_steps) } else { cfg.n_steps };
        let p0 = project_momentum(&standard_normal_vector(sys.dim(), rng), &q0.jacobian)?;
        let h0 = q0.potential(sys)? + 0.5 * p0.norm_squared();

        let mut iters = 0;
        let mut current: Option<ManifoldPoint<S::Jacobian>> = None;
        let mut p = p0;
        for _ in 0..n_steps {
            let prev = current.as_ref().unwrap_or(q0);
            let fwd = constrained_step(sys, prev, &p, eps, cfg.tau, cfg.max_iter, cfg.solver)?;
            iters += fwd.newton_iters;
            let Some(next) = fwd.point else {
                return Ok((None, TransitionStats::rejected(RejectReason::SolverFailed, iters, n_steps)));
            };
            let back = if cfg.check_momentum {
                constrained_step(sys, &next, &fwd.momentum, -eps, cfg.tau, cfg.max_iter, cfg.solver)?
            } else {
                constrained_position_step(sys, &next, &fwd.momentum, -eps, cfg.tau, cfg.max_iter, cfg.solver)?
            };
            iters += back.newton_iters;
            let reversible = match &back.point {
                Some(q_star) => {
                    let pos_ok = (&q_star.q - &prev.q).amax() < cfg.rho;
                    let mom_ok = !cfg.check_momentum || (&back.momentum - &p).amax() < cfg.rho * (1.0 + p.amax());
                    pos_ok && mom_ok
                }
                None => false,
            };
            if !reversible {
                return Ok((None, TransitionStats::rejected(RejectReason::Nonreversible, iters, n_steps)));
            }
            p = fwd.momentum;
            current = Some(next);
        }

        let end = current.expect("at least one step");
        let h1 = match soft(end.potential(sys))? {
            Some(u) if u.is_finite() => u + 0.5 * p.norm_squared(),
            _ => return Ok((None, TransitionStats::rejected(RejectReason::Divergent, iters, n_steps))),
        };
        let d_h = h1 - h0;
        if !d_h.is_finite() {
            return Ok((None, TransitionStats::rejected(RejectReason::Divergent, iters, n_steps)));
        }
        let stats = TransitionStats::metropolis(-d_h, d_h, iters, n_steps, rng);
        Ok((stats.accepted.then_some(end), stats))
    }

    fn theta(&self, state: &Self::State) -> Vec<f64> {
        self.system.state(&state.q).to_vec()
    }
}
