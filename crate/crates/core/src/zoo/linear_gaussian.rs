use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::geometry::{LiftedModel, ManifoldPoint, ProjectionSolver};
use crate::integrators::constrained_step;
use crate::model::{Model, Scalar};

/// `y = Mθ + f + σ η` with standard normal priors on `θ` and `η`.
#[derive(Clone, Debug)]
pub struct LinearGaussianModel {
    pub matrix: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub sigma: f64,
    y: Vec<f64>,
}

impl LinearGaussianModel {
    pub fn new(matrix: DMatrix<f64>, offset: DVector<f64>, sigma: f64, y: Vec<f64>) -> Self {
        assert_eq!(matrix.nrows(), offset.len());
        assert_eq!(matrix.nrows(), y.len());
        assert!(sigma > 0.0);
        Self { matrix, offset, sigma, y }
    }

    /// Analytic posterior `Normal(μ, Σ)` with `Σ = (I + σ⁻² MᵀM)⁻¹` and
    /// `μ = σ⁻² Σ Mᵀ (y − f)`.
    pub fn posterior(&self) -> (DVector<f64>, DMatrix<f64>) {
        linear_gaussian_posterior(self)
    }
}

/// Posterior moments of a [`LinearGaussianModel`].
pub fn linear_gaussian_posterior(model: &LinearGaussianModel) -> (DVector<f64>, DMatrix<f64>) {
    let n = model.matrix.ncols();
    let s2 = model.sigma * model.sigma;
    let precision = DMatrix::identity(n, n) + model.matrix.transpose() * &model.matrix / s2;
    let cov = precision.cholesky().expect("posterior precision is positive definite").inverse();
    let resid = DVector::from_column_slice(&model.y) - &model.offset;
    let mean = &cov * model.matrix.transpose() * resid / s2;
    (mean, cov)
}

impl Model for LinearGaussianModel {
    fn dim_theta(&self) -> usize {
        self.matrix.ncols()
    }

    fn dim_y(&self) -> usize {
        self.matrix.nrows()
    }

    fn observed(&self) -> &[f64] {
        &self.y
    }

    fn forward<S: Scalar>(&self, theta: &[S]) -> Vec<S> {
        (0..self.matrix.nrows())
            .map(|i| {
                theta
                    .iter()
                    .enumerate()
                    .fold(S::constant(self.offset[i]), |acc, (j, t)| acc + t.clone() * self.matrix[(i, j)])
            })
            .collect()
    }

    fn noise_scale<S: Scalar>(&self, _theta: &[S]) -> S {
        S::constant(self.sigma)
    }

    fn prior_potential_theta<S: Scalar>(&self, theta: &[S]) -> S {
        theta.iter().fold(S::constant(0.0), |acc, t| acc + t.square()) * 0.5
    }

    fn constant_noise(&self) -> bool {
        true
    }

    fn analytic_jacobian(&self, _theta: &[f64]) -> Option<DMatrix<f64>> {
        Some(self.matrix.clone())
    }

    fn analytic_jacobian_derivative(&self, _theta: &[f64], _v: &[f64]) -> Option<DMatrix<f64>> {
        Some(DMatrix::zeros(self.matrix.nrows(), self.matrix.ncols()))
    }
}

/// Simulated constrained trajectory next to its closed form.
#[derive(Clone, Debug)]
pub struct ReferenceTrajectory {
    pub times: Vec<f64>,
    /// `θ(t)` from the constrained leapfrog integrator.
    pub simulated: Vec<DVector<f64>>,
    /// `μ + (θ₀ − μ) cos t + v₀ sin t`.
    pub analytic: Vec<DVector<f64>>,
}

impl ReferenceTrajectory {
    /// Largest coordinate error over the whole trajectory.
    pub fn max_error(&self) -> f64 {
        self.simulated
            .iter()
            .zip(&self.analytic)
            .map(|(s, a)| (s - a).amax())
            .fold(0.0, f64::max)
    }
}

/// Integrates the lifted constrained dynamics of a linear-Gaussian model from
/// `(q0, p0)` up to `t_end` with step `eps`, alongside the analytic harmonic
/// solution in `θ`.
///
/// `q0` must lie on the manifold and `p0` in its tangent space.
pub fn constrained_dynamics_reference(
    model: &LinearGaussianModel,
    q0: &[f64],
    p0: &[f64],
    t_end: f64,
    eps: f64,
) -> Result<ReferenceTrajectory> {
    let system = LiftedModel::new(model.clone());
    let d = model.dim_theta();
    let (mu, _) = model.posterior();
    let mut point = ManifoldPoint::new(&system, DVector::from_column_slice(q0))?;
    let mut p = DVector::from_column_slice(p0);
    let theta0 = DVector::from_column_slice(&q0[..d]);
    let v0 = DVector::from_column_slice(&p0[..d]);
    let n_steps = (t_end / eps).round() as usize;
    let analytic_at = |t: f64| &mu + (&theta0 - &mu) * t.cos() + &v0 * t.sin();

    let mut times = vec![0.0];
    let mut simulated = vec![theta0.clone()];
    let mut analytic = vec![analytic_at(0.0)];
    for k in 1..=n_steps {
        let out = constrained_step(&system, &point, &p, eps, 1e-12, 50, ProjectionSolver::Newton)?;
        if out.failed {
            return Err(Error::Numerical(format!("projection failed at step {k}")));
        }
        point = out.point.expect("successful step carries its end point");
        p = out.momentum;
        let t = k as f64 * eps;
        times.push(t);
        simulated.push(DVector::from_column_slice(system.theta(&point.q)));
        analytic.push(analytic_at(t));
    }
    Ok(ReferenceTrajectory { times, simulated, analytic })
}
