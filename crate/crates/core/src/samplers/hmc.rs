use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{soft, standard_normal_vector, RejectReason, Sampler, Target, TransitionStats};
use crate::error::{Error, Result};
use crate::integrators::leapfrog_step_with;

/// Structure of an adapted metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Identity,
    Diagonal,
    Dense,
}

/// Euclidean metric given by its inverse mass matrix (a covariance
/// estimate); momenta are drawn from `Normal(0, M)`.
#[derive(Clone, Debug)]
pub enum Metric {
    Identity,
    Diagonal { inv_mass: DVector<f64> },
    /// `inv_mass = L Lᵀ`.
    Dense { inv_mass: DMatrix<f64>, chol: DMatrix<f64> },
}

impl Metric {
    pub fn diagonal(inv_mass: DVector<f64>) -> Result<Self> {
        if inv_mass.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Invalid("diagonal metric must be positive".into()));
        }
        Ok(Metric::Diagonal { inv_mass })
    }

    pub fn dense(inv_mass: DMatrix<f64>) -> Result<Self> {
        let chol = inv_mass
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("dense metric is not positive definite".into()))?
            .l();
        Ok(Metric::Dense { inv_mass, chol })
    }

    /// `p = M^{1/2} z` for a standard normal `z`.
    pub fn momentum_from(&self, z: DVector<f64>) -> DVector<f64> {
        match self {
            Metric::Identity => z,
            Metric::Diagonal { inv_mass } => z.zip_map(inv_mass, |zi, m| zi / m.sqrt()),
            Metric::Dense { chol, .. } => chol.transpose().solve_upper_triangular(&z).expect("triangular factor is non-singular"),
        }
    }

    /// `M⁻¹ p`.
    pub fn velocity(&self, p: &DVector<f64>) -> DVector<f64> {
        match self {
            Metric::Identity => p.clone(),
            Metric::Diagonal { inv_mass } => p.component_mul(inv_mass),
            Metric::Dense { inv_mass, .. } => inv_mass * p,
        }
    }

    pub fn kinetic(&self, p: &DVector<f64>) -> f64 {
        0.5 * p.dot(&self.velocity(p))
    }
}

/// HMC state: position with cached potential and gradient.
#[derive(Clone, Debug)]
pub struct HmcState {
    pub x: DVector<f64>,
    pub potential: f64,
    pub gradient: DVector<f64>,
}

/// Static-length HMC with a Euclidean metric.
#[derive(Clone, Debug)]
pub struct Hmc<T> {
    pub target: T,
    pub n_steps: usize,
    pub jitter: bool,
    pub metric: Metric,
    /// Structure used when adapting the metric.
    pub kind: MetricKind,
    /// `|ΔH|` above which a trajectory counts as divergent.
    pub divergence_threshold: f64,
}

impl<T: Target> Hmc<T> {
    pub fn new(target: T, n_steps: usize, kind: MetricKind) -> Self {
        Self { target, n_steps, jitter: false, metric: Metric::Identity, kind, divergence_threshold: 1000.0 }
    }

    pub fn with_metric(mut self, metric: Metric) -> Self {
        self.metric = metric;
        self
    }
}

impl<T: Target> Sampler for Hmc<T> {
    type State = HmcState;

    fn init(&self, theta: &[f64]) -> Result<HmcState> {
        let (potential, gradient) = self.target.potential_and_gradient(theta)?;
        Ok(HmcState { x: DVector::from_column_slice(theta), potential, gradient })
    }

    fn transition<R: Rng + ?Sized>(&self, s: &HmcState, eps: f64, rng: &mut R) -> Result<(Option<HmcState>, TransitionStats)> {
        let n_steps = if self.jitter { rng.gen_range(1..=self.n_steps) } else { self.n_steps };
        let p0 = self.metric.momentum_from(standard_normal_vector(s.x.len(), rng));
        let h0 = s.potential + self.metric.kinetic(&p0);
        let grad = |x: &DVector<f64>| soft(self.target.potential_and_gradient(x.as_slice())).ok().flatten();
        let mut x = s.x.clone();
        let mut p = p0;
        let mut g = s.gradient.clone();
        let mut u = s.potential;
        for _ in 0..n_steps {
            // The closure returns (U, ∇U); keep U of the last evaluation.
            let last = std::cell::Cell::new(f64::NAN);
            let step = leapfrog_step_with(
                |y| {
                    grad(y).map(|(uy, gy)| {
                        last.set(uy);
                        gy
                    })
                },
                |p| self.metric.velocity(p),
                &x,
                &p,
                &g,
                eps,
            );
            let Some((x1, p1, g1)) = step else {
                return Ok((None, TransitionStats::rejected(RejectReason::Divergent, 0, n_steps)));
            };
            x = x1;
            p = p1;
            g = g1;
            u = last.get();
        }
        let h1 = u + self.metric.kinetic(&p);
        let d_h = h1 - h0;
        if !d_h.is_finite() || d_h.abs() > self.divergence_threshold {
            let mut st = TransitionStats::rejected(RejectReason::Divergent, 0, n_steps);
            st.energy_error = d_h;
            return Ok((None, st));
        }
        let stats = TransitionStats::metropolis(-d_h, d_h, 0, n_steps, rng);
        Ok((stats.accepted.then(|| HmcState { x, potential: u, gradient: g }), stats))
    }

    fn theta(&self, s: &HmcState) -> Vec<f64> {
        s.x.as_slice().to_vec()
    }

    fn adapts_metric(&self) -> bool {
        self.kind != MetricKind::Identity
    }

    fn set_metric(&mut self, cov: &DMatrix<f64>) {
        let m = match self.kind {
            MetricKind::Identity => Ok(Metric::Identity),
            MetricKind::Diagonal => Metric::diagonal(cov.diagonal()),
            MetricKind::Dense => Metric::dense(cov.clone()),
        };
        if let Ok(m) = m {
            self.metric = m;
        }
    }

    fn metric_kind(&self) -> Option<MetricKind> {
        Some(self.kind)
    }
}
