//! Markov kernels and the chain driver.
//!
//! Every kernel implements [`Sampler`]: a transition maps a state and a step
//! size to either a new state or a rejection, together with
//! [`TransitionStats`]. [`run_chain`] adds warm-up adaptation on top.

mod adapt;
mod chain;
mod chmc;
mod hmc;
mod mala;
mod position_dependent;
mod rwm;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use adapt::{find_initial_step_size, regularize_metric, AdaptationWindows, DualAveraging, WelfordCovariance};
pub use chain::{chain_rng, run_chain, run_chains, screened_prior_draw, ChainSettings, ChainTrace, Draw, START_SCREEN_FACTOR};
pub use chmc::{Chmc, ChmcConfig};
pub use hmc::{Hmc, Metric, MetricKind};
pub use mala::Mala;
pub use position_dependent::{FisherMetric, FnMetric, MetricField, PdMala, PdMalaVariant, PdRwm};
pub use rwm::Rwm;

use crate::error::{check_finite, Result};
use crate::model::{self, ad, Model};

/// Why a proposal was not accepted.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    /// Ordinary Metropolis rejection.
    Metropolis,
    /// The reversed step did not recover the previous position.
    Nonreversible,
    /// A position projection failed on the forward trajectory.
    SolverFailed,
    /// Non-finite state or energy error beyond the divergence threshold.
    Divergent,
}

impl RejectReason {
    pub const ALL: [RejectReason; 4] =
        [RejectReason::Metropolis, RejectReason::Nonreversible, RejectReason::SolverFailed, RejectReason::Divergent];

    pub fn as_str(self) -> &'static str {
        match self {
            RejectReason::Metropolis => "metropolis",
            RejectReason::Nonreversible => "nonreversible",
            RejectReason::SolverFailed => "solver_failed",
            RejectReason::Divergent => "divergent",
        }
    }
}

/// JSON writes NaN as `null`; read it back as NaN.
pub(crate) fn nan_from_null<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

/// Per-transition record.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TransitionStats {
    /// `min(1, exp(−ΔH))`, zero for early rejections.
    pub accept_prob: f64,
    pub accepted: bool,
    pub reject_reason: Option<RejectReason>,
    /// `H(end) − H(start)`; NaN when the trajectory did not finish.
    #[serde(deserialize_with = "nan_from_null")]
    pub energy_error: f64,
    /// Total projection iterations over forward and reversed steps.
    pub newton_iters: usize,
    pub n_steps: usize,
}

impl TransitionStats {
    pub(crate) fn rejected(reason: RejectReason, newton_iters: usize, n_steps: usize) -> Self {
        Self { accept_prob: 0.0, accepted: false, reject_reason: Some(reason), energy_error: f64::NAN, newton_iters, n_steps }
    }

    /// Metropolis decision on the log acceptance ratio `log_ratio`.
    pub(crate) fn metropolis<R: Rng + ?Sized>(log_ratio: f64, energy_error: f64, newton_iters: usize, n_steps: usize, rng: &mut R) -> Self {
        let accept_prob = if log_ratio.is_nan() { 0.0 } else { log_ratio.min(0.0).exp() };
        let u: f64 = rng.gen();
        let accepted = u < accept_prob;
        Self {
            accept_prob,
            accepted,
            reject_reason: (!accepted).then_some(RejectReason::Metropolis),
            energy_error,
            newton_iters,
            n_steps,
        }
    }
}

/// A Markov kernel parametrized by a step size.
pub trait Sampler {
    type State;

    /// State above the parameter vector `theta`.
    fn init(&self, theta: &[f64]) -> Result<Self::State>;

    /// One transition; `None` means the chain stays at `state`.
    fn transition<R: Rng + ?Sized>(&self, state: &Self::State, eps: f64, rng: &mut R)
        -> Result<(Option<Self::State>, TransitionStats)>;

    /// Parameter vector recorded in the trace.
    fn theta(&self, state: &Self::State) -> Vec<f64>;

    /// Whether [`Sampler::set_metric`] does anything.
    fn adapts_metric(&self) -> bool {
        false
    }

    /// Installs a metric estimated from warm-up draws (a covariance estimate).
    fn set_metric(&mut self, _covariance: &nalgebra::DMatrix<f64>) {}

    /// Metric-adaptation flavour, if any.
    fn metric_kind(&self) -> Option<MetricKind> {
        None
    }
}

/// An unnormalized density `exp(−Φ(x))` on `ℝⁿ`.
pub trait Target: Sync {
    fn dim(&self) -> usize;
    fn potential(&self, x: &[f64]) -> Result<f64>;
    fn potential_and_gradient(&self, x: &[f64]) -> Result<(f64, DVector<f64>)>;
}

impl<T: Target + ?Sized> Target for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn potential(&self, x: &[f64]) -> Result<f64> {
        (**self).potential(x)
    }
    fn potential_and_gradient(&self, x: &[f64]) -> Result<(f64, DVector<f64>)> {
        (**self).potential_and_gradient(x)
    }
}

/// The posterior of a [`Model`] in `θ` space, `−log π^σ(θ)`.
#[derive(Clone, Debug)]
pub struct PosteriorTarget<M>(pub M);

impl<M: Model> Target for PosteriorTarget<M> {
    fn dim(&self) -> usize {
        self.0.dim_theta()
    }

    fn potential(&self, x: &[f64]) -> Result<f64> {
        let u = model::neg_log_posterior(&self.0, x);
        check_finite("potential", &[u])?;
        Ok(u)
    }

    fn potential_and_gradient(&self, x: &[f64]) -> Result<(f64, DVector<f64>)> {
        if let Some(jac) = self.0.analytic_jacobian(x) {
            return chain_rule_gradient(&self.0, x, &jac);
        }
        let d = model::neg_log_posterior(&self.0, &ad::seed_dual(x));
        check_finite("potential", &[d.value])?;
        let g = DVector::from_fn(x.len(), |k, _| d.tangent(k));
        check_finite("potential gradient", g.as_slice())?;
        Ok((d.value, g))
    }
}

/// `∇[Φ_θ + Φ_η(η) + d_Y log σ]` with `η = (y − F)/σ`, assembled from a
/// supplied Jacobian instead of a dual pass through `F`.
fn chain_rule_gradient<M: Model>(m: &M, x: &[f64], df: &DMatrix<f64>) -> Result<(f64, DVector<f64>)> {
    let f = model::evaluate_forward(m, x)?;
    let (sigma, dsigma) = model::noise_scale_and_gradient(m, x)?;
    let eta: Vec<f64> = m.observed().iter().zip(f.iter()).map(|(y, fi)| (y - fi) / sigma).collect();
    let pe = m.prior_potential_eta(&ad::seed_dual(&eta));
    let (prior, mut g) = model::prior_gradient(m, x)?;
    let u = prior + pe.value + m.dim_y() as f64 * sigma.ln();
    check_finite("potential", &[u])?;
    let ge = DVector::from_fn(eta.len(), |i, _| pe.tangent(i));
    // Dη = −(DF + η ∇σᵀ)/σ.
    g -= df.tr_mul(&ge) / sigma;
    let eta_ge: f64 = eta.iter().zip(ge.iter()).map(|(e, g)| e * g).sum();
    g += &dsigma * ((m.dim_y() as f64 - eta_ge) / sigma);
    check_finite("potential gradient", g.as_slice())?;
    Ok((u, g))
}

/// A standard normal target, handy for tests and calibration.
#[derive(Clone, Copy, Debug)]
pub struct StandardNormalTarget(pub usize);

impl Target for StandardNormalTarget {
    fn dim(&self) -> usize {
        self.0
    }
    fn potential(&self, x: &[f64]) -> Result<f64> {
        Ok(0.5 * x.iter().map(|v| v * v).sum::<f64>())
    }
    fn potential_and_gradient(&self, x: &[f64]) -> Result<(f64, DVector<f64>)> {
        Ok((self.potential(x)?, DVector::from_column_slice(x)))
    }
}

/// `Err(Domain)` becomes `None`; other errors propagate.
pub(crate) fn soft<T>(r: Result<T>) -> Result<Option<T>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(crate::Error::Domain { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

pub(crate) fn standard_normal_vector<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(rand_distr::StandardNormal))
}
