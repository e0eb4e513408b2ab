use nalgebra::DVector;
use rand::Rng;

use super::{soft, standard_normal_vector, RejectReason, Sampler, Target, TransitionStats};
use crate::error::Result;
use crate::samplers::hmc::HmcState;

/// Metropolis-adjusted Langevin, `θ' ~ Normal(θ − (ε²/2)∇Φ(θ), ε² I)`.
#[derive(Clone, Debug)]
pub struct Mala<T> {
    pub target: T,
}

impl<T: Target> Mala<T> {
    pub fn new(target: T) -> Self {
        Self { target }
    }
}

/// `log q(to | from)` up to a constant shared by both directions.
fn log_proposal(to: &DVector<f64>, from: &DVector<f64>, grad_from: &DVector<f64>, eps: f64) -> f64 {
    let mean = from - grad_from * (0.5 * eps * eps);
    -(to - mean).norm_squared() / (2.0 * eps * eps)
}

impl<T: Target> Sampler for Mala<T> {
    type State = HmcState;

    fn init(&self, theta: &[f64]) -> Result<HmcState> {
        let (potential, gradient) = self.target.potential_and_gradient(theta)?;
        Ok(HmcState { x: DVector::from_column_slice(theta), potential, gradient })
    }

    fn transition<R: Rng + ?Sized>(&self, s: &HmcState, eps: f64, rng: &mut R) -> Result<(Option<HmcState>, TransitionStats)> {
        let z = standard_normal_vector(s.x.len(), rng);
        let x = &s.x - &s.gradient * (0.5 * eps * eps) + z * eps;
        let Some((u, g)) = soft(self.target.potential_and_gradient(x.as_slice()))? else {
            return Ok((None, TransitionStats::rejected(RejectReason::Divergent, 0, 1)));
        };
        let log_ratio = s.potential - u + log_proposal(&s.x, &x, &g, eps) - log_proposal(&x, &s.x, &s.gradient, eps);
        let stats = TransitionStats::metropolis(log_ratio, u - s.potential, 0, 1, rng);
        Ok((stats.accepted.then_some(HmcState { x, potential: u, gradient: g }), stats))
    }

    fn theta(&self, s: &HmcState) -> Vec<f64> {
        s.x.as_slice().to_vec()
    }
}
