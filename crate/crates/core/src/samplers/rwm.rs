use nalgebra::{DMatrix, DVector};
use rand::Rng;

use super::{soft, standard_normal_vector, RejectReason, Sampler, Target, TransitionStats};
use crate::error::{Error, Result};

/// Random-walk Metropolis, `θ' = θ + ε S z` with `S Sᵀ` the proposal covariance.
#[derive(Clone, Debug)]
pub struct Rwm<T> {
    pub target: T,
    /// `None` means the identity.
    pub factor: Option<DMatrix<f64>>,
}

/// RWM state: position and its potential.
#[derive(Clone, Debug)]
pub struct RwmState {
    pub x: DVector<f64>,
    pub potential: f64,
}

impl<T: Target> Rwm<T> {
    pub fn new(target: T) -> Self {
        Self { target, factor: None }
    }

    /// Proposal covariance `cov`, which may be singular (a zero matrix
    /// proposes no move at all).
    pub fn with_covariance(mut self, cov: &DMatrix<f64>) -> Result<Self> {
        let eig = cov.clone().symmetric_eigen();
        if eig.eigenvalues.iter().any(|&l| l < -1e-12 * eig.eigenvalues.amax().max(1.0)) {
            return Err(Error::Invalid("proposal covariance must be positive semi-definite".into()));
        }
        let sqrt = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        self.factor = Some(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt));
        Ok(self)
    }
}

impl<T: Target> Sampler for Rwm<T> {
    type State = RwmState;

    fn init(&self, theta: &[f64]) -> Result<RwmState> {
        Ok(RwmState { x: DVector::from_column_slice(theta), potential: self.target.potential(theta)? })
    }

    fn transition<R: Rng + ?Sized>(&self, s: &RwmState, eps: f64, rng: &mut R) -> Result<(Option<RwmState>, TransitionStats)> {
        let z = standard_normal_vector(s.x.len(), rng);
        let step = match &self.factor {
            Some(f) => f * z,
            None => z,
        };
        let x = &s.x + step * eps;
        let Some(u) = soft(self.target.potential(x.as_slice()))? else {
            return Ok((None, TransitionStats::rejected(RejectReason::Divergent, 0, 1)));
        };
        let stats = TransitionStats::metropolis(s.potential - u, u - s.potential, 0, 1, rng);
        Ok((stats.accepted.then_some(RwmState { x, potential: u }), stats))
    }

    fn theta(&self, s: &RwmState) -> Vec<f64> {
        s.x.as_slice().to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samplers::{PosteriorTarget, StandardNormalTarget};
    use crate::zoo::ToyLoopModel;
    use rand::SeedableRng;

    #[test]
    fn zero_covariance_always_accepts_without_moving() {
        let r = Rwm::new(StandardNormalTarget(2)).with_covariance(&DMatrix::zeros(2, 2)).unwrap();
        let s = r.init(&[0.4, -0.3]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let (next, st) = r.transition(&s, 1.0, &mut rng).unwrap();
            assert_eq!(st.accept_prob, 1.0);
            assert!(st.accepted);
            assert_eq!(next.unwrap().x, s.x);
        }
    }

    #[test]
    fn equal_density_proposal_has_unit_acceptance() {
        // One-dimensional standard normal from x = -1: the mirrored point
        // x = 1 is reached with ε z = 2.
        let t = StandardNormalTarget(1);
        let u0 = t.potential(&[-1.0]).unwrap();
        let u1 = t.potential(&[1.0]).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let st = TransitionStats::metropolis(u0 - u1, u1 - u0, 0, 1, &mut rng);
        assert_eq!(st.accept_prob, 1.0);
    }

    #[test]
    fn acceptance_falls_as_step_grows_past_sigma() {
        let t = PosteriorTarget(ToyLoopModel::new(0.1));
        let r = Rwm::new(&t);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let s = r.init(&crate::zoo::loop_point(1.0, 1.0)).unwrap();
        let mean = |eps: f64, rng: &mut rand_chacha::ChaCha8Rng| {
            (0..400).map(|_| r.transition(&s, eps, rng).unwrap().1.accept_prob).sum::<f64>() / 400.0
        };
        let (small, large) = (mean(0.01, &mut rng), mean(1.0, &mut rng));
        assert!(small > 0.8 && large < 0.1, "small {small}, large {large}");
    }
}
