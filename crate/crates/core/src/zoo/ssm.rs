use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Dataset;
use crate::model::{Model, Scalar};

/// Number of global parameters `φ = (μ, log γ, atanh ρ, log σ)`.
pub const SSM_PARAMS: usize = 4;

/// Natural-scale parameters of the AR(1) state-space model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsmParams {
    pub mu: f64,
    pub gamma: f64,
    pub rho: f64,
    pub sigma: f64,
}

impl SsmParams {
    pub const NAMES: [&'static str; 4] = ["mu", "gamma", "rho", "sigma"];

    pub fn truth(sigma: f64) -> Self {
        Self { mu: -0.5, gamma: 0.4, rho: 0.9, sigma }
    }

    pub fn to_unconstrained(&self) -> [f64; 4] {
        [self.mu, self.gamma.ln(), self.rho.atanh(), self.sigma.ln()]
    }

    pub fn from_unconstrained(u: &[f64]) -> Self {
        Self { mu: u[0], gamma: u[1].exp(), rho: u[2].tanh(), sigma: u[3].exp() }
    }
}

/// Latent states from innovations, `x₁ = μ + γ/√(1−ρ²) ν₁` and
/// `x_t = μ + ρ(x_{t−1} − μ) + γ ν_t`.
pub fn ssm_states<S: Scalar>(mu: &S, gamma: &S, rho: &S, nu: &[S]) -> Vec<S> {
    let mut out: Vec<S> = Vec::with_capacity(nu.len());
    for (t, n) in nu.iter().enumerate() {
        let x = if t == 0 {
            let sd = gamma.clone() / (S::constant(1.0) - rho.square()).sqrt();
            mu.clone() + sd * n.clone()
        } else {
            mu.clone() + rho.clone() * (out[t - 1].clone() - mu.clone()) + gamma.clone() * n.clone()
        };
        out.push(x);
    }
    out
}

/// Negative log prior of `(φ, ν)` in unconstrained coordinates, with
/// `μ ~ N(0, 1)`, `γ ~ HalfNormal(1)`, `ρ ~ U(−1, 1)`, `σ ~ HalfNormal(3)`
/// and standard normal innovations; includes the transform Jacobians.
pub fn ssm_prior_potential<S: Scalar>(phi: &[S], nu: &[S]) -> S {
    let (mu, lg, ar, ls) = (&phi[0], &phi[1], &phi[2], &phi[3]);
    let rho = ar.tanh();
    let mut u = mu.square() * 0.5;
    u = u + lg.exp().square() * 0.5 - lg.clone();
    u = u - (S::constant(1.0) - rho.square()).ln();
    u = u + ls.exp().square() * (1.0 / 18.0) - ls.clone();
    nu.iter().fold(u, |acc, n| acc + n.square() * 0.5)
}

/// Nonlinear state-space model `y_t = exp(x_t) + σ η_t` over AR(1) latent
/// states, non-centred in the innovations: `θ = (φ, ν₁, …, ν_T)`.
#[derive(Clone, Debug)]
pub struct NonlinearSsmModel {
    y: Vec<f64>,
}

impl NonlinearSsmModel {
    pub fn new(y: Vec<f64>) -> Self {
        Self { y }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Simulates `T` observations from `params`, returning the model, the
    /// generating innovations and noise, and the dataset record.
    pub fn simulate(params: &SsmParams, t_len: usize, seed: u64) -> (Self, SsmSimulation, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nu: Vec<f64> = (0..t_len).map(|_| rng.sample(StandardNormal)).collect();
        let eta: Vec<f64> = (0..t_len).map(|_| rng.sample(StandardNormal)).collect();
        let x = ssm_states(&params.mu, &params.gamma, &params.rho, &nu);
        let y: Vec<f64> = x.iter().zip(&eta).map(|(x, e)| x.exp() + params.sigma * e).collect();
        let data = Dataset {
            model: "ssm".into(),
            seed,
            sigma: params.sigma,
            truth: SsmParams::NAMES.iter().map(|n| n.to_string()).zip([params.mu, params.gamma, params.rho, params.sigma]).collect(),
            times: (1..=t_len).map(|t| t as f64).collect(),
            y: y.clone(),
        };
        (Self::new(y), SsmSimulation { params: *params, nu, eta, x }, data)
    }

    /// `θ` of a simulation.
    pub fn theta_of(sim: &SsmSimulation) -> Vec<f64> {
        let mut th = sim.params.to_unconstrained().to_vec();
        th.extend_from_slice(&sim.nu);
        th
    }
}

/// Everything drawn while simulating a state-space dataset.
#[derive(Clone, Debug)]
pub struct SsmSimulation {
    pub params: SsmParams,
    pub nu: Vec<f64>,
    pub eta: Vec<f64>,
    pub x: Vec<f64>,
}

impl Model for NonlinearSsmModel {
    fn dim_theta(&self) -> usize {
        SSM_PARAMS + self.y.len()
    }

    fn dim_y(&self) -> usize {
        self.y.len()
    }

    fn observed(&self) -> &[f64] {
        &self.y
    }

    fn forward<S: Scalar>(&self, theta: &[S]) -> Vec<S> {
        let (phi, nu) = theta.split_at(SSM_PARAMS);
        ssm_states(&phi[0], &phi[1].exp(), &phi[2].tanh(), nu).iter().map(|x| x.exp()).collect()
    }

    fn noise_scale<S: Scalar>(&self, theta: &[S]) -> S {
        theta[3].exp()
    }

    fn prior_potential_theta<S: Scalar>(&self, theta: &[S]) -> S {
        let (phi, nu) = theta.split_at(SSM_PARAMS);
        ssm_prior_potential(phi, nu)
    }

    fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mu: f64 = rng.sample(StandardNormal);
        let gamma = rng.sample::<f64, _>(StandardNormal).abs();
        let rho: f64 = rng.gen_range(-1.0..1.0);
        let sigma = 3.0 * rng.sample::<f64, _>(StandardNormal).abs();
        let mut th = SsmParams { mu, gamma, rho, sigma }.to_unconstrained().to_vec();
        th.extend((0..self.y.len()).map(|_| rng.sample::<f64, _>(StandardNormal)));
        th
    }
}
