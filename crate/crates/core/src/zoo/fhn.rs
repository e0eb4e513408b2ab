use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Dataset;
use crate::error::{check_finite, Error, Result};
use crate::model::{static_jacobian, static_second_order, Model, Scalar, SecondOrder};

/// Number of observations and the observation horizon.
pub const FHN_OBSERVATIONS: usize = 200;
pub const FHN_HORIZON: f64 = 20.0;
/// RK4 substeps per observation interval.
pub const FHN_SUBSTEPS: usize = 5;

/// Natural-scale FitzHugh–Nagumo parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FhnParams {
    pub x0: f64,
    pub x1: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub eps_fhn: f64,
    pub zeta: f64,
    pub sigma: f64,
}

impl FhnParams {
    pub const NAMES: [&'static str; 9] = ["x0_init", "x1_init", "alpha", "beta", "gamma", "delta", "eps_fhn", "zeta", "sigma"];

    /// Ground truth with initial state `(1, −1)`.
    pub fn truth(sigma: f64) -> Self {
        Self { x0: 1.0, x1: -1.0, alpha: 3.0, beta: 1.0, gamma: 3.0, delta: 1.0 / 3.0, eps_fhn: 1.0 / 15.0, zeta: 1.0 / 15.0, sigma }
    }

    pub fn to_array(&self) -> [f64; 9] {
        [self.x0, self.x1, self.alpha, self.beta, self.gamma, self.delta, self.eps_fhn, self.zeta, self.sigma]
    }

    pub fn from_array(a: &[f64]) -> Self {
        Self { x0: a[0], x1: a[1], alpha: a[2], beta: a[3], gamma: a[4], delta: a[5], eps_fhn: a[6], zeta: a[7], sigma: a[8] }
    }

    /// Unconstrained coordinates: initial state as is, logarithms of the rest.
    pub fn to_unconstrained(&self) -> Vec<f64> {
        let a = self.to_array();
        a.iter().enumerate().map(|(i, v)| if i < 2 { *v } else { v.ln() }).collect()
    }

    pub fn from_unconstrained(u: &[f64]) -> Self {
        let a: Vec<f64> = u.iter().enumerate().map(|(i, v)| if i < 2 { *v } else { v.exp() }).collect();
        Self::from_array(&a)
    }
}

/// `(x₀(0), s x₁(0), α, β, γ/s, s δ, ε, s ζ, σ)`, under which the observed
/// coordinate `x₀(t)` is unchanged.
pub fn fhn_scaling_transform(p: &FhnParams, s: f64) -> FhnParams {
    assert!(s > 0.0, "scaling factor must be positive");
    FhnParams { x1: s * p.x1, gamma: p.gamma / s, delta: s * p.delta, zeta: s * p.zeta, ..*p }
}

fn fhn_rhs<S: Scalar>(x: &[S; 2], k: &[S; 6]) -> [S; 2] {
    let [a, b, g, d, e, z] = k;
    let x0 = x[0].clone();
    let x1 = x[1].clone();
    [
        a.clone() * x0.clone() - b.clone() * x0.powi(3) + g.clone() * x1.clone(),
        z.clone() - d.clone() * x0 - e.clone() * x1,
    ]
}

fn rk4_step<S: Scalar>(x: &[S; 2], k: &[S; 6], h: f64) -> [S; 2] {
    let shift = |x: &[S; 2], d: &[S; 2], c: f64| [x[0].clone() + d[0].clone() * c, x[1].clone() + d[1].clone() * c];
    let k1 = fhn_rhs(x, k);
    let k2 = fhn_rhs(&shift(x, &k1, 0.5 * h), k);
    let k3 = fhn_rhs(&shift(x, &k2, 0.5 * h), k);
    let k4 = fhn_rhs(&shift(x, &k3, h), k);
    let mut out = x.clone();
    for i in 0..2 {
        let incr = k1[i].clone() + (k2[i].clone() + k3[i].clone()) * 2.0 + k4[i].clone();
        out[i] = out[i].clone() + incr * (h / 6.0);
    }
    out
}

/// RK4 solution of the two-state system at each time of `t_grid` (which
/// must start at 0), with `substeps` equal steps between consecutive times.
///
/// `rates` is `(α, β, γ, δ, ε, ζ)`.
pub fn fhn_trajectory<S: Scalar>(x_init: [S; 2], rates: &[S; 6], t_grid: &[f64], substeps: usize) -> Vec<[S; 2]> {
    let mut x = x_init;
    let mut out = Vec::with_capacity(t_grid.len());
    let mut t_prev = t_grid.first().copied().unwrap_or(0.0);
    for &t in t_grid {
        let h = (t - t_prev) / substeps as f64;
        if h > 0.0 {
            for _ in 0..substeps {
                x = rk4_step(&x, rates, h);
            }
        }
        out.push(x.clone());
        t_prev = t;
    }
    out
}

/// Simulated trajectory for natural parameters; a blow-up is reported as
/// a domain error.
pub fn fhn_simulate(p: &FhnParams, t_grid: &[f64], substeps: usize) -> Result<Vec<[f64; 2]>> {
    if t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Invalid("time grid must be strictly increasing".into()));
    }
    let rates = [p.alpha, p.beta, p.gamma, p.delta, p.eps_fhn, p.zeta];
    let traj = fhn_trajectory([p.x0, p.x1], &rates, t_grid, substeps);
    let flat: Vec<f64> = traj.iter().flatten().copied().collect();
    check_finite("fhn trajectory", &flat)?;
    Ok(traj)
}

/// Equispaced observation times `0 = t₁ < … < t_n = horizon`.
pub fn fhn_observation_times(n: usize, horizon: f64) -> Vec<f64> {
    (0..n).map(|k| horizon * k as f64 / (n - 1) as f64).collect()
}

/// Parameter inference for FitzHugh–Nagumo from noisy observations of
/// `x₀(t)`.
///
/// `θ = (x₀(0), x₁(0), log α, log β, log γ, log δ, log ε, log ζ, log σ)`
/// with log-normal priors on the rates, standard normal priors on the
/// initial state and a half-normal(1) prior on `σ`.
#[derive(Clone, Debug)]
pub struct FitzHughNagumoModel {
    pub times: Vec<f64>,
    pub substeps: usize,
    y: Vec<f64>,
}

/// Prior location of each log-rate `(α, β, γ, δ, ε, ζ)`; all scales are 1.
const LOG_RATE_PRIOR_MEAN: [f64; 6] = [0.0, 0.0, 0.0, -1.0, -2.0, -2.0];

impl FitzHughNagumoModel {
    pub fn new(times: Vec<f64>, y: Vec<f64>, substeps: usize) -> Self {
        assert_eq!(times.len(), y.len());
        Self { times, substeps, y }
    }

    /// Observations of the truth at `sigma`, reproducible from `seed`.
    pub fn simulate(sigma: f64, seed: u64) -> Result<(Self, Dataset)> {
        let times = fhn_observation_times(FHN_OBSERVATIONS, FHN_HORIZON);
        let truth = FhnParams::truth(sigma);
        let traj = fhn_simulate(&truth, &times, FHN_SUBSTEPS)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<f64> = traj.iter().map(|x| x[0] + sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        let data = Dataset {
            model: "fhn".into(),
            seed,
            sigma,
            truth: FhnParams::NAMES.iter().map(|n| n.to_string()).zip(truth.to_array()).collect(),
            times: times.clone(),
            y: y.clone(),
        };
        Ok((Self::new(times, y, FHN_SUBSTEPS), data))
    }

    /// Gaussian log likelihood of the observations at natural parameters.
    pub fn log_likelihood(&self, p: &FhnParams) -> Result<f64> {
        let traj = fhn_simulate(p, &self.times, self.substeps)?;
        let n = self.y.len() as f64;
        let ss: f64 = traj.iter().zip(&self.y).map(|(x, y)| (y - x[0]).powi(2)).sum();
        Ok(-0.5 * ss / (p.sigma * p.sigma) - n * p.sigma.ln() - 0.5 * n * (2.0 * std::f64::consts::PI).ln())
    }
}

impl Model for FitzHughNagumoModel {
    fn dim_theta(&self) -> usize {
        9
    }

    fn dim_y(&self) -> usize {
        self.y.len()
    }

    fn observed(&self) -> &[f64] {
        &self.y
    }

    fn forward<S: Scalar>(&self, theta: &[S]) -> Vec<S> {
        let rates: [S; 6] = std::array::from_fn(|i| theta[2 + i].exp());
        fhn_trajectory([theta[0].clone(), theta[1].clone()], &rates, &self.times, self.substeps)
            .into_iter()
            .map(|[x0, _]| x0)
            .collect()
    }

    fn noise_scale<S: Scalar>(&self, theta: &[S]) -> S {
        theta[8].exp()
    }

    fn prior_potential_theta<S: Scalar>(&self, theta: &[S]) -> S {
        let mut u = (theta[0].square() + theta[1].square()) * 0.5;
        for (i, m) in LOG_RATE_PRIOR_MEAN.iter().enumerate() {
            u = u + (theta[2 + i].clone() - *m).square() * 0.5;
        }
        // Half-normal(1) on σ = exp(θ₈), with the log-Jacobian.
        u + theta[8].exp().square() * 0.5 - theta[8].clone()
    }

    fn analytic_jacobian(&self, theta: &[f64]) -> Option<DMatrix<f64>> {
        static_jacobian::<_, 9>(self, theta).ok()
    }

    fn analytic_second_order(&self, theta: &[f64]) -> Option<Result<SecondOrder>> {
        Some(static_second_order::<_, 9>(self, theta))
    }

    fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut out = vec![rng.sample(StandardNormal), rng.sample(StandardNormal)];
        for m in LOG_RATE_PRIOR_MEAN {
            out.push(m + rng.sample::<f64, _>(StandardNormal));
        }
        out.push(rng.sample::<f64, _>(StandardNormal).abs().ln());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{validate_derivatives, Dual};

    #[test]
    fn zero_dynamics_keep_initial_state() {
        let p = FhnParams { alpha: 0.0, beta: 0.0, gamma: 0.0, delta: 0.0, eps_fhn: 0.0, zeta: 0.0, ..FhnParams::truth(0.1) };
        let traj = fhn_simulate(&p, &fhn_observation_times(11, 5.0), 5).unwrap();
        assert!(traj.iter().all(|x| x == &[1.0, -1.0]));
    }

    #[test]
    fn rk4_single_step_on_exponential_growth() {
        // ẋ = x through the first component: α = 1, everything else 0.
        let rates = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let x = rk4_step(&[1.0, 0.0], &rates, 0.1);
        assert!((x[0] - 1.105_170_833_333_333_3).abs() < 1e-15, "{}", x[0]);
        assert!((x[0] - 0.1f64.exp()).abs() < 1e-6);
    }

    #[test]
    fn substep_refinement_changes_observations_by_little() {
        let truth = FhnParams::truth(0.1);
        let times = fhn_observation_times(FHN_OBSERVATIONS, FHN_HORIZON);
        let a = fhn_simulate(&truth, &times, FHN_SUBSTEPS).unwrap();
        let b = fhn_simulate(&truth, &times, 2 * FHN_SUBSTEPS).unwrap();
        let diff = a.iter().zip(&b).map(|(u, v)| (u[0] - v[0]).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-5, "{diff}");
    }

    #[test]
    fn scaling_transform_group_laws() {
        let p = FhnParams::truth(0.1);
        assert_eq!(fhn_scaling_transform(&p, 1.0), p);
        let back = fhn_scaling_transform(&fhn_scaling_transform(&p, 2.0), 0.5);
        for (u, v) in back.to_array().iter().zip(p.to_array()) {
            assert!((u - v).abs() <= 1e-15 * v.abs().max(1.0));
        }
    }

    #[test]
    fn scaled_parameters_give_the_same_observations() {
        let p = FhnParams::truth(0.1);
        let times = fhn_observation_times(FHN_OBSERVATIONS, FHN_HORIZON);
        let a = fhn_simulate(&p, &times, FHN_SUBSTEPS).unwrap();
        let b = fhn_simulate(&fhn_scaling_transform(&p, 3.0), &times, FHN_SUBSTEPS).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u[0] - v[0]).abs() <= 1e-10);
            assert!((3.0 * u[1] - v[1]).abs() <= 1e-10);
        }
    }

    #[test]
    fn likelihood_invariant_under_scaling() {
        let (m, _) = FitzHughNagumoModel::simulate(0.1, 11).unwrap();
        let p = FhnParams::truth(0.1);
        let l0 = m.log_likelihood(&p).unwrap();
        for s in [0.5, 0.8, 1.7, 2.0] {
            let l = m.log_likelihood(&fhn_scaling_transform(&p, s)).unwrap();
            assert!(((l - l0) / l0).abs() <= 1e-8, "s = {s}");
        }
    }

    #[test]
    fn forward_matches_simulation_and_ad_agrees() {
        let (m, _) = FitzHughNagumoModel::simulate(0.1, 3).unwrap();
        let theta = FhnParams::truth(0.1).to_unconstrained();
        let f: Vec<f64> = m.forward(&theta);
        let sim = fhn_simulate(&FhnParams::truth(0.1), &m.times, m.substeps).unwrap();
        for (a, b) in f.iter().zip(&sim) {
            assert!((a - b[0]).abs() < 1e-12);
        }
        let report = validate_derivatives(&m, &theta, 1e-6).unwrap();
        assert!(report.passed(), "{report:?}");
        let _: Vec<Dual> = m.forward(&crate::model::ad::seed_dual(&theta));
    }

    #[test]
    fn dataset_roundtrip() {
        let (_, data) = FitzHughNagumoModel::simulate(0.1, 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (csv, json) = data.write(dir.path(), "fhn").unwrap();
        let (t, y) = Dataset::read_observations(&csv).unwrap();
        assert_eq!(t, data.times);
        assert_eq!(y, data.y);
        let side: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
        assert_eq!(side["seed"], 5);
        assert_eq!(side["truth"]["gamma"], 3.0);
    }
}
