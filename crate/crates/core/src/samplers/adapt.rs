use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{MetricKind, Sampler};
use crate::error::Result;

/// Dual-averaging step-size adaptation toward a target acceptance rate.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DualAveraging {
    pub log_eps: f64,
    pub log_eps_bar: f64,
    pub h_bar: f64,
    pub iteration: u64,
    pub gamma: f64,
    pub t0: f64,
    pub kappa: f64,
    pub mu: f64,
    pub target: f64,
}

impl DualAveraging {
    /// Starts from `eps0` with `μ = log(10 ε₀)`, `γ = 0.05`, `t₀ = 10`, `κ = 0.75`.
    pub fn new(eps0: f64, target: f64) -> Self {
        Self {
            log_eps: eps0.ln(),
            log_eps_bar: 0.0,
            h_bar: 0.0,
            iteration: 0,
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            mu: (10.0 * eps0).ln(),
            target,
        }
    }

    /// Feeds one acceptance probability and returns the next step size.
    pub fn update(&mut self, accept_prob: f64) -> f64 {
        self.iteration += 1;
        let t = self.iteration as f64;
        let w = 1.0 / (t + self.t0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob.clamp(0.0, 1.0));
        self.log_eps = self.mu - t.sqrt() / self.gamma * self.h_bar;
        let eta = t.powf(-self.kappa);
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar;
        self.log_eps.exp()
    }

    pub fn current(&self) -> f64 {
        self.log_eps.exp()
    }

    /// Averaged step size used once adaptation stops.
    pub fn final_step_size(&self) -> f64 {
        if self.iteration == 0 {
            self.current()
        } else {
            self.log_eps_bar.exp()
        }
    }
}

/// Streaming mean and covariance.
#[derive(Clone, Debug)]
pub struct WelfordCovariance {
    n: usize,
    mean: DVector<f64>,
    m2: DMatrix<f64>,
}

impl WelfordCovariance {
    pub fn new(dim: usize) -> Self {
        Self { n: 0, mean: DVector::zeros(dim), m2: DMatrix::zeros(dim, dim) }
    }

    pub fn add(&mut self, x: &[f64]) {
        self.n += 1;
        let x = DVector::from_column_slice(x);
        let delta = &x - &self.mean;
        self.mean += &delta / self.n as f64;
        let delta2 = &x - &self.mean;
        self.m2 += &delta * delta2.transpose();
    }

    pub fn count(&self) -> usize {
        self.n
    }

    /// Unbiased sample covariance (zero for fewer than two draws).
    pub fn covariance(&self) -> DMatrix<f64> {
        if self.n < 2 {
            return DMatrix::zeros(self.mean.len(), self.mean.len());
        }
        let c = &self.m2 / (self.n - 1) as f64;
        (&c + c.transpose()) * 0.5
    }

    pub fn reset(&mut self) {
        *self = Self::new(self.mean.len());
    }
}

/// Shrinks a covariance estimate from `n` draws toward the identity,
/// `Σ̂ n/(n+5) + 10⁻³·5/(n+5) I`; the diagonal kind keeps only variances.
pub fn regularize_metric(cov: &DMatrix<f64>, n: usize, kind: MetricKind) -> DMatrix<f64> {
    let d = cov.nrows();
    let n = n as f64;
    let shrunk = match kind {
        MetricKind::Dense => cov.clone(),
        MetricKind::Diagonal => DMatrix::from_diagonal(&cov.diagonal()),
        MetricKind::Identity => return DMatrix::identity(d, d),
    };
    shrunk * (n / (n + 5.0)) + DMatrix::identity(d, d) * (1e-3 * 5.0 / (n + 5.0))
}

/// Warm-up schedule with a fast initial buffer, expanding slow windows for
/// metric estimation and a fast terminal buffer.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdaptationWindows {
    pub init_buffer: usize,
    pub term_buffer: usize,
    /// `(start, end)` iteration ranges, end exclusive.
    pub windows: Vec<(usize, usize)>,
}

impl AdaptationWindows {
    pub fn new(n_warmup: usize) -> Self {
        let (mut init, mut term, mut base) = (75, 50, 25);
        if n_warmup < 20 {
            return Self { init_buffer: n_warmup, term_buffer: 0, windows: vec![] };
        }
        if init + term + base > n_warmup {
            init = (0.15 * n_warmup as f64) as usize;
            term = (0.1 * n_warmup as f64) as usize;
            base = n_warmup - init - term;
        }
        let end_slow = n_warmup - term;
        let mut windows = vec![];
        let mut start = init;
        let mut size = base;
        while start < end_slow {
            let mut end = start + size;
            // Stretch the last window when the next one would not fit.
            if end + 2 * size > end_slow {
                end = end_slow;
            }
            windows.push((start, end));
            start = end;
            size *= 2;
        }
        Self { init_buffer: init, term_buffer: term, windows }
    }

    /// Whether warm-up iteration `i` contributes to a metric window.
    pub fn in_window(&self, i: usize) -> bool {
        self.windows.iter().any(|&(s, e)| i >= s && i < e)
    }

    /// Whether iteration `i` closes a window.
    pub fn window_end(&self, i: usize) -> bool {
        self.windows.iter().any(|&(_, e)| i + 1 == e)
    }
}

/// Doubles or halves `eps0` until a trial transition's acceptance
/// probability crosses ½, leaving `state` untouched.
pub fn find_initial_step_size<S: Sampler, R: Rng + ?Sized>(sampler: &S, state: &S::State, eps0: f64, rng: &mut R) -> Result<f64> {
    let mut eps = eps0;
    let trial = |eps: f64, rng: &mut R| -> Result<f64> { Ok(sampler.transition(state, eps, rng)?.1.accept_prob) };
    let a0 = trial(eps, rng)?;
    let up = a0 > 0.5;
    for _ in 0..60 {
        let next = if up { eps * 2.0 } else { eps * 0.5 };
        if !(1e-10..=1e3).contains(&next) {
            break;
        }
        eps = next;
        let a = trial(eps, rng)?;
        if (up && a < 0.5) || (!up && a > 0.5) {
            break;
        }
    }
    Ok(eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    #[test]
    fn on_target_acceptance_pins_step_at_mu() {
        let mut da = DualAveraging::new(0.2, 0.9);
        for _ in 0..200 {
            let eps = da.update(0.9);
            assert_relative_eq!(eps.ln(), da.mu, epsilon = 1e-12);
        }
        assert_relative_eq!(da.final_step_size(), 2.0, epsilon = 1e-9);
    }

    #[test]
    fn zero_acceptance_shrinks_step_monotonically() {
        let mut da = DualAveraging::new(1.0, 0.9);
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let eps = da.update(0.0);
            assert!(eps < prev);
            prev = eps;
        }
    }

    #[test]
    fn welford_matches_two_pass() {
        let xs = [[1.0, 2.0], [3.0, -1.0], [0.5, 0.5], [2.0, 4.0]];
        let mut w = WelfordCovariance::new(2);
        for x in &xs {
            w.add(x);
        }
        let mean = [1.625, 1.375];
        let mut c = DMatrix::zeros(2, 2);
        for x in &xs {
            for i in 0..2 {
                for j in 0..2 {
                    c[(i, j)] += (x[i] - mean[i]) * (x[j] - mean[j]) / 3.0;
                }
            }
        }
        assert_relative_eq!(w.covariance(), c, epsilon = 1e-12);
    }

    #[test]
    fn repeated_draw_gives_shrunk_identity() {
        let mut w = WelfordCovariance::new(3);
        for _ in 0..10 {
            w.add(&[1.0, 2.0, 3.0]);
        }
        let m = regularize_metric(&w.covariance(), 10, MetricKind::Dense);
        assert_relative_eq!(m, DMatrix::identity(3, 3) * (1e-3 * 5.0 / 15.0), epsilon = 1e-15);
    }

    #[test]
    fn iid_normal_draws_estimate_identity() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let mut w = WelfordCovariance::new(2);
        for _ in 0..20000 {
            w.add(&[rng.sample(rand_distr::StandardNormal), rng.sample(rand_distr::StandardNormal)]);
        }
        let m = regularize_metric(&w.covariance(), 20000, MetricKind::Dense);
        assert!((m - DMatrix::identity(2, 2)).amax() < 0.05);
    }

    #[test]
    fn stan_windows_for_default_warmup() {
        let w = AdaptationWindows::new(1000);
        assert_eq!(w.windows, vec![(75, 100), (100, 150), (150, 250), (250, 450), (450, 950)]);
        let short = AdaptationWindows::new(100);
        assert_eq!(short.init_buffer, 15);
        assert_eq!(short.windows.last().unwrap().1, 90);
    }
}
