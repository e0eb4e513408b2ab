use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adapt::{find_initial_step_size, regularize_metric, AdaptationWindows, DualAveraging, WelfordCovariance};
use super::{MetricKind, RejectReason, Sampler, TransitionStats};
use crate::error::{Error, Result};
use crate::model::{self, Model};

/// Default misfit factor of [`screened_prior_draw`].
pub const START_SCREEN_FACTOR: f64 = 100.0;

/// Independent, reproducible stream for chain `chain` under `seed`.
pub fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64);
    rng
}

/// Draws `θ` from the prior until its prediction misses the data by at most
/// `factor·(max|y| + σ(θ))` in every coordinate. Returns the draw and the
/// number of attempts.
///
/// Heavy-tailed priors occasionally put simulated states orders of magnitude
/// away from anything observed; a chain started there can adapt its step size
/// down to nothing before it reaches the bulk.
pub fn screened_prior_draw<M: Model, R: Rng + ?Sized>(
    model: &M,
    factor: f64,
    max_attempts: usize,
    rng: &mut R,
) -> Result<(Vec<f64>, usize)> {
    let y = model.observed();
    let y_scale = y.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    for attempt in 1..=max_attempts {
        let theta = model.sample_prior(rng);
        let Ok(f) = model::evaluate_forward(model, &theta) else { continue };
        let Ok((sigma, _)) = model::noise_scale_and_gradient(model, &theta) else { continue };
        let misfit = y.iter().zip(f.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if misfit <= factor * (y_scale + sigma) {
            return Ok((theta, attempt));
        }
    }
    Err(Error::Numerical(format!("no plausible prior draw in {max_attempts} attempts")))
}

/// Warm-up and sampling schedule for one chain.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainSettings {
    pub n_warmup: usize,
    pub n_main: usize,
    /// Initial step size (the fixed one when nothing is adapted).
    pub eps: f64,
    pub adapt_step_size: bool,
    /// Run the doubling/halving search for a starting step size.
    pub find_initial_step: bool,
    pub target_accept: f64,
    /// Adapt the metric in expanding windows when the sampler supports it.
    pub adapt_metric: bool,
}

impl Default for ChainSettings {
    fn default() -> Self {
        Self {
            n_warmup: 1000,
            n_main: 2500,
            eps: 0.1,
            adapt_step_size: true,
            find_initial_step: true,
            target_accept: 0.9,
            adapt_metric: true,
        }
    }
}

impl ChainSettings {
    /// No adaptation: `n_main` transitions at fixed `eps`.
    pub fn fixed(eps: f64, n_main: usize) -> Self {
        Self { n_warmup: 0, n_main, eps, adapt_step_size: false, find_initial_step: false, adapt_metric: false, ..Default::default() }
    }
}

/// One recorded draw.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Draw {
    pub theta: Vec<f64>,
    pub stats: TransitionStats,
}

/// Everything recorded for one chain.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ChainTrace {
    pub chain: usize,
    /// Main-phase draws.
    pub draws: Vec<Draw>,
    #[serde(deserialize_with = "super::nan_from_null")]
    pub warmup_accept_mean: f64,
    /// Step size used in the main phase.
    pub step_size: f64,
    pub warmup_seconds: f64,
    pub main_seconds: f64,
    /// Set when a hard numerical fault stopped the chain early.
    pub error: Option<String>,
}

impl ChainTrace {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    /// Coordinate `k` of every draw.
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.draws.iter().map(|d| d.theta[k]).collect()
    }

    pub fn mean_accept_prob(&self) -> f64 {
        mean(self.draws.iter().map(|d| d.stats.accept_prob))
    }

    pub fn accept_rate(&self) -> f64 {
        mean(self.draws.iter().map(|d| if d.stats.accepted { 1.0 } else { 0.0 }))
    }

    pub fn mean_newton_iters(&self) -> f64 {
        mean(self.draws.iter().map(|d| d.stats.newton_iters as f64))
    }

    pub fn reject_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut out: BTreeMap<&'static str, usize> = RejectReason::ALL.iter().map(|r| (r.as_str(), 0)).collect();
        for d in &self.draws {
            if let Some(r) = d.stats.reject_reason {
                *out.get_mut(r.as_str()).expect("all reasons listed") += 1;
            }
        }
        out
    }

    pub fn total_seconds(&self) -> f64 {
        self.warmup_seconds + self.main_seconds
    }
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = it.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

/// Runs warm-up (step-size and, where supported, metric adaptation) and
/// then `n_main` transitions at the adapted step size.
///
/// Initialization errors are returned; a hard fault later on ends the
/// chain with the partial trace and `error` set.
pub fn run_chain<S: Sampler, R: Rng + ?Sized>(
    sampler: &mut S,
    theta0: &[f64],
    settings: &ChainSettings,
    rng: &mut R,
) -> Result<ChainTrace> {
    let mut trace = ChainTrace::default();
    let mut state = sampler.init(theta0)?;
    let start = Instant::now();

    let mut eps = settings.eps;
    let adapt_eps = settings.adapt_step_size && settings.n_warmup > 0;
    if adapt_eps && settings.find_initial_step {
        eps = find_initial_step_size(sampler, &state, eps, rng)?;
    }
    let mut da = DualAveraging::new(eps, settings.target_accept);
    let kind = sampler.metric_kind().unwrap_or(MetricKind::Identity);
    let windows = (settings.adapt_metric && sampler.adapts_metric()).then(|| AdaptationWindows::new(settings.n_warmup));
    let mut welford = WelfordCovariance::new(sampler.theta(&state).len());
    let mut warm_acc = 0.0;

    for i in 0..settings.n_warmup {
        let (next, st) = match sampler.transition(&state, eps, rng) {
            Ok(v) => v,
            Err(e) => {
                trace.error = Some(e.to_string());
                trace.warmup_seconds = start.elapsed().as_secs_f64();
                return Ok(trace);
            }
        };
        warm_acc += st.accept_prob;
        if let Some(n) = next {
            state = n;
        }
        if adapt_eps {
            eps = da.update(st.accept_prob);
        }
        if let Some(w) = &windows {
            if w.in_window(i) {
                welford.add(&sampler.theta(&state));
            }
            if w.window_end(i) {
                let cov = regularize_metric(&welford.covariance(), welford.count(), kind);
                sampler.set_metric(&cov);
                welford.reset();
                if adapt_eps {
                    eps = find_initial_step_size(sampler, &state, eps, rng)?;
                    da = DualAveraging::new(eps, settings.target_accept);
                }
            }
        }
    }
    if adapt_eps {
        eps = da.final_step_size();
    }
    trace.warmup_accept_mean = if settings.n_warmup > 0 { warm_acc / settings.n_warmup as f64 } else { f64::NAN };
    trace.step_size = eps;
    trace.warmup_seconds = start.elapsed().as_secs_f64();

    let start = Instant::now();
    trace.draws.reserve(settings.n_main);
    for _ in 0..settings.n_main {
        match sampler.transition(&state, eps, rng) {
            Ok((next, stats)) => {
                if let Some(n) = next {
                    state = n;
                }
                trace.draws.push(Draw { theta: sampler.theta(&state), stats });
            }
            Err(e) => {
                trace.error = Some(e.to_string());
                break;
            }
        }
    }
    trace.main_seconds = start.elapsed().as_secs_f64();
    Ok(trace)
}

/// Runs `n_chains` chains one after another; `make(chain)` supplies each
/// chain's sampler and initial parameters, and chain `c` draws from
/// `chain_rng(seed, c)`.
pub fn run_chains<S, F>(n_chains: usize, seed: u64, settings: &ChainSettings, mut make: F) -> Result<Vec<ChainTrace>>
where
    S: Sampler,
    F: FnMut(usize, &mut ChaCha8Rng) -> Result<(S, Vec<f64>)>,
{
    (0..n_chains)
        .map(|c| {
            let mut rng = chain_rng(seed, c);
            let (mut sampler, theta0) = make(c, &mut rng)?;
            let mut t = run_chain(&mut sampler, &theta0, settings, &mut rng)?;
            t.chain = c;
            Ok(t)
        })
        .collect()
}
