//! Chain-quality statistics: rank-normalized bulk ESS and split-R̂, Monte
//! Carlo standard errors and per-chain acceptance summaries.
//!
//! Draws are pooled, ranked (ties share their average rank) and mapped to
//! normal scores `Φ⁻¹((r − 3/8)/(S + 1/4))`. Each chain is then split in
//! half, so a chain that drifts looks like two disagreeing chains.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::samplers::{nan_from_null, ChainTrace};

/// A statistic together with a flag for inputs it is not defined on
/// (constant draws), in which case `value` is NaN.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainStat {
    #[serde(deserialize_with = "nan_from_null")]
    pub value: f64,
    pub degenerate: bool,
}

impl ChainStat {
    fn degenerate() -> Self {
        Self { value: f64::NAN, degenerate: true }
    }

    fn ok(value: f64) -> Self {
        Self { value, degenerate: false }
    }
}

fn check_chains(chains: &[Vec<f64>]) -> Result<usize> {
    let n = chains.first().map_or(0, |c| c.len());
    if chains.is_empty() || n < 4 {
        return Err(Error::Invalid("need at least one chain of at least 4 draws".into()));
    }
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::Invalid("chains have different lengths".into()));
    }
    if chains.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("non-finite draw".into()));
    }
    Ok(n)
}

/// First and second halves of every chain; the middle draw of an odd-length
/// chain is dropped.
fn split_chains(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * chains.len());
    for c in chains {
        let h = c.len() / 2;
        out.push(c[..h].to_vec());
        out.push(c[c.len() - h..].to_vec());
    }
    out
}

/// Normal scores of the pooled fractional ranks, Blom offset 3/8.
pub fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut idx: Vec<(f64, usize, usize)> =
        chains.iter().enumerate().flat_map(|(c, v)| v.iter().enumerate().map(move |(i, x)| (*x, c, i))).collect();
    idx.sort_by(|a, b| a.0.total_cmp(&b.0));
    let s = idx.len() as f64;
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut out: Vec<Vec<f64>> = chains.iter().map(|c| vec![0.0; c.len()]).collect();
    let mut k = 0;
    while k < idx.len() {
        let mut j = k;
        while j + 1 < idx.len() && idx[j + 1].0 == idx[k].0 {
            j += 1;
        }
        // Ranks are 1-based; ties share their average.
        let rank = (k + j) as f64 / 2.0 + 1.0;
        let z = normal.inverse_cdf((rank - 0.375) / (s + 0.25));
        for &(_, c, i) in &idx[k..=j] {
            out[c][i] = z;
        }
        k = j + 1;
    }
    out
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_var(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// `(W, B/n)` over equal-length chains.
fn within_between(chains: &[Vec<f64>]) -> (f64, f64) {
    let w = mean(&chains.iter().map(|c| sample_var(c)).collect::<Vec<_>>());
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let b_over_n = if chains.len() > 1 { sample_var(&means) } else { 0.0 };
    (w, b_over_n)
}

fn is_constant(chains: &[Vec<f64>]) -> bool {
    let first = chains[0][0];
    chains.iter().flatten().all(|v| *v == first)
}

/// Biased autocovariance at `lag`.
fn autocov(x: &[f64], m: f64, lag: usize) -> f64 {
    let n = x.len();
    (0..n - lag).map(|i| (x[i] - m) * (x[i + lag] - m)).sum::<f64>() / n as f64
}

/// Multi-chain ESS of already-split chains, with Geyer's initial monotone
/// sequence: autocorrelations are summed in pairs up to the first negative
/// pair, and the pair sums are forced non-increasing.
fn ess_of_split(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains[0].len();
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let chain_var: Vec<f64> = chains.iter().zip(&means).map(|(c, mu)| autocov(c, *mu, 0) * n as f64 / (n as f64 - 1.0)).collect();
    let mean_var = mean(&chain_var);
    let mut var_plus = mean_var * (n as f64 - 1.0) / n as f64;
    if m > 1 {
        var_plus += sample_var(&means);
    }
    let rho = |t: usize| -> f64 {
        let ac = chains.iter().zip(&means).map(|(c, mu)| autocov(c, *mu, t)).sum::<f64>() / m as f64;
        1.0 - (mean_var - ac) / var_plus
    };

    let mut rho_hat = vec![0.0; n];
    rho_hat[0] = 1.0;
    let mut even;
    let mut odd = rho(1);
    rho_hat[1] = odd;
    let mut t = 1;
    even = 1.0;
    while t + 3 < n && even + odd > 0.0 {
        even = rho(t + 1);
        odd = rho(t + 2);
        if even + odd >= 0.0 {
            rho_hat[t + 1] = even;
            rho_hat[t + 2] = odd;
        }
        t += 2;
    }
    let max_t = t;
    if even > 0.0 && max_t + 1 < n {
        rho_hat[max_t + 1] = even;
    }
    let mut t = 1;
    while t + 2 <= max_t {
        let prev = rho_hat[t - 1] + rho_hat[t];
        if rho_hat[t + 1] + rho_hat[t + 2] > prev {
            rho_hat[t + 1] = prev / 2.0;
            rho_hat[t + 2] = prev / 2.0;
        }
        t += 2;
    }
    let total = (m * n) as f64;
    let tail = if max_t + 1 < n { rho_hat[max_t + 1] } else { 0.0 };
    let tau = -1.0 + 2.0 * rho_hat[..max_t].iter().sum::<f64>() + tail;
    total / tau.max(1.0 / total.log10())
}

/// Rank-normalized bulk effective sample size over `chains` (one vector
/// per chain, all the same length, at least 4 draws).
pub fn bulk_ess(chains: &[Vec<f64>]) -> Result<ChainStat> {
    check_chains(chains)?;
    if is_constant(chains) {
        return Ok(ChainStat::degenerate());
    }
    let z = split_chains(&rank_normalize(chains));
    if z.iter().all(|c| c.iter().all(|v| *v == c[0])) {
        return Ok(ChainStat::degenerate());
    }
    Ok(ChainStat::ok(ess_of_split(&z)))
}

/// ESS of the raw (not rank-normalized) split chains, the one that governs
/// the Monte Carlo error of a sample mean.
pub fn mean_ess(chains: &[Vec<f64>]) -> Result<ChainStat> {
    check_chains(chains)?;
    let split = split_chains(chains);
    if split.iter().all(|c| c.iter().all(|v| *v == c[0])) {
        return Ok(ChainStat::degenerate());
    }
    Ok(ChainStat::ok(ess_of_split(&split)))
}

/// Monte Carlo standard error of the pooled mean, `sd/√ESS`.
pub fn mcse_mean(chains: &[Vec<f64>]) -> Result<f64> {
    let ess = mean_ess(chains)?;
    if ess.degenerate {
        return Ok(0.0);
    }
    let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    Ok((sample_var(&pooled) / ess.value).sqrt())
}

/// Rank-normalized split-R̂, `√(((n−1)/n·W + B/n)/W)` over the `2·M`
/// half-chains of length `n`. Chains that are each constant but disagree
/// give `∞`.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<ChainStat> {
    check_chains(chains)?;
    if is_constant(chains) {
        return Ok(ChainStat::degenerate());
    }
    let z = split_chains(&rank_normalize(chains));
    let n = z[0].len() as f64;
    let (w, b_over_n) = within_between(&z);
    if w == 0.0 {
        return Ok(ChainStat::ok(f64::INFINITY));
    }
    Ok(ChainStat::ok((((n - 1.0) / n * w + b_over_n) / w).sqrt()))
}

/// Summary of one quantity across chains.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct QuantitySummary {
    pub name: String,
    #[serde(deserialize_with = "nan_from_null")]
    pub mean: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub sd: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub mcse: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub bulk_ess: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub rhat: f64,
    pub degenerate: bool,
}

/// Per-chain sampler behaviour.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChainSummary {
    pub chain: usize,
    pub draws: usize,
    #[serde(deserialize_with = "nan_from_null")]
    pub accept_rate: f64,
    #[serde(deserialize_with = "nan_from_null")]
    pub mean_accept_prob: f64,
    pub reject_counts: BTreeMap<String, usize>,
    #[serde(deserialize_with = "nan_from_null")]
    pub mean_newton_iters: f64,
    pub step_size: f64,
    pub seconds: f64,
    pub error: Option<String>,
}

/// Diagnostics for a set of chains sampling the same target.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub quantities: Vec<QuantitySummary>,
    pub chains: Vec<ChainSummary>,
    /// Minimum bulk ESS over quantities.
    #[serde(deserialize_with = "nan_from_null")]
    pub min_bulk_ess: f64,
    /// Maximum split-R̂ over quantities.
    #[serde(deserialize_with = "nan_from_null")]
    pub max_rhat: f64,
    /// Total compute time summed over chains, warm-up included.
    pub seconds: f64,
    /// `min_bulk_ess / seconds`.
    #[serde(deserialize_with = "nan_from_null")]
    pub min_ess_per_second: f64,
}

/// Identifies the run a report belongs to in CSV output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportKey {
    pub model: String,
    pub sampler: String,
    pub sigma: f64,
    pub seed_set: u64,
}

impl DiagnosticsReport {
    /// Summarizes `traces`, naming coordinate `k` of the chain state
    /// `names[k]`. Chains are truncated to the shortest one.
    pub fn from_traces(names: &[String], traces: &[ChainTrace]) -> Result<Self> {
        let n = traces.iter().map(|t| t.len()).min().unwrap_or(0);
        let mut quantities = Vec::with_capacity(names.len());
        for (k, name) in names.iter().enumerate() {
            let chains: Vec<Vec<f64>> = traces.iter().map(|t| t.column(k)[..n].to_vec()).collect();
            let ess = bulk_ess(&chains)?;
            let rhat = split_rhat(&chains)?;
            let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
            quantities.push(QuantitySummary {
                name: name.clone(),
                mean: mean(&pooled),
                sd: sample_var(&pooled).sqrt(),
                mcse: mcse_mean(&chains)?,
                bulk_ess: ess.value,
                rhat: rhat.value,
                degenerate: ess.degenerate || rhat.degenerate,
            });
        }
        let chains = traces
            .iter()
            .map(|t| ChainSummary {
                chain: t.chain,
                draws: t.len(),
                accept_rate: t.accept_rate(),
                mean_accept_prob: t.mean_accept_prob(),
                reject_counts: t.reject_counts().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
                mean_newton_iters: t.mean_newton_iters(),
                step_size: t.step_size,
                seconds: t.total_seconds(),
                error: t.error.clone(),
            })
            .collect::<Vec<_>>();
        // A degenerate quantity has no ESS; it makes the minimum zero.
        let min_bulk_ess = quantities.iter().map(|q| if q.degenerate { 0.0 } else { q.bulk_ess }).fold(f64::INFINITY, f64::min);
        let max_rhat = quantities.iter().map(|q| if q.degenerate { f64::INFINITY } else { q.rhat }).fold(f64::NEG_INFINITY, f64::max);
        let seconds: f64 = chains.iter().map(|c| c.seconds).sum();
        Ok(Self { quantities, chains, min_bulk_ess, max_rhat, seconds, min_ess_per_second: min_bulk_ess / seconds })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Header of [`DiagnosticsReport::write_csv_rows`].
    pub const CSV_HEADER: [&'static str; 11] =
        ["model", "sampler", "sigma", "seed_set", "quantity", "mean", "sd", "mcse", "bulk_ess", "rhat", "degenerate"];

    /// One row per quantity, keyed by `key`.
    pub fn write_csv_rows<W: Write>(&self, w: &mut csv::Writer<W>, key: &ReportKey) -> Result<()> {
        for q in &self.quantities {
            w.write_record([
                key.model.clone(),
                key.sampler.clone(),
                format!("{}", key.sigma),
                key.seed_set.to_string(),
                q.name.clone(),
                format!("{:e}", q.mean),
                format!("{:e}", q.sd),
                format!("{:e}", q.mcse),
                format!("{:e}", q.bulk_ess),
                format!("{:e}", q.rhat),
                q.degenerate.to_string(),
            ])?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn iid(m: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect()
    }

    fn ar1(m: usize, n: usize, rho: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = (1.0 - rho * rho).sqrt();
        (0..m)
            .map(|_| {
                let mut x: f64 = rng.sample(StandardNormal);
                (0..n)
                    .map(|_| {
                        x = rho * x + sd * rng.sample::<f64, _>(StandardNormal);
                        x
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn blom_scores_are_symmetric() {
        let z = rank_normalize(&[vec![3.0, 1.0, 2.0]]);
        assert!((z[0][0] + z[0][1]).abs() < 1e-12);
        assert_eq!(z[0][2], 0.0);
        // (1 − 3/8)/(3 + 1/4)
        let expect = Normal::new(0.0, 1.0).unwrap().inverse_cdf(0.625 / 3.25);
        assert!((z[0][1] - expect).abs() < 1e-12);
    }

    #[test]
    fn ties_share_a_rank() {
        let z = rank_normalize(&[vec![1.0, 1.0, 2.0, 0.0]]);
        assert_eq!(z[0][0], z[0][1]);
    }

    #[test]
    fn iid_normal_ess_is_near_total() {
        let ess = bulk_ess(&iid(4, 2500, 1)).unwrap();
        assert!(!ess.degenerate);
        assert!((0.8..1.2).contains(&(ess.value / 10_000.0)), "{}", ess.value);
        let r = split_rhat(&iid(4, 2500, 2)).unwrap().value;
        assert!(r < 1.01, "{r}");
    }

    #[test]
    fn ar1_ess_matches_integrated_autocorrelation() {
        let rho = 0.9;
        let expect = (1.0 - rho) / (1.0 + rho);
        let per_draw: f64 = (0..20).map(|s| bulk_ess(&ar1(4, 2500, rho, 100 + s)).unwrap().value / 10_000.0).sum::<f64>() / 20.0;
        assert!((per_draw / expect - 1.0).abs() < 0.4, "{per_draw} vs {expect}");
    }

    #[test]
    fn duplicated_chain() {
        let one = iid(1, 2000, 3);
        let four = vec![one[0].clone(); 4];
        let r = split_rhat(&four).unwrap().value;
        assert!((r - 1.0).abs() < 0.01, "{r}");
        // Each of the four copies contributes the single-chain ESS.
        let single = bulk_ess(&one).unwrap().value;
        let pooled = bulk_ess(&four).unwrap().value;
        assert!((pooled / (4.0 * single) - 1.0).abs() < 0.05, "{pooled} vs {single}");
    }

    #[test]
    fn constant_chains_are_flagged() {
        let c = vec![vec![2.5; 100]; 4];
        assert!(bulk_ess(&c).unwrap().degenerate);
        assert!(split_rhat(&c).unwrap().degenerate);
    }

    #[test]
    fn separated_chains_have_large_rhat() {
        let mut chains = iid(2, 1000, 4);
        for v in chains[1].iter_mut() {
            *v += 10.0;
        }
        assert!(split_rhat(&chains).unwrap().value > 1.5);
        let fixed = vec![vec![0.0; 100], vec![1.0; 100]];
        assert!(split_rhat(&fixed).unwrap().value > 1.5);
    }

    #[test]
    fn invariant_under_monotone_transforms_and_chain_order() {
        let chains = ar1(4, 1000, 0.5, 5);
        let ess = bulk_ess(&chains).unwrap().value;
        let rhat = split_rhat(&chains).unwrap().value;
        for f in [f64::exp as fn(f64) -> f64, |x: f64| x * x * x] {
            let t: Vec<Vec<f64>> = chains.iter().map(|c| c.iter().map(|v| f(*v)).collect()).collect();
            assert!((bulk_ess(&t).unwrap().value - ess).abs() < 1e-9 * ess);
            assert!((split_rhat(&t).unwrap().value - rhat).abs() < 1e-12);
        }
        let mut perm = chains.clone();
        perm.reverse();
        perm.swap(0, 1);
        assert!((bulk_ess(&perm).unwrap().value - ess).abs() < 1e-9 * ess);
        assert!((split_rhat(&perm).unwrap().value - rhat).abs() < 1e-12);
    }

    #[test]
    fn mcse_of_iid_mean() {
        let chains = iid(4, 2500, 6);
        let se = mcse_mean(&chains).unwrap();
        assert!((se / 0.01 - 1.0).abs() < 0.15, "{se}");
    }

    #[test]
    fn short_or_ragged_input_is_rejected() {
        assert!(bulk_ess(&[vec![1.0, 2.0, 3.0]]).is_err());
        assert!(split_rhat(&[vec![1.0; 10], vec![1.0; 9]]).is_err());
        assert!(bulk_ess(&[]).is_err());
    }
}
