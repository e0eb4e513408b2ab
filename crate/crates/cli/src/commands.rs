//! The four subcommands. Each returns its rows so tests can inspect them
//! without parsing the files back.

use std::path::{Path, PathBuf};

use chmc::diagnostics::{DiagnosticsReport, ReportKey};
use chmc::geometry::{project_momentum, ConstraintSystem, LiftedModel, ManifoldPoint};
use chmc::model::{self, validate_derivatives, Model, Scalar};
use chmc::samplers::{chain_rng, ChainSettings, ChainTrace, RejectReason};
use chmc::ssm::StructuredSsm;
use chmc::zoo::{
    constrained_dynamics_reference, equispaced_loop_points, fhn_scaling_transform, FhnParams, FitzHughNagumoModel,
    NonlinearSsmModel, SsmParams, ToyLoopModel,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::config::{ExperimentConfig, ModelId};
use crate::output::{csv_writer, format_reject_counts, unix_time, write_sidecar, Sidecar};
use crate::runner::{linear_gaussian_model, quantity_names, run_cells, trace_names, Cell, ChainOutcome};
use crate::{CliError, Result};

/// Where and how wide a run is.
#[derive(Clone, Debug)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub workers: usize,
}

#[derive(Serialize)]
struct StartPoint<'a> {
    cell: usize,
    chain: usize,
    seed: u64,
    stream: usize,
    init_attempts: usize,
    theta0: &'a [f64],
    error: &'a Option<String>,
}

fn start_points(outcomes: &[Vec<ChainOutcome>]) -> Vec<StartPoint<'_>> {
    outcomes
        .iter()
        .flatten()
        .map(|o| StartPoint {
            cell: o.cell,
            chain: o.trace.chain,
            seed: o.stream.seed,
            stream: o.stream.stream,
            init_attempts: o.init_attempts,
            theta0: &o.theta0,
            error: &o.trace.error,
        })
        .collect()
}

fn sidecar<'a, T: Serialize>(
    command: &'a str,
    cfg: &'a ExperimentConfig,
    opts: &RunOptions,
    started: f64,
    outputs: &[&Path],
    details: T,
) -> Sidecar<'a, T> {
    Sidecar {
        schema_version: crate::SCHEMA_VERSION,
        command,
        started_unix: started,
        finished_unix: unix_time(),
        workers: opts.workers,
        outputs: outputs.iter().map(|p| p.file_name().unwrap_or_default().to_string_lossy().into_owned()).collect(),
        config: cfg,
        details,
    }
}

// ---------------------------------------------------------------- heatmap

#[derive(Clone, Debug, Serialize)]
pub struct HeatmapRow {
    pub sampler: String,
    pub sigma: f64,
    pub eps: f64,
    pub mean_accept: f64,
    pub reject_counts: Vec<(&'static str, usize)>,
}

pub const HEATMAP_HEADER: [&str; 5] = ["sampler", "sigma", "eps", "mean_accept", "reject_reason_counts"];

/// Mean acceptance probability at fixed step size for every
/// `(sampler, σ, ε)` cell. Toy-model chains start at equispaced points of the
/// limiting loop, other models at prior draws.
pub fn heatmap(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<HeatmapRow>> {
    let started = unix_time();
    let mut cells = Vec::new();
    for s in &cfg.samplers {
        for &sigma in &cfg.sigmas {
            for &eps in &cfg.eps {
                cells.push(Cell {
                    index: cells.len(),
                    sampler: s.clone(),
                    sigma,
                    seed_set: 0,
                    settings: ChainSettings::fixed(eps, cfg.chain.n_main),
                    loop_start: cfg.model.id == ModelId::Toy,
                });
            }
        }
    }
    let outcomes = run_cells(cfg, &cells, opts.workers)?;
    let rows: Vec<HeatmapRow> = cells
        .iter()
        .zip(&outcomes)
        .map(|(cell, chains)| {
            let traces: Vec<&ChainTrace> = chains.iter().map(|o| &o.trace).collect();
            HeatmapRow {
                sampler: cell.sampler.label(),
                sigma: cell.sigma,
                eps: cell.settings.eps,
                mean_accept: pooled_accept(&traces),
                reject_counts: pooled_rejects(&traces),
            }
        })
        .collect();

    let (path, mut w) = csv_writer(&opts.out_dir, "heatmap.csv", &HEATMAP_HEADER)?;
    for r in &rows {
        w.write_record([
            r.sampler.clone(),
            r.sigma.to_string(),
            r.eps.to_string(),
            r.mean_accept.to_string(),
            format_reject_counts(&r.reject_counts),
        ])?;
    }
    w.flush()?;
    #[derive(Serialize)]
    struct Details<'a> {
        loop_parametrization: &'static str,
        start_points: Vec<StartPoint<'a>>,
    }
    let details = Details { loop_parametrization: "equispaced in arc length", start_points: start_points(&outcomes) };
    write_sidecar(&opts.out_dir, "heatmap.json", &sidecar("heatmap", cfg, opts, started, &[&path], details))?;
    Ok(rows)
}

fn pooled_accept(traces: &[&ChainTrace]) -> f64 {
    let (sum, n) = traces
        .iter()
        .flat_map(|t| &t.draws)
        .fold((0.0, 0usize), |(s, n), d| (s + d.stats.accept_prob, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn pooled_rejects(traces: &[&ChainTrace]) -> Vec<(&'static str, usize)> {
    RejectReason::ALL
        .iter()
        .map(|r| {
            let n = traces.iter().flat_map(|t| &t.draws).filter(|d| d.stats.reject_reason == Some(*r)).count();
            (r.as_str(), n)
        })
        .collect()
}

// ---------------------------------------------------------------- ess-sweep

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub model: String,
    pub sampler: String,
    pub sigma: f64,
    pub seed_set: usize,
    pub min_bulk_ess: f64,
    pub max_rhat: f64,
    /// Mean over chains of the adapted step size.
    pub step_size: f64,
    /// Draws per chain entering the diagnostics.
    pub n_draws: usize,
    pub failed_chains: usize,
    /// Compute time summed over chains, warm-up included.
    pub seconds: f64,
    pub min_ess_per_second: f64,
}

pub const SWEEP_HEADER: [&str; 9] =
    ["model", "sampler", "sigma", "seed_set", "min_bulk_ess", "max_rhat", "step_size", "n_draws", "failed_chains"];
pub const TIMING_HEADER: [&str; 6] = ["model", "sampler", "sigma", "seed_set", "seconds", "min_ess_per_second"];

/// Diagnostics of one cell's chains over `names`; chains that stopped early
/// are truncated to the shortest one. `None` when fewer than four draws remain.
pub fn summarize(names: &[String], chains: &[ChainOutcome]) -> Result<Option<DiagnosticsReport>> {
    let n = chains.iter().map(|o| o.trace.draws.len()).min().unwrap_or(0);
    if n < 4 {
        return Ok(None);
    }
    let traces: Vec<ChainTrace> = chains
        .iter()
        .map(|o| {
            let mut t = o.trace.clone();
            t.draws.truncate(n);
            t
        })
        .collect();
    Ok(Some(DiagnosticsReport::from_traces(names, &traces)?))
}

/// Fully adapted runs for every `(sampler, σ, seed set)`: minimum bulk ESS
/// and maximum split-R̂ over the model's parameters. Wall-clock figures go to a
/// separate timing file so that `ess_sweep.csv` is reproducible byte for byte.
pub fn ess_sweep(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Vec<SweepRow>> {
    let started = unix_time();
    let mut cells = Vec::new();
    for s in &cfg.samplers {
        for &sigma in &cfg.sigmas {
            for seed_set in 0..cfg.seed_sets {
                cells.push(Cell {
                    index: cells.len(),
                    sampler: s.clone(),
                    sigma,
                    seed_set,
                    settings: cfg.chain.clone(),
                    loop_start: false,
                });
            }
        }
    }
    let outcomes = run_cells(cfg, &cells, opts.workers)?;
    let names = quantity_names(cfg.model.id);
    let mut rows = Vec::new();
    for (cell, chains) in cells.iter().zip(&outcomes) {
        let report = summarize(&names, chains)?;
        let seconds: f64 = chains.iter().map(|o| o.trace.total_seconds()).sum();
        let (min_ess, max_rhat) = report.as_ref().map_or((f64::NAN, f64::NAN), |r| (r.min_bulk_ess, r.max_rhat));
        rows.push(SweepRow {
            model: cfg.model.id.as_str().into(),
            sampler: cell.sampler.label(),
            sigma: cell.sigma,
            seed_set: cell.seed_set,
            min_bulk_ess: min_ess,
            max_rhat,
            step_size: chains.iter().map(|o| o.trace.step_size).sum::<f64>() / chains.len() as f64,
            n_draws: chains.iter().map(|o| o.trace.draws.len()).min().unwrap_or(0),
            failed_chains: chains.iter().filter(|o| o.trace.error.is_some()).count(),
            seconds,
            min_ess_per_second: min_ess / seconds,
        });
    }

    let (path, mut w) = csv_writer(&opts.out_dir, "ess_sweep.csv", &SWEEP_HEADER)?;
    for r in &rows {
        w.write_record([
            r.model.clone(),
            r.sampler.clone(),
            r.sigma.to_string(),
            r.seed_set.to_string(),
            r.min_bulk_ess.to_string(),
            r.max_rhat.to_string(),
            r.step_size.to_string(),
            r.n_draws.to_string(),
            r.failed_chains.to_string(),
        ])?;
    }
    w.flush()?;
    let (timing, mut w) = csv_writer(&opts.out_dir, "ess_sweep_timing.csv", &TIMING_HEADER)?;
    for r in &rows {
        w.write_record([
            r.model.clone(),
            r.sampler.clone(),
            r.sigma.to_string(),
            r.seed_set.to_string(),
            r.seconds.to_string(),
            r.min_ess_per_second.to_string(),
        ])?;
    }
    w.flush()?;
    #[derive(Serialize)]
    struct Details<'a> {
        rows: &'a [SweepRow],
        start_points: Vec<StartPoint<'a>>,
    }
    let details = Details { rows: &rows, start_points: start_points(&outcomes) };
    write_sidecar(&opts.out_dir, "ess_sweep.json", &sidecar("ess-sweep", cfg, opts, started, &[&path, &timing], details))?;
    Ok(rows)
}

// ---------------------------------------------------------------- sample

/// One adapted run of the first configured sampler at the first σ: every
/// draw, the per-quantity diagnostics and a sidecar.
pub fn sample(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<DiagnosticsReport> {
    let started = unix_time();
    let sampler = &cfg.samplers[0];
    let sigma = cfg.sigmas[0];
    let cell = Cell { index: 0, sampler: sampler.clone(), sigma, seed_set: 0, settings: cfg.chain.clone(), loop_start: false };
    let outcomes = run_cells(cfg, std::slice::from_ref(&cell), opts.workers)?;
    let chains = &outcomes[0];

    let names = trace_names(cfg);
    let mut header: Vec<&str> = vec!["chain", "draw"];
    header.extend(names.iter().map(String::as_str));
    header.extend(["accept_prob", "accepted", "reject_reason", "energy_error", "newton_iters", "n_steps"]);
    let (draws_path, mut w) = csv_writer(&opts.out_dir, "draws.csv", &header)?;
    for o in chains {
        for (i, d) in o.trace.draws.iter().enumerate() {
            let mut rec = vec![o.trace.chain.to_string(), i.to_string()];
            rec.extend(d.theta.iter().map(|v| v.to_string()));
            rec.push(d.stats.accept_prob.to_string());
            rec.push(d.stats.accepted.to_string());
            rec.push(d.stats.reject_reason.map_or("", |r| r.as_str()).to_string());
            rec.push(d.stats.energy_error.to_string());
            rec.push(d.stats.newton_iters.to_string());
            rec.push(d.stats.n_steps.to_string());
            w.write_record(&rec)?;
        }
    }
    w.flush()?;

    let report = summarize(&names, chains)?
        .ok_or_else(|| CliError::Validation("fewer than four draws per chain; nothing to summarize".into()))?;
    let (diag_path, mut w) = csv_writer(&opts.out_dir, "diagnostics.csv", &DiagnosticsReport::CSV_HEADER)?;
    let key = ReportKey { model: cfg.model.id.as_str().into(), sampler: sampler.label(), sigma, seed_set: 0 };
    report.write_csv_rows(&mut w, &key)?;
    w.flush()?;
    #[derive(Serialize)]
    struct Details<'a> {
        report: &'a DiagnosticsReport,
        start_points: Vec<StartPoint<'a>>,
    }
    let details = Details { report: &report, start_points: start_points(&outcomes) };
    write_sidecar(
        &opts.out_dir,
        "sample.json",
        &sidecar("sample", cfg, opts, started, &[&draws_path, &diag_path], details),
    )?;
    Ok(report)
}

// ---------------------------------------------------------------- validate

/// Deliberate defects for exercising the validator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Perturb the analytic Jacobian by 1e-3 in one entry.
    Jacobian,
}

impl Fault {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "jacobian" => Ok(Fault::Jacobian),
            _ => Err(CliError::Usage(format!("unknown fault {s:?}"))),
        }
    }
}

/// A model whose analytic Jacobian is wrong.
pub struct CorruptedJacobian<M>(pub M);

impl<M: Model> Model for CorruptedJacobian<M> {
    fn dim_theta(&self) -> usize {
        self.0.dim_theta()
    }
    fn dim_y(&self) -> usize {
        self.0.dim_y()
    }
    fn observed(&self) -> &[f64] {
        self.0.observed()
    }
    fn forward<S: Scalar>(&self, theta: &[S]) -> Vec<S> {
        self.0.forward(theta)
    }
    fn noise_scale<S: Scalar>(&self, theta: &[S]) -> S {
        self.0.noise_scale(theta)
    }
    fn prior_potential_theta<S: Scalar>(&self, theta: &[S]) -> S {
        self.0.prior_potential_theta(theta)
    }
    fn prior_potential_eta<S: Scalar>(&self, eta: &[S]) -> S {
        self.0.prior_potential_eta(eta)
    }
    fn constant_noise(&self) -> bool {
        self.0.constant_noise()
    }
    fn analytic_jacobian(&self, theta: &[f64]) -> Option<DMatrix<f64>> {
        let mut j = model::jacobian_forward(&self.0, theta).ok()?;
        let scale = j.amax().max(1.0);
        j[(0, 0)] += 1e-3 * scale;
        Some(j)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckRow {
    pub model: String,
    pub point: String,
    pub check: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub const VALIDATE_HEADER: [&str; 6] = ["model", "point", "check", "value", "tolerance", "passed"];

/// Relative tolerance of the derivative comparisons.
pub const DERIVATIVE_TOL: f64 = 1e-6;

struct Checks {
    model: String,
    rows: Vec<CheckRow>,
}

impl Checks {
    fn push(&mut self, point: &str, check: &str, value: f64, tolerance: f64) {
        self.rows.push(CheckRow {
            model: self.model.clone(),
            point: point.into(),
            check: check.into(),
            value,
            tolerance,
            // NaN fails.
            passed: value <= tolerance,
        });
    }

    fn derivatives<M: Model>(&mut self, model: &M, points: &[(String, Vec<f64>)]) -> Result<()> {
        for (label, theta) in points {
            let report = validate_derivatives(model, theta, DERIVATIVE_TOL)?;
            for c in report.checks {
                self.push(label, &c.name, c.discrepancy, c.tolerance);
            }
            let system = LiftedModel::new(model);
            let q = system.lift(theta)?;
            let (c, _) = system.residual_and_jacobian(&q)?;
            self.push(label, "lift residual", c.amax(), 1e-9);
        }
        Ok(())
    }
}

fn with_prior_points<M: Model>(model: &M, first: (&str, Vec<f64>), seed: u64) -> Vec<(String, Vec<f64>)> {
    let mut rng = chain_rng(seed, 0);
    let mut pts = vec![(first.0.to_string(), first.1)];
    pts.extend((0..2).map(|k| (format!("prior{k}"), model.sample_prior(&mut rng))));
    pts
}

/// Derivative checks at a reference point and two prior draws, the lift
/// residual, and one model-specific oracle. Returns every row; the caller
/// decides the exit status from `passed`.
pub fn validate(id: ModelId, fault: Option<Fault>, seed: u64) -> Result<Vec<CheckRow>> {
    let mut ck = Checks { model: id.as_str().into(), rows: Vec::new() };
    macro_rules! derivs {
        ($m:expr, $pts:expr) => {
            match fault {
                Some(Fault::Jacobian) => ck.derivatives(&CorruptedJacobian(&$m), &$pts)?,
                None => ck.derivatives(&$m, &$pts)?,
            }
        };
    }
    match id {
        ModelId::Toy => {
            let m = ToyLoopModel::new(0.1);
            let pts = with_prior_points(&m, ("reference", vec![0.3, -0.7]), seed);
            derivs!(m, pts);
            let worst = equispaced_loop_points(8, 1.0)
                .iter()
                .map(|p| model::evaluate_forward(&m, p).map(|f| (f[0] - 1.0).abs()))
                .collect::<chmc::Result<Vec<f64>>>()?
                .into_iter()
                .fold(0.0, f64::max);
            ck.push("loop", "loop points satisfy F(θ) = y", worst, 1e-10);
        }
        ModelId::LinearGaussian => {
            let m = linear_gaussian_model(0.5);
            let pts = with_prior_points(&m, ("reference", vec![0.2, -0.1]), seed);
            derivs!(m, pts);
            let system = LiftedModel::new(&m);
            let q0 = system.lift(&[0.8, -0.6])?;
            let point = ManifoldPoint::new(&system, q0.clone())?;
            let mut rng = chain_rng(seed, 1);
            let raw = DVector::from_fn(q0.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let p0 = project_momentum(&raw, &point.jacobian)?;
            let traj = constrained_dynamics_reference(&m, q0.as_slice(), p0.as_slice(), 1.0, 0.01)?;
            ck.push("trajectory", "constrained leapfrog vs harmonic solution", traj.max_error(), 1e-3);
        }
        ModelId::Ssm => {
            let (m, sim, _) = NonlinearSsmModel::simulate(&SsmParams::truth(0.1), 8, seed);
            let truth = NonlinearSsmModel::theta_of(&sim);
            let pts = with_prior_points(&m, ("truth", truth.clone()), seed);
            derivs!(m, pts);
            let dense = LiftedModel::new(&m);
            let structured = StructuredSsm::new(&m);
            for (label, theta) in &pts {
                let q = dense.lift(theta)?;
                let (_, jd) = dense.residual_and_jacobian(&q)?;
                let (_, js) = structured.residual_and_jacobian(&q)?;
                let (ud, us) = (dense.potential(&q, &jd)?, structured.potential(&q, &js)?);
                ck.push(label, "structured vs dense potential", (ud - us).abs() / ud.abs().max(1.0), 1e-8);
            }
        }
        ModelId::Fhn => {
            let (m, _) = FitzHughNagumoModel::simulate(0.1, seed)?;
            let truth = FhnParams::truth(0.1);
            let pts = with_prior_points(&m, ("truth", truth.to_unconstrained()), seed);
            derivs!(m, pts);
            let base = m.log_likelihood(&truth)?;
            let scaled = m.log_likelihood(&fhn_scaling_transform(&truth, 2.5))?;
            ck.push("truth", "likelihood invariant under x1 rescaling", (base - scaled).abs() / base.abs().max(1.0), 1e-9);
        }
    }
    Ok(ck.rows)
}

/// Runs [`validate`] for every requested model, writes `validate.csv` and a
/// sidecar, and fails when any check did.
pub fn validate_command(
    cfg: &ExperimentConfig,
    ids: &[ModelId],
    fault: Option<Fault>,
    opts: &RunOptions,
) -> Result<Vec<CheckRow>> {
    let started = unix_time();
    let mut rows = Vec::new();
    for &id in ids {
        rows.extend(validate(id, fault, cfg.seed)?);
    }
    let (path, mut w) = csv_writer(&opts.out_dir, "validate.csv", &VALIDATE_HEADER)?;
    for r in &rows {
        w.write_record([
            r.model.clone(),
            r.point.clone(),
            r.check.clone(),
            format!("{:e}", r.value),
            format!("{:e}", r.tolerance),
            r.passed.to_string(),
        ])?;
    }
    w.flush()?;
    write_sidecar(&opts.out_dir, "validate.json", &sidecar("validate", cfg, opts, started, &[&path], &rows))?;
    let failed: Vec<String> =
        rows.iter().filter(|r| !r.passed).map(|r| format!("{} [{}] {}: {:e} > {:e}", r.model, r.point, r.check, r.value, r.tolerance)).collect();
    if failed.is_empty() {
        Ok(rows)
    } else {
        Err(CliError::Validation(failed.join("; ")))
    }
}
