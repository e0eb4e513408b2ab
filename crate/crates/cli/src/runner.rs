//! Cell construction, sampler dispatch and the worker pool.

use chmc::geometry::LiftedModel;
use chmc::model::Model;
use chmc::samplers::{
    chain_rng, run_chain, screened_prior_draw, ChainSettings, ChainTrace, Chmc, FisherMetric, Hmc, Mala, PdMala,
    PdMalaVariant, PdRwm, PosteriorTarget, Rwm, Sampler, START_SCREEN_FACTOR,
};
use chmc::ssm::StructuredSsm;
use chmc::zoo::{equispaced_loop_points, FitzHughNagumoModel, LinearGaussianModel, NonlinearSsmModel, SsmParams, ToyLoopModel};
use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, ModelId, SamplerConfig, SamplerId};
use crate::{CliError, Result};

/// Prior draws tried before a chain is declared unable to start.
pub const MAX_INIT_ATTEMPTS: usize = 100;

/// One point of an experiment grid; its chains share everything but the
/// random stream.
#[derive(Clone, Debug, Serialize)]
pub struct Cell {
    pub index: usize,
    pub sampler: SamplerConfig,
    pub sigma: f64,
    pub seed_set: usize,
    pub settings: ChainSettings,
    /// Start chains at equispaced points of the toy loop instead of prior draws.
    pub loop_start: bool,
}

/// Where a chain's randomness comes from.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct StreamId {
    pub seed: u64,
    pub stream: usize,
}

impl StreamId {
    pub fn for_chain(cfg: &ExperimentConfig, cell: usize, chain: usize) -> Self {
        match &cfg.chain_seeds {
            Some(seeds) => StreamId { seed: seeds[chain], stream: cell },
            None => StreamId { seed: cfg.seed, stream: cell * cfg.chains + chain },
        }
    }

    pub fn rng(self) -> ChaCha8Rng {
        chain_rng(self.seed, self.stream)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ChainOutcome {
    pub cell: usize,
    pub stream: StreamId,
    pub theta0: Vec<f64>,
    pub init_attempts: usize,
    pub trace: ChainTrace,
}

/// Fixed three-observation, two-parameter linear model.
pub fn linear_gaussian_model(sigma: f64) -> LinearGaussianModel {
    let a = DMatrix::from_row_slice(3, 2, &[1.0, 0.5, -0.3, 1.2, 0.7, -0.4]);
    let f = DVector::from_column_slice(&[0.1, -0.2, 0.0]);
    LinearGaussianModel::new(a, f, sigma, vec![1.0, 0.5, -0.2])
}

/// Names of the coordinates summarized by the diagnostics for `id`.
pub fn quantity_names(id: ModelId) -> Vec<String> {
    match id {
        ModelId::Toy => vec!["theta0".into(), "theta1".into()],
        ModelId::LinearGaussian => vec!["theta0".into(), "theta1".into()],
        ModelId::Ssm => SsmParams::NAMES.iter().map(|s| s.to_string()).collect(),
        ModelId::Fhn => chmc::zoo::FhnParams::NAMES.iter().map(|s| s.to_string()).collect(),
    }
}

/// Names of every recorded trace coordinate for `id`.
pub fn trace_names(cfg: &ExperimentConfig) -> Vec<String> {
    let mut names = quantity_names(cfg.model.id);
    if cfg.model.id == ModelId::Ssm {
        names.extend((0..cfg.model.t_len).map(|t| format!("nu{t}")));
    }
    names
}

/// Runs every `(cell, chain)` job on a pool of `workers` threads. Results
/// come back ordered by cell, then chain, whatever the scheduling.
pub fn run_cells(cfg: &ExperimentConfig, cells: &[Cell], workers: usize) -> Result<Vec<Vec<ChainOutcome>>> {
    let jobs: Vec<(usize, usize)> = (0..cells.len()).flat_map(|k| (0..cfg.chains).map(move |c| (k, c))).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Usage(format!("cannot build worker pool: {e}")))?;
    let results: Vec<Result<ChainOutcome>> =
        pool.install(|| jobs.par_iter().map(|&(k, c)| run_job(cfg, &cells[k], c)).collect());
    let mut out: Vec<Vec<ChainOutcome>> = cells.iter().map(|_| Vec::with_capacity(cfg.chains)).collect();
    for r in results {
        let o = r?;
        out[o.cell].push(o);
    }
    Ok(out)
}

/// Runs chain `chain` of `cell`.
pub fn run_job(cfg: &ExperimentConfig, cell: &Cell, chain: usize) -> Result<ChainOutcome> {
    let stream = StreamId::for_chain(cfg, cell.index, chain);
    let mut rng = stream.rng();
    let start = cell.loop_start.then(|| {
        let p = equispaced_loop_points(cfg.chains, 1.0)[chain];
        p.to_vec()
    });
    let sigma = cell.sigma;
    let (theta0, init_attempts, trace) = match cfg.model.id {
        ModelId::Toy => dispatch(&ToyLoopModel::new(sigma), cell, start, &mut rng)?,
        ModelId::LinearGaussian => dispatch(&linear_gaussian_model(sigma), cell, start, &mut rng)?,
        ModelId::Ssm => {
            let (m, _, _) = NonlinearSsmModel::simulate(&SsmParams::truth(sigma), cfg.model.t_len, cfg.model.data_seed);
            if cell.sampler.id == SamplerId::Chmc && cell.sampler.structured {
                let s = Chmc::new(StructuredSsm::new(&m), cell.sampler.chmc.clone());
                drive(s, &m, &cell.settings, start, &mut rng)?
            } else {
                dispatch(&m, cell, start, &mut rng)?
            }
        }
        ModelId::Fhn => {
            let (m, _) = FitzHughNagumoModel::simulate(sigma, cfg.model.data_seed)?;
            dispatch(&m, cell, start, &mut rng)?
        }
    };
    Ok(ChainOutcome { cell: cell.index, stream, theta0, init_attempts, trace: ChainTrace { chain, ..trace } })
}

type Run = (Vec<f64>, usize, ChainTrace);

fn dispatch<M: Model>(model: &M, cell: &Cell, start: Option<Vec<f64>>, rng: &mut ChaCha8Rng) -> Result<Run> {
    let sc = &cell.sampler;
    let st = &cell.settings;
    let target = PosteriorTarget(model);
    match sc.id {
        SamplerId::Chmc => drive(Chmc::new(LiftedModel::new(model), sc.chmc.clone()), model, st, start, rng),
        SamplerId::Rwm => drive(Rwm::new(target), model, st, start, rng),
        SamplerId::Mala => drive(Mala::new(target), model, st, start, rng),
        SamplerId::Hmc => {
            let mut h = Hmc::new(target, sc.n_steps, sc.metric);
            h.jitter = sc.jitter;
            drive(h, model, st, start, rng)
        }
        SamplerId::FisherRwm => drive(PdRwm::new(target, FisherMetric(model)), model, st, start, rng),
        SamplerId::PdMalaSimple => {
            drive(PdMala::new(target, FisherMetric(model), PdMalaVariant::Simple), model, st, start, rng)
        }
        SamplerId::PdMalaCorrected => {
            drive(PdMala::new(target, FisherMetric(model), PdMalaVariant::Corrected), model, st, start, rng)
        }
    }
}

/// Picks the start point and runs the chain. Prior draws go through
/// [`screened_prior_draw`] and are retried while the sampler cannot be
/// initialized there.
fn drive<S: Sampler, M: Model>(
    mut sampler: S,
    model: &M,
    settings: &ChainSettings,
    start: Option<Vec<f64>>,
    rng: &mut ChaCha8Rng,
) -> Result<Run> {
    let mut attempts = 0;
    let theta0 = loop {
        let theta = match &start {
            Some(t) => t.clone(),
            None => {
                let (t, n) = screened_prior_draw(model, START_SCREEN_FACTOR, MAX_INIT_ATTEMPTS, rng)?;
                attempts += n - 1;
                t
            }
        };
        attempts += 1;
        match sampler.init(&theta) {
            Ok(_) => break theta,
            Err(e) if start.is_some() || attempts >= MAX_INIT_ATTEMPTS => {
                return Err(CliError::Core(e));
            }
            Err(_) => {}
        }
    };
    let trace = run_chain(&mut sampler, &theta0, settings, rng)?;
    Ok((theta0, attempts, trace))
}
