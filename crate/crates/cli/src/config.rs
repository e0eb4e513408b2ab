//! Experiment configuration, read from TOML.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use chmc::samplers::{ChainSettings, ChmcConfig, MetricKind};
use serde::{Deserialize, Serialize};

use crate::CliError;

/// The only configuration layout this build understands.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelId {
    Toy,
    LinearGaussian,
    Ssm,
    Fhn,
}

impl ModelId {
    pub const ALL: [ModelId; 4] = [ModelId::Toy, ModelId::LinearGaussian, ModelId::Ssm, ModelId::Fhn];

    pub fn as_str(self) -> &'static str {
        match self {
            ModelId::Toy => "toy",
            ModelId::LinearGaussian => "linear_gaussian",
            ModelId::Ssm => "ssm",
            ModelId::Fhn => "fhn",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CliError> {
        Self::ALL.into_iter().find(|m| m.as_str() == s).ok_or_else(|| {
            let known: Vec<&str> = Self::ALL.iter().map(|m| m.as_str()).collect();
            CliError::Usage(format!("unknown model id {s:?}; expected one of {}", known.join(", ")))
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub id: ModelId,
    /// Number of time steps of the state-space model.
    pub t_len: usize,
    /// Seed of the simulated dataset (state-space and ODE models).
    pub data_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { id: ModelId::Toy, t_len: 100, data_seed: 42 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerId {
    Chmc,
    Rwm,
    Mala,
    Hmc,
    FisherRwm,
    PdMalaSimple,
    PdMalaCorrected,
}

impl SamplerId {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerId::Chmc => "chmc",
            SamplerId::Rwm => "rwm",
            SamplerId::Mala => "mala",
            SamplerId::Hmc => "hmc",
            SamplerId::FisherRwm => "fisher_rwm",
            SamplerId::PdMalaSimple => "pd_mala_simple",
            SamplerId::PdMalaCorrected => "pd_mala_corrected",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub id: SamplerId,
    /// Label used in output rows; defaults to the sampler id.
    pub label: Option<String>,
    /// Leapfrog steps for `hmc`.
    pub n_steps: usize,
    /// Draw the number of leapfrog steps uniformly from `1..=n_steps`.
    pub jitter: bool,
    /// Adapted metric for `hmc`.
    pub metric: MetricKind,
    /// Use the O(T) structured constraint for the state-space model.
    pub structured: bool,
    pub chmc: ChmcConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            id: SamplerId::Chmc,
            label: None,
            n_steps: 10,
            jitter: false,
            metric: MetricKind::Diagonal,
            structured: true,
            chmc: ChmcConfig::default(),
        }
    }
}

impl SamplerConfig {
    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.id.as_str().to_string())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    pub samplers: Vec<SamplerConfig>,
    /// Noise scales: fixed for the toy and linear models, the simulation
    /// truth for the others.
    pub sigmas: Vec<f64>,
    /// Step sizes of the heatmap grid.
    pub eps: Vec<f64>,
    pub chains: usize,
    /// Independent repetitions of each `(sampler, σ)` cell in `ess-sweep`.
    pub seed_sets: usize,
    pub seed: u64,
    /// Explicit per-chain seeds; must be distinct. When absent, chain `c` of
    /// cell `k` uses stream `k·chains + c` of `seed`.
    pub chain_seeds: Option<Vec<u64>>,
    pub chain: ChainSettings,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model: ModelConfig::default(),
            samplers: vec![SamplerConfig::default()],
            sigmas: vec![0.1],
            eps: vec![0.1],
            chains: 4,
            seed_sets: 3,
            seed: 20190722,
            chain_seeds: None,
            chain: ChainSettings { n_warmup: 500, n_main: 1000, ..Default::default() },
            out_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.samplers.is_empty() || self.sigmas.is_empty() || self.eps.is_empty() {
            return bad("samplers, sigmas and eps must all be non-empty".into());
        }
        if self.sigmas.iter().chain(&self.eps).any(|v| !(*v > 0.0 && v.is_finite())) {
            return bad("sigmas and eps must be positive and finite".into());
        }
        if self.chains == 0 || self.seed_sets == 0 {
            return bad("chains and seed_sets must be at least 1".into());
        }
        if self.model.id == ModelId::Ssm && self.model.t_len < 2 {
            return bad("model.t_len must be at least 2".into());
        }
        if let Some(seeds) = &self.chain_seeds {
            if seeds.len() != self.chains {
                return bad(format!("chain_seeds has {} entries for {} chains", seeds.len(), self.chains));
            }
            if seeds.iter().collect::<HashSet<_>>().len() != seeds.len() {
                return bad("chain_seeds must be distinct".into());
            }
        }
        for s in &self.samplers {
            s.chmc.validate().map_err(|e| CliError::Config(format!("sampler {}: {e}", s.label())))?;
            if s.n_steps == 0 {
                return bad(format!("sampler {}: n_steps must be at least 1", s.label()));
            }
        }
        let labels: HashSet<String> = self.samplers.iter().map(SamplerConfig::label).collect();
        if labels.len() != self.samplers.len() {
            return bad("sampler labels must be distinct".into());
        }
        if !(self.chain.target_accept > 0.0 && self.chain.target_accept < 1.0) || !(self.chain.eps > 0.0) {
            return bad("chain.target_accept must lie in (0, 1) and chain.eps be positive".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = ExperimentConfig::from_toml("schema_version = 1\n").unwrap();
        assert_eq!(cfg.chains, 4);
        assert_eq!(cfg.model.id, ModelId::Toy);
    }

    #[test]
    fn nested_tables_parse() {
        let cfg = ExperimentConfig::from_toml(
            r#"
            schema_version = 1
            sigmas = [1.0, 0.1]
            [model]
            id = "ssm"
            t_len = 20
            [chain]
            n_warmup = 10
            n_main = 20
            [[samplers]]
            id = "chmc"
            [samplers.chmc]
            solver = "symmetric_newton"
            [[samplers]]
            id = "hmc"
            metric = "dense"
            "#,
        )
        .unwrap();
        assert_eq!(cfg.samplers.len(), 2);
        assert_eq!(cfg.samplers[1].metric, MetricKind::Dense);
        assert_eq!(cfg.chain.n_main, 20);
    }

    #[test]
    fn invariants_are_enforced() {
        for text in [
            "schema_version = 2",
            "schema_version = 1\nsigmas = []",
            "schema_version = 1\neps = [0.0]",
            "schema_version = 1\nchains = 2\nchain_seeds = [1, 1]",
            "schema_version = 1\nchains = 3\nchain_seeds = [1, 2]",
            "schema_version = 1\nunknown_key = 3",
            "schema_version = 1\n[[samplers]]\nid = \"chmc\"\n[samplers.chmc]\nrho = -1.0",
        ] {
            assert!(ExperimentConfig::from_toml(text).is_err(), "{text}");
        }
    }
}
