//! Constrained Hamiltonian Monte Carlo on manifold-lifted posteriors.

pub mod diagnostics;
pub mod error;
pub mod geometry;
pub mod integrators;
pub mod model;
pub mod samplers;
pub mod ssm;
pub mod zoo;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/lifted-manifold.md")]
    struct LiftedManifold;
    #[doc = include_str!("../../../book/src/constrained-step.md")]
    struct ConstrainedStep;
    #[doc = include_str!("../../../book/src/running-chains.md")]
    struct RunningChains;
    #[doc = include_str!("../../../book/src/state-space.md")]
    struct StateSpace;
    #[doc = include_str!("../../../book/src/diagnostics.md")]
    struct Diagnostics;
    #[doc = include_str!("../../../book/src/cli.md")]
    struct Cli;
}

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
struct Readme;
