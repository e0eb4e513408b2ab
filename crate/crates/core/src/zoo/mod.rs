//! Example models: the toy loop, linear-Gaussian, FitzHugh–Nagumo and a
//! nonlinear state-space model.

mod dataset;
mod fhn;
mod linear_gaussian;
mod ssm;
mod toy;

pub use dataset::Dataset;
pub use fhn::{
    fhn_observation_times, fhn_scaling_transform, fhn_simulate, fhn_trajectory, FhnParams, FitzHughNagumoModel, FHN_HORIZON,
    FHN_OBSERVATIONS, FHN_SUBSTEPS,
};
pub use linear_gaussian::{constrained_dynamics_reference, linear_gaussian_posterior, LinearGaussianModel, ReferenceTrajectory};
pub use ssm::{ssm_prior_potential, ssm_states, NonlinearSsmModel, SsmParams, SsmSimulation, SSM_PARAMS};
pub use toy::{equispaced_loop_points, loop_point, ToyLoopModel};
