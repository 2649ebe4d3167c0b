//! Closed-loop Monte Carlo simulation and empirical gain statistics.
//!
//! The ground truth is a kernel-form plant stepped forward with realized
//! inputs and disturbances; the controller sees only forecasts and noisy
//! window measurements. Rollouts accumulate the truncated gain
//! Gamma_T = sqrt(sum ||y||^2 / sum ||d||^2), whose empirical distribution
//! over seeded cohorts is compared against the certified probability bound.

use thiserror::Error;

pub mod kernel;
pub mod metrics;
pub mod mixture;
pub mod rollout;

pub use kernel::{step_plant, KernelError, KernelModel, KernelPlant};
pub use metrics::{
    artifact_stem, bound_curve, cdf_standard_error, check_bound, export_cdf, export_record,
    gamma_cdf, inner_test, outer_test, BoundCheck, InnerVerdict,
};
pub use mixture::{sample_mixture, MixtureComponent, MixtureSpec, COV_TOL};
pub use rollout::{
    generate_open_loop_set, run_campaign, run_closed_loop, GenerateOptions, MeanProgram,
    NoiseMixtures, OnlineController, RolloutOptions, RolloutRecord, RolloutStatus, StepTrace,
    OVERFLOW_CAP,
};

#[derive(Debug, Error)]
pub enum SimulatorError {
    #[error("kernel model: {0}")]
    Kernel(#[from] KernelError),
    #[error("behavior: {0}")]
    Behavior(#[from] crate::behavior::BehaviorError),
    #[error("estimator: {0}")]
    Estimator(#[from] crate::estimator::EstimatorError),
    #[error("synthesis: {0}")]
    Synthesis(#[from] crate::synthesis::SynthesisError),
    #[error("numerics: {0}")]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error("mixture: {0}")]
    Mixture(String),
    #[error("no rollout reaches the requested horizon with disturbance energy")]
    EmptyCohort,
    #[error("trajectory failed persistent excitation of order {order} after {attempts} attempts")]
    NotExciting { order: usize, attempts: usize },
    #[error("shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
