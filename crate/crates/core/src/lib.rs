//! Data-driven synthesis of output-feedback controllers with probabilistic
//! finite-gain guarantees for stochastic linear systems.
//!
//! The pipeline, end to end:
//!
//! 1. [`behavior`]: learn an orthonormal basis of the plant's finite-horizon
//!    behavior from noisy trajectories (or build it exactly from a kernel
//!    model).
//! 2. [`paramdyn`]: turn the basis into an explicit window recursion driven
//!    by the disturbance and a free input-selection variable.
//! 3. [`estimator`]: a minimum-variance window filter and its steady-state
//!    covariance equation.
//! 4. [`sdp`]: a small dense semidefinite-program solver for the synthesis
//!    matrix inequalities.
//! 5. [`synthesis`]: builds and solves those inequalities, producing
//!    controllers with certified probabilistic gain bounds.
//! 6. [`simulator`]: closed-loop Monte Carlo rollouts that check the
//!    certified bounds against empirical gain distributions.
//!
//! Everything is deterministic given explicit seeds; no global RNG state.

pub mod behavior;
pub mod estimator;
pub mod numerics;
pub mod paramdyn;
pub mod sdp;
pub mod simulator;
pub mod synthesis;
