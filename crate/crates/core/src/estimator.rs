//! Optimal filtering of the window parameter and its steady-state limit.
//!
//! The parameter estimate evolves in two phases per step. Prediction pushes
//! the posterior through the parameterizer transition,
//!
//! ```text
//! g_prior = F_p g_post + F_f E[d_k] + F_z z_hat
//! ```
//!
//! and the applied input is read off the prior, `u_bar = Pi_u F g_prior`.
//! Because the realized disturbance and input differ from their predictions
//! by zero-mean terms, the prior error obeys
//!
//! ```text
//! e_prior = E_p e_post + E_f (d - E[d]) + E_u (u - u_bar)
//! ```
//!
//! so the prior covariance is `P_prior = E_p P E_p' + E_f S_d E_f' + E_u S_u
//! E_u'`. Measuring the new step `w_k^m = Pi_f F g_k + n_k` with noise
//! covariance `S_n` yields the minimum-variance correction
//!
//! ```text
//! K = P_prior C' (C P_prior C' + S_n)^{-1}        C = Pi_f F
//! P_post = (I - K C) P_prior
//! ```
//!
//! Iterating prediction and correction drives the covariance to the unique
//! fixed point of the Riccati equation
//!
//! ```text
//! P = E_p P E_p' - N + Q
//! Q = E_f S_d E_f' + E_u S_u E_u'
//! N = (A P E_p' + T)' (A P A' + R)^{-1} (A P E_p' + T)
//! A = C E_p      R = C Q C' + S_n      T = C Q
//! ```
//!
//! whose solution gives the steady-state gain used for synthesis.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::behavior::{BehaviorBasis, SignalLayout};
use crate::numerics::{self, NumericsError, SymMatrix};
use crate::paramdyn::ParamDynamics;

/// Default relative tolerance for the Riccati fixed-point iteration.
pub const ARE_TOL: f64 = 1e-10;
/// Default iteration cap for the Riccati fixed-point iteration.
pub const ARE_MAX_ITER: usize = 10_000;
/// Allowed numerical excess of trace(P_post) over trace(P_prior).
pub const TRACE_SLACK: f64 = 1e-9;
/// Ridge added to a singular measurement-noise covariance.
pub const SN_RIDGE: f64 = 1e-10;

/// Errors from filter updates and the steady-state solve.
#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(
        "innovation covariance is numerically singular; regularize the measurement noise S_n"
    )]
    SingularInnovation(#[source] NumericsError),
    #[error("Riccati iteration did not converge in {iterations} steps (last residual {residual:.3e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("covariance update increased the trace by {delta:.3e}")]
    TraceIncrease { delta: f64 },
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    ParamDyn(#[from] crate::paramdyn::ParamDynError),
    #[error("failed to write report: {0}")]
    Io(#[from] std::io::Error),
}

/// Disturbance, input-implementation, and measurement noise covariances.
#[derive(Debug, Clone)]
pub struct NoiseModel {
    s_d: SymMatrix,
    s_u: SymMatrix,
    s_n: SymMatrix,
    regularized: bool,
}

impl NoiseModel {
    /// Validates PSD-ness of all three covariances. A singular `s_n` is
    /// regularized by adding `SN_RIDGE * I`, recorded in [`Self::regularized`].
    pub fn new(s_d: SymMatrix, s_u: SymMatrix, s_n: SymMatrix) -> Result<Self, EstimatorError> {
        for (name, s) in [("S_d", &s_d), ("S_u", &s_u), ("S_n", &s_n)] {
            let min = s.min_eig();
            if min < -numerics::CLAMP_TOL {
                return Err(EstimatorError::Shape(format!(
                    "{name} is not positive semidefinite (min eigenvalue {min:.3e})"
                )));
            }
        }
        let mut regularized = false;
        let s_n = if s_n.min_eig() <= 0.0 {
            regularized = true;
            let dim = s_n.dim();
            SymMatrix::from_average(&(s_n.mat() + DMatrix::identity(dim, dim) * SN_RIDGE))
        } else {
            s_n
        };
        Ok(NoiseModel { s_d, s_u, s_n, regularized })
    }

    pub fn s_d(&self) -> &SymMatrix {
        &self.s_d
    }

    pub fn s_u(&self) -> &SymMatrix {
        &self.s_u
    }

    pub fn s_n(&self) -> &SymMatrix {
        &self.s_n
    }

    /// True when the supplied S_n was singular and a ridge was added.
    pub fn regularized(&self) -> bool {
        self.regularized
    }

    /// Checks the covariance dimensions against a signal layout.
    pub fn validate_layout(&self, layout: &SignalLayout) -> Result<(), EstimatorError> {
        if self.s_d.dim() != layout.q || self.s_u.dim() != layout.m || self.s_n.dim() != layout.w_dim()
        {
            return Err(EstimatorError::Shape(format!(
                "noise dimensions ({}, {}, {}) do not match layout ({}, {}, {})",
                self.s_d.dim(),
                self.s_u.dim(),
                self.s_n.dim(),
                layout.q,
                layout.m,
                layout.w_dim()
            )));
        }
        Ok(())
    }
}

/// Posterior estimate and covariance after the update at step `k`.
#[derive(Debug, Clone)]
pub struct FilterState {
    g_hat: DVector<f64>,
    p_post: SymMatrix,
    k: usize,
}

impl FilterState {
    pub fn new(g_hat: DVector<f64>, p_post: SymMatrix, k: usize) -> Result<Self, EstimatorError> {
        if g_hat.len() != p_post.dim() {
            return Err(EstimatorError::Shape(format!(
                "estimate length {} does not match covariance dimension {}",
                g_hat.len(),
                p_post.dim()
            )));
        }
        let min = p_post.min_eig();
        if min < -numerics::CLAMP_TOL {
            return Err(EstimatorError::Shape(format!(
                "posterior covariance is not PSD (min eigenvalue {min:.3e})"
            )));
        }
        Ok(FilterState { g_hat, p_post, k })
    }

    pub fn g_hat(&self) -> &DVector<f64> {
        &self.g_hat
    }

    pub fn p_post(&self) -> &SymMatrix {
        &self.p_post
    }

    pub fn k(&self) -> usize {
        self.k
    }
}

/// Prior estimate g_prior = F_p g_post + F_f d_mean + F_z z_hat.
pub fn predict(
    dynamics: &ParamDynamics,
    state: &FilterState,
    d_mean: &DVector<f64>,
    z_hat: &DVector<f64>,
) -> Result<DVector<f64>, EstimatorError> {
    Ok(dynamics.step(state.g_hat(), d_mean, z_hat)?)
}

/// Input read off the prior estimate, u_bar = Pi_u F g_prior.
pub fn control_from_prior(basis: &BehaviorBasis, g_prior: &DVector<f64>) -> DVector<f64> {
    assert_eq!(g_prior.len(), basis.g_dim(), "prior estimate has wrong length");
    basis.input_rows() * g_prior
}

/// Prior covariance P_prior = E_p P E_p' + E_f S_d E_f' + E_u S_u E_u'.
pub fn covariance_predict(
    dynamics: &ParamDynamics,
    p_post: &SymMatrix,
    noise: &NoiseModel,
) -> Result<SymMatrix, EstimatorError> {
    let layout = dynamics.basis().layout();
    noise.validate_layout(layout)?;
    if p_post.dim() != layout.g_dim() {
        return Err(EstimatorError::Shape(format!(
            "posterior covariance dimension {} does not match g_dim {}",
            p_post.dim(),
            layout.g_dim()
        )));
    }
    let propagated = dynamics.e_p() * p_post.mat() * dynamics.e_p().transpose()
        + dynamics.e_f() * noise.s_d().mat() * dynamics.e_f().transpose()
        + dynamics.e_u() * noise.s_u().mat() * dynamics.e_u().transpose();
    Ok(SymMatrix::from_average(&propagated))
}

/// One-step noise covariance Q = E_f S_d E_f' + E_u S_u E_u'.
pub fn process_covariance(dynamics: &ParamDynamics, noise: &NoiseModel) -> SymMatrix {
    let q = dynamics.e_f() * noise.s_d().mat() * dynamics.e_f().transpose()
        + dynamics.e_u() * noise.s_u().mat() * dynamics.e_u().transpose();
    SymMatrix::from_average(&q)
}

/// Coefficient-level gain and posterior covariance for measurement map `c`:
/// K = P c' (c P c' + S_n)^{-1}, P_post = (I - K c) P.
pub fn innovation_gain(
    c: &DMatrix<f64>,
    p_prior: &SymMatrix,
    s_n: &SymMatrix,
) -> Result<(DMatrix<f64>, SymMatrix), EstimatorError> {
    if c.ncols() != p_prior.dim() || c.nrows() != s_n.dim() {
        return Err(EstimatorError::Shape(format!(
            "measurement map {}x{} incompatible with P ({}) and S_n ({})",
            c.nrows(),
            c.ncols(),
            p_prior.dim(),
            s_n.dim()
        )));
    }
    let cp = c * p_prior.mat();
    let innovation = SymMatrix::from_average(&(&cp * c.transpose() + s_n.mat()));
    let inv = numerics::invert_spd(&innovation, numerics::COND_MAX)
        .map_err(EstimatorError::SingularInnovation)?;
    let gain = cp.transpose() * inv.mat();
    let p_post =
        SymMatrix::from_average(&(p_prior.mat() - &gain * &cp));
    let delta = p_post.trace() - p_prior.trace();
    if delta > TRACE_SLACK {
        return Err(EstimatorError::TraceIncrease { delta });
    }
    Ok((gain, p_post))
}

/// Gain and posterior covariance with the step selector C = Pi_f F.
pub fn gain_and_update(
    basis: &BehaviorBasis,
    p_prior: &SymMatrix,
    noise: &NoiseModel,
) -> Result<(DMatrix<f64>, SymMatrix), EstimatorError> {
    noise.validate_layout(basis.layout())?;
    innovation_gain(&basis.step_rows(), p_prior, noise.s_n())
}

/// Posterior covariance in the gain-agnostic quadratic form
/// (I - K C) P (I - K C)' + K S_n K', valid for any gain K.
pub fn joseph_posterior(
    c: &DMatrix<f64>,
    p_prior: &SymMatrix,
    gain: &DMatrix<f64>,
    s_n: &SymMatrix,
) -> SymMatrix {
    let g = p_prior.dim();
    let closed = DMatrix::identity(g, g) - gain * c;
    let p = &closed * p_prior.mat() * closed.transpose() + gain * s_n.mat() * gain.transpose();
    SymMatrix::from_average(&p)
}

/// Innovation-corrected estimate g_post = g_prior + K (w_measured - C g_prior).
pub fn posterior_update(
    basis: &BehaviorBasis,
    g_prior: &DVector<f64>,
    gain: &DMatrix<f64>,
    w_measured: &DVector<f64>,
) -> DVector<f64> {
    let c = basis.step_rows();
    assert_eq!(g_prior.len(), basis.g_dim(), "prior estimate has wrong length");
    assert_eq!(w_measured.len(), c.nrows(), "measurement has wrong length");
    let innovation = w_measured - &c * g_prior;
    g_prior + gain * innovation
}

/// Steady-state covariance, Riccati coefficients, and gain.
#[derive(Debug, Clone)]
pub struct SteadyState {
    p: SymMatrix,
    q_term: SymMatrix,
    n_term: SymMatrix,
    a_term: DMatrix<f64>,
    r_term: SymMatrix,
    t_term: DMatrix<f64>,
    k_inf: DMatrix<f64>,
    iterations: usize,
    residual: f64,
}

impl SteadyState {
    /// Fixed-point covariance P.
    pub fn p(&self) -> &SymMatrix {
        &self.p
    }

    /// One-step noise covariance Q.
    pub fn q_term(&self) -> &SymMatrix {
        &self.q_term
    }

    /// Update term N of the Riccati equation, PSD.
    pub fn n_term(&self) -> &SymMatrix {
        &self.n_term
    }

    /// Predicted-measurement map A = C E_p.
    pub fn a_term(&self) -> &DMatrix<f64> {
        &self.a_term
    }

    /// Innovation noise floor R = C Q C' + S_n.
    pub fn r_term(&self) -> &SymMatrix {
        &self.r_term
    }

    /// Process-measurement cross term T = C Q.
    pub fn t_term(&self) -> &DMatrix<f64> {
        &self.t_term
    }

    /// Steady-state gain K = P_prior C' (C P_prior C' + S_n)^{-1}.
    pub fn k_inf(&self) -> &DMatrix<f64> {
        &self.k_inf
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Relative Riccati residual ||P - (E_p P E_p' - N + Q)||_F / max(1, ||P||_F).
    pub fn residual(&self) -> f64 {
        self.residual
    }

    /// Plain-text audit report: spectrum of P, residual, iteration count.
    pub fn report(&self) -> String {
        let (vals, _) = self.p.eigen_desc();
        let mut out = String::new();
        let _ = writeln!(out, "steady-state filter report");
        let _ = writeln!(out, "iterations: {}", self.iterations);
        let _ = writeln!(out, "relative riccati residual: {:.6e}", self.residual);
        let _ = writeln!(out, "trace(P): {:.12e}", self.p.trace());
        let _ = writeln!(out, "eigenvalues of P (descending):");
        for v in vals.iter() {
            let _ = writeln!(out, "  {v:.12e}");
        }
        out
    }
}

/// Coefficient-level Riccati fixed-point iteration. Returns the converged
/// covariance, the number of map applications, and the relative residual
/// ||Phi(P) - P||_F / max(1, ||Phi(P)||_F) of the returned P.
pub fn are_fixed_point(
    e_p: &DMatrix<f64>,
    c: &DMatrix<f64>,
    q: &SymMatrix,
    s_n: &SymMatrix,
    p0: &SymMatrix,
    max_iter: usize,
    are_tol: f64,
) -> Result<(SymMatrix, usize, f64), EstimatorError> {
    let g = e_p.nrows();
    if e_p.ncols() != g || q.dim() != g || p0.dim() != g || c.ncols() != g || c.nrows() != s_n.dim()
    {
        return Err(EstimatorError::Shape(
            "Riccati coefficients have inconsistent dimensions".into(),
        ));
    }
    // Stop at half the tolerance so the residual reassembled from the
    // Riccati terms still meets `are_tol` after roundoff.
    let stop = 0.5 * are_tol;
    let mut p_cur = p0.clone();
    let mut residual = f64::INFINITY;
    for j in 1..=max_iter {
        let p_prior = SymMatrix::from_average(&(e_p * p_cur.mat() * e_p.transpose() + q.mat()));
        let (_, p_next) = innovation_gain(c, &p_prior, s_n)?;
        residual = (p_next.mat() - p_cur.mat()).norm() / p_next.mat().norm().max(1.0);
        if residual < stop {
            return Ok((p_cur, j, residual));
        }
        p_cur = p_next;
    }
    Err(EstimatorError::NotConverged { iterations: max_iter, residual })
}

/// Solves the steady-state Riccati equation by filter iteration and
/// assembles the coefficient matrices and steady gain.
pub fn solve_are(
    dynamics: &ParamDynamics,
    noise: &NoiseModel,
    p0: Option<&SymMatrix>,
    max_iter: usize,
    are_tol: f64,
) -> Result<SteadyState, EstimatorError> {
    let basis = dynamics.basis();
    noise.validate_layout(basis.layout())?;
    let c = basis.step_rows();
    let q_term = process_covariance(dynamics, noise);
    let p0 = match p0 {
        Some(p) => p.clone(),
        None => q_term.clone(),
    };
    let (p, iterations, _) =
        are_fixed_point(dynamics.e_p(), &c, &q_term, noise.s_n(), &p0, max_iter, are_tol)?;

    let a_term = &c * dynamics.e_p();
    let r_term = SymMatrix::from_average(&(&c * q_term.mat() * c.transpose() + noise.s_n().mat()));
    let t_term = &c * q_term.mat();
    let cross = &a_term * p.mat() * dynamics.e_p().transpose() + &t_term;
    let mid = SymMatrix::from_average(&(&a_term * p.mat() * a_term.transpose() + r_term.mat()));
    let mid_inv = numerics::invert_spd(&mid, numerics::COND_MAX)
        .map_err(EstimatorError::SingularInnovation)?;
    let n_term = SymMatrix::from_average(&(cross.transpose() * mid_inv.mat() * &cross));
    let n_min = n_term.min_eig();
    if n_min < -numerics::CLAMP_TOL {
        return Err(EstimatorError::Shape(format!(
            "Riccati update term lost positive semidefiniteness (min eigenvalue {n_min:.3e})"
        )));
    }

    let reassembled = dynamics.e_p() * p.mat() * dynamics.e_p().transpose() - n_term.mat()
        + q_term.mat();
    let residual = (p.mat() - reassembled).norm() / p.mat().norm().max(1.0);
    if residual >= are_tol {
        return Err(EstimatorError::NotConverged { iterations, residual });
    }

    let p_prior = SymMatrix::from_average(
        &(dynamics.e_p() * p.mat() * dynamics.e_p().transpose() + q_term.mat()),
    );
    let (k_inf, _) = innovation_gain(&c, &p_prior, noise.s_n())?;

    Ok(SteadyState { p, q_term, n_term, a_term, r_term, t_term, k_inf, iterations, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behavior::{exact_basis_from_kernel, SignalLayout};
    use crate::paramdyn::decompose;
    use crate::simulator::kernel::KernelModel;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{RngExt, SeedableRng};
    use rand_distr::StandardNormal;

    fn disturbed_model() -> KernelModel {
        KernelModel::new(
            vec![DMatrix::identity(1, 1), DMatrix::from_element(1, 1, -0.5)],
            vec![DMatrix::from_element(1, 1, -1.0), DMatrix::from_element(1, 1, -0.3)],
            vec![DMatrix::from_element(1, 1, -1.0), DMatrix::from_element(1, 1, 0.2)],
        )
        .unwrap()
    }

    fn fixture() -> (ParamDynamics, NoiseModel) {
        let layout = SignalLayout::new(1, 1, 1, 3, 1).unwrap();
        let basis = exact_basis_from_kernel(&disturbed_model(), &layout).unwrap();
        let dynamics = decompose(&basis).unwrap();
        let noise = NoiseModel::new(
            SymMatrix::from_average(&DMatrix::from_element(1, 1, 0.4)),
            SymMatrix::from_average(&DMatrix::from_element(1, 1, 0.2)),
            SymMatrix::from_average(&DMatrix::from_diagonal(&DVector::from_vec(vec![
                0.3, 0.25, 0.2,
            ]))),
        )
        .unwrap();
        (dynamics, noise)
    }

    fn randn_vec(rng: &mut StdRng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn prediction_matches_direct_product_and_zero_case() {
        let (dynamics, _) = fixture();
        let g = dynamics.basis().g_dim();
        let state =
            FilterState::new(DVector::zeros(g), SymMatrix::zeros(g), 0).unwrap();
        let prior = predict(&dynamics, &state, &DVector::zeros(1), &DVector::zeros(1)).unwrap();
        assert!(prior.abs().max() == 0.0);

        let mut rng = StdRng::seed_from_u64(2);
        let g_hat = randn_vec(&mut rng, g);
        let d = randn_vec(&mut rng, 1);
        let z = randn_vec(&mut rng, 1);
        let state = FilterState::new(g_hat.clone(), SymMatrix::identity(g), 3).unwrap();
        let prior = predict(&dynamics, &state, &d, &z).unwrap();
        let oracle = dynamics.f_p() * &g_hat + dynamics.f_f() * &d + dynamics.f_z() * &z;
        assert!((prior - oracle).abs().max() < 1e-12);
    }

    #[test]
    fn control_reads_the_input_rows() {
        let (dynamics, _) = fixture();
        let basis = dynamics.basis();
        let g = basis.g_dim();
        assert!(control_from_prior(basis, &DVector::zeros(g)).abs().max() == 0.0);
        let pi_u = basis.input_rows();
        for j in [0, g / 2, g - 1] {
            let mut e = DVector::zeros(g);
            e[j] = 1.0;
            let u = control_from_prior(basis, &e);
            assert!((u - pi_u.column(j)).abs().max() < 1e-14);
        }
    }

    #[test]
    fn covariance_prediction_reduces_to_process_noise_and_stays_psd() {
        let (dynamics, noise) = fixture();
        let g = dynamics.basis().g_dim();
        let zero = covariance_predict(&dynamics, &SymMatrix::zeros(g), &noise).unwrap();
        let q = process_covariance(&dynamics, &noise);
        assert!((zero.mat() - q.mat()).abs().max() < 1e-14);

        let mut rng = StdRng::seed_from_u64(9);
        for _ in 0..5 {
            let b = DMatrix::from_fn(g, g, |_, _| rng.sample::<f64, _>(StandardNormal));
            let p = SymMatrix::from_average(&(&b * b.transpose()));
            let prior = covariance_predict(&dynamics, &p, &noise).unwrap();
            assert!(prior.min_eig() > -1e-10);
        }
    }

    #[test]
    fn scalar_gain_matches_hand_formula() {
        let c = DMatrix::identity(1, 1);
        let p = SymMatrix::from_average(&DMatrix::from_element(1, 1, 2.0));
        let s_n = SymMatrix::from_average(&DMatrix::from_element(1, 1, 0.5));
        let (k, p_post) = innovation_gain(&c, &p, &s_n).unwrap();
        assert_abs_diff_eq!(k[(0, 0)], 2.0 / 2.5, epsilon = 1e-14);
        assert_abs_diff_eq!(p_post.mat()[(0, 0)], 2.0 * 0.5 / 2.5, epsilon = 1e-14);
    }

    #[test]
    fn zero_prior_covariance_gives_zero_gain() {
        let (dynamics, noise) = fixture();
        let g = dynamics.basis().g_dim();
        let (k, p_post) = gain_and_update(dynamics.basis(), &SymMatrix::zeros(g), &noise).unwrap();
        assert!(k.abs().max() < 1e-14);
        assert!(p_post.mat().abs().max() < 1e-14);
    }

    #[test]
    fn optimal_gain_beats_joseph_perturbations() {
        let (dynamics, noise) = fixture();
        let q = process_covariance(&dynamics, &noise);
        let c = dynamics.basis().step_rows();
        let p_prior = covariance_predict(&dynamics, &q, &noise).unwrap();
        let (k_opt, p_post) = gain_and_update(dynamics.basis(), &p_prior, &noise).unwrap();
        let base = joseph_posterior(&c, &p_prior, &k_opt, noise.s_n());
        assert!((base.trace() - p_post.trace()).abs() < 1e-10);
        let mut rng = StdRng::seed_from_u64(44);
        for _ in 0..20 {
            let mut dk =
                DMatrix::from_fn(k_opt.nrows(), k_opt.ncols(), |_, _| {
                    rng.sample::<f64, _>(StandardNormal)
                });
            dk *= 1e-3 / dk.norm();
            let perturbed = joseph_posterior(&c, &p_prior, &(&k_opt + dk), noise.s_n());
            assert!(perturbed.trace() > base.trace());
        }
    }

    #[test]
    fn posterior_update_fixes_trivial_cases() {
        let (dynamics, _) = fixture();
        let basis = dynamics.basis();
        let g = basis.g_dim();
        let w = basis.layout().w_dim();
        let mut rng = StdRng::seed_from_u64(3);
        let g_prior = randn_vec(&mut rng, g);
        let zero_gain = DMatrix::zeros(g, w);
        let w_m = randn_vec(&mut rng, w);
        let post = posterior_update(basis, &g_prior, &zero_gain, &w_m);
        assert!((post - &g_prior).abs().max() == 0.0);

        let gain = DMatrix::from_fn(g, w, |_, _| rng.sample::<f64, _>(StandardNormal));
        let consistent = basis.step_rows() * &g_prior;
        let post = posterior_update(basis, &g_prior, &gain, &consistent);
        assert!((post - &g_prior).abs().max() < 1e-12);
    }

    #[test]
    fn scalar_riccati_matches_closed_form_root() {
        // e_p = a, c = 1: a^2 P^2 + (q + r - r a^2) P - r q = 0.
        let (a, q, r) = (0.9_f64, 0.5_f64, 0.2_f64);
        let e_p = DMatrix::from_element(1, 1, a);
        let c = DMatrix::identity(1, 1);
        let qm = SymMatrix::from_average(&DMatrix::from_element(1, 1, q));
        let s_n = SymMatrix::from_average(&DMatrix::from_element(1, 1, r));
        let p0 = SymMatrix::zeros(1);
        let (p, _, residual) =
            are_fixed_point(&e_p, &c, &qm, &s_n, &p0, ARE_MAX_ITER, ARE_TOL).unwrap();
        let b = q + r - r * a * a;
        let root = (-b + (b * b + 4.0 * a * a * r * q).sqrt()) / (2.0 * a * a);
        assert_abs_diff_eq!(p.mat()[(0, 0)], root, epsilon = 1e-10);
        assert!(residual < ARE_TOL);
    }

    #[test]
    fn static_transition_converges_immediately() {
        let (dynamics, noise) = fixture();
        let g = dynamics.basis().g_dim();
        let c = dynamics.basis().step_rows();
        let q = process_covariance(&dynamics, &noise);
        let e_p = DMatrix::zeros(g, g);
        let (p, iterations, _) =
            are_fixed_point(&e_p, &c, &q, noise.s_n(), &SymMatrix::identity(g), 100, ARE_TOL)
                .unwrap();
        assert!(iterations <= 2);
        let (_, expected) = innovation_gain(&c, &q, noise.s_n()).unwrap();
        assert!((p.mat() - expected.mat()).abs().max() < 1e-12);
    }

    #[test]
    fn steady_state_is_unique_and_certified() {
        let (dynamics, noise) = fixture();
        let g = dynamics.basis().g_dim();
        let a = solve_are(&dynamics, &noise, None, ARE_MAX_ITER, ARE_TOL).unwrap();
        assert!(a.residual() < ARE_TOL);
        assert!(a.p().min_eig() > -1e-10);
        assert!(a.n_term().min_eig() > -1e-10);
        let far = SymMatrix::from_average(&(DMatrix::identity(g, g) * 100.0));
        let b = solve_are(&dynamics, &noise, Some(&far), ARE_MAX_ITER, ARE_TOL).unwrap();
        let rel = (a.p().mat() - b.p().mat()).norm() / a.p().mat().norm();
        assert!(rel < 1e-7, "fixed points differ by {rel:.3e}");

        // With the converged covariance the filter trace has settled.
        let mut p = a.p().clone();
        let before = p.trace();
        for _ in 0..5 {
            let prior = covariance_predict(&dynamics, &p, &noise).unwrap();
            let (_, post) = gain_and_update(dynamics.basis(), &prior, &noise).unwrap();
            p = post;
        }
        assert!((p.trace() - before).abs() < 1e-8);

        let report = a.report();
        assert!(report.contains("riccati residual"));
        assert!(report.lines().count() > g);
    }

    #[test]
    fn singular_measurement_noise_is_regularized_or_rejected() {
        let noise = NoiseModel::new(
            SymMatrix::identity(1),
            SymMatrix::identity(1),
            SymMatrix::zeros(3),
        )
        .unwrap();
        assert!(noise.regularized());
        assert!(noise.s_n().min_eig() > 0.0);

        // Driving the coefficient-level gain with an exactly singular S_n
        // fails with the dedicated error.
        let c = DMatrix::identity(2, 2);
        let p = SymMatrix::zeros(2);
        let err = innovation_gain(&c, &p, &SymMatrix::zeros(2));
        assert!(matches!(err, Err(EstimatorError::SingularInnovation(_))));
    }
}
