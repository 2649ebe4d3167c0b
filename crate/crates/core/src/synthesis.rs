//! Controller synthesis by linear matrix inequalities over the parameterizer.
//!
//! A virtual control z_k = K_g ghat_{k-1|k-1} + K_d E[d_k] (+ xi) is certified
//! by a quadratic storage function V(g) = ||g||_P^2 with P = M - F'Pi_y'Pi_y F
//! and M = W^{-1}, so that the conditional expected dissipation with supply
//! s_k = -||y_k||^2 + gamma1^2 ||E[d_k]||^2 + gamma2^2 ||dd_k||^2 holds each
//! step. Three mean-disturbance regimes share the positive-definiteness floor
//! and the estimation-offset block
//!
//! ```text
//! [[X, *, *], [N^(1/2), W, *], [Pi_y F P^(1/2), 0, I]] >= 0
//! ```
//!
//! and differ in the gain block:
//!
//! ```text
//! general:  gamma2^2 tr(S_d) - tr(X) >= 0  and
//!           [[W, *, *, *], [0, gamma1^2 I, *, *], [Pi_y F W, 0, I, *],
//!            [F_p W + F_z Y, F_f + F_z K_d, 0, W]] >= 0
//! constant: [[phi, *, *, *], [0, W, *, *], [0, Pi_y F W, I, *],
//!            [F_f d_bar + F_z xi, F_p W + F_z Y, 0, W]] >= 0,
//!           phi = gamma1^2 ||d_bar||^2 + gamma2^2 tr(S_d) - tr(X)
//! zero:     gamma2^2 tr(S_d) - tr(X) >= 0  and
//!           [[W, *, *], [Pi_y F W, I, *], [F_p W + F_z Y, 0, W]] >= 0
//! ```
//!
//! A feasible point yields the closed-loop prior map A_cl = F_p + F_z Y W^{-1}
//! and the failure-probability guarantee
//! P{Gamma_T <= gamma} >= 1 - (rho gamma1^2 + (1 - rho) gamma2^2) / gamma^2,
//! with rho the asymptotic share of mean-disturbance energy.

use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::estimator::{NoiseModel, SteadyState};
use crate::numerics::{self, NumericsError, SymMatrix};
use crate::paramdyn::ParamDynamics;
use crate::sdp::{
    self, BlockBuilder, ConicProgram, ConicSolution, SdpError, SolveOptions, SolveStatus, VarId,
};

/// Positive-definiteness floor placed on W.
pub const W_FLOOR: f64 = 1e-6;
/// Eigenvalue slack accepted when re-verifying certificates.
pub const CERT_TOL: f64 = 1e-8;
/// Margin allowed in direct scalar dissipation evaluations.
pub const DISS_TOL: f64 = 1e-7;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error("semidefinite program: {0}")]
    Sdp(#[from] SdpError),
    #[error("numerics: {0}")]
    Numerics(#[from] NumericsError),
    #[error("design is not feasible: {status:?} with margin {margin:.3e}")]
    NotFeasible { status: SolveStatus, margin: f64 },
    #[error("storage certificate violated: min eigenvalue {0:.3e}")]
    StorageViolation(f64),
    #[error("block `{name}` violated at the solution: min eigenvalue {eig:.3e}")]
    BlockViolation { name: String, eig: f64 },
    #[error("disturbance carries no energy: tr(S_d) plus mean energy is zero")]
    UndefinedRho,
    #[error("gain profile: {0}")]
    BadProfile(String),
    #[error("no virtual control admissible at this state: psi = {0:.3e}")]
    InfeasibleAtState(f64),
    #[error("shape: {0}")]
    Shape(String),
    #[error("artifact: {0}")]
    Artifact(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Disturbance-mean regime a design was synthesized for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DesignMode {
    General,
    ConstantMean,
    ZeroMean,
}

impl fmt::Display for DesignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            DesignMode::General => "general",
            DesignMode::ConstantMean => "constant_mean",
            DesignMode::ZeroMean => "zero_mean",
        };
        f.write_str(s)
    }
}

impl DesignMode {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "general" => Some(DesignMode::General),
            "constant_mean" => Some(DesignMode::ConstantMean),
            "zero_mean" => Some(DesignMode::ZeroMean),
            _ => None,
        }
    }
}

/// Gain treatment for the constant-mean program.
#[derive(Debug, Clone, Copy)]
pub enum GammaChoice {
    /// Both squared gains supplied by the caller.
    Fixed { gamma1_sq: f64, gamma2_sq: f64 },
    /// Squared gains become nonnegative decision variables and the weighted
    /// objective rho gamma1^2 + (1 - rho) gamma2^2 is minimized.
    Minimize,
}

/// Squared-gain pair with its mixing weight; evaluates the failure bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GainProfile {
    gamma1_sq: f64,
    gamma2_sq: f64,
    rho: f64,
}

impl GainProfile {
    pub fn new(gamma1_sq: f64, gamma2_sq: f64, rho: f64) -> Result<Self, SynthesisError> {
        if !(gamma1_sq.is_finite() && gamma2_sq.is_finite() && rho.is_finite()) {
            return Err(SynthesisError::BadProfile("profile values must be finite".into()));
        }
        if gamma1_sq < 0.0 || gamma2_sq < 0.0 {
            return Err(SynthesisError::BadProfile(format!(
                "squared gains must be nonnegative, got ({gamma1_sq}, {gamma2_sq})"
            )));
        }
        if !(0.0..=1.0).contains(&rho) {
            return Err(SynthesisError::BadProfile(format!("rho = {rho} outside [0, 1]")));
        }
        Ok(GainProfile { gamma1_sq, gamma2_sq, rho })
    }

    pub fn gamma1_sq(&self) -> f64 {
        self.gamma1_sq
    }

    pub fn gamma2_sq(&self) -> f64 {
        self.gamma2_sq
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    /// Mixed squared gain rho gamma1^2 + (1 - rho) gamma2^2.
    pub fn mixed_gain_sq(&self) -> f64 {
        self.rho * self.gamma1_sq + (1.0 - self.rho) * self.gamma2_sq
    }

    /// Failure-probability bound (rho gamma1^2 + (1 - rho) gamma2^2) / gamma^2;
    /// the guarantee P{Gamma_T <= gamma} >= 1 - bound is meaningful once the
    /// bound drops below one, i.e. gamma^2 >= mixed_gain_sq.
    pub fn effective_bound(&self, gamma: f64) -> f64 {
        self.mixed_gain_sq() / (gamma * gamma)
    }
}

/// Splits a target gain bound held with probability 1 - p into the
/// rho-independent pair gamma1^2 = gamma2^2 = p gamma^2.
pub fn corollary1_gammas(gamma: f64, p: f64) -> Result<(f64, f64), SynthesisError> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(SynthesisError::BadProfile(format!("gamma = {gamma} must be positive")));
    }
    if !(p.is_finite() && 0.0 < p && p <= 1.0) {
        return Err(SynthesisError::BadProfile(format!("p = {p} outside (0, 1]")));
    }
    let v = p * gamma * gamma;
    Ok((v, v))
}

/// Mean-energy share rho = ||d_bar||^2 / (tr(S_d) + ||d_bar||^2).
pub fn compute_rho_constant(d_bar: &DVector<f64>, s_d: &SymMatrix) -> Result<f64, SynthesisError> {
    if !d_bar.iter().all(|v| v.is_finite()) {
        return Err(SynthesisError::Shape("disturbance mean must be finite".into()));
    }
    rho_from_energy(d_bar.norm_squared(), s_d.trace())
}

/// Finite-horizon empirical form: the average of ||E[d_k]||^2 over the given
/// sequence replaces the limit.
pub fn compute_rho_sequence(
    d_means: &[DVector<f64>],
    s_d: &SymMatrix,
) -> Result<f64, SynthesisError> {
    if d_means.is_empty() {
        return Err(SynthesisError::Shape("mean sequence is empty".into()));
    }
    let mut energy = 0.0;
    for d in d_means {
        if !d.iter().all(|v| v.is_finite()) {
            return Err(SynthesisError::Shape("disturbance mean must be finite".into()));
        }
        energy += d.norm_squared();
    }
    rho_from_energy(energy / d_means.len() as f64, s_d.trace())
}

fn rho_from_energy(mean_energy: f64, tr_s_d: f64) -> Result<f64, SynthesisError> {
    let denom = tr_s_d + mean_energy;
    if denom <= 0.0 {
        return Err(SynthesisError::UndefinedRho);
    }
    Ok(mean_energy / denom)
}

/// A compiled synthesis program plus the handles needed to read a solution
/// back out of it.
#[derive(Debug)]
pub struct SynthesisProgram {
    program: ConicProgram,
    mode: DesignMode,
    w: VarId,
    x: VarId,
    y: VarId,
    k_d: Option<VarId>,
    xi: Option<VarId>,
    gamma_vars: Option<(VarId, VarId)>,
    fixed_gammas: Option<(f64, f64)>,
    rho: Option<f64>,
    d_bar: Option<DVector<f64>>,
    tr_s_d: f64,
}

impl SynthesisProgram {
    pub fn program(&self) -> &ConicProgram {
        &self.program
    }

    pub fn mode(&self) -> DesignMode {
        self.mode
    }

    pub fn solve(&self, opts: &SolveOptions) -> Result<ConicSolution, SynthesisError> {
        Ok(sdp::solve(&self.program, opts)?)
    }
}

/// Shared constants of all three programs, extracted once per build.
struct ProgramData {
    g: usize,
    p_dim: usize,
    q_dim: usize,
    pyf: DMatrix<f64>,
    f_p: DMatrix<f64>,
    f_f: DMatrix<f64>,
    f_z: DMatrix<f64>,
    n_sqrt: DMatrix<f64>,
    p_sqrt: DMatrix<f64>,
    tr_s_d: f64,
}

fn program_data(
    dynamics: &ParamDynamics,
    ss: &SteadyState,
    noise: &NoiseModel,
) -> Result<ProgramData, SynthesisError> {
    let basis = dynamics.basis();
    let layout = basis.layout();
    let g = basis.g_dim();
    if ss.p().dim() != g {
        return Err(SynthesisError::Shape(format!(
            "steady state covariance is {}-dimensional, parameterizer is {g}-dimensional",
            ss.p().dim()
        )));
    }
    if noise.s_d().dim() != layout.q {
        return Err(SynthesisError::Shape(format!(
            "S_d is {}x{0}, disturbance dimension is {}",
            noise.s_d().dim(),
            layout.q
        )));
    }
    let n_sqrt = numerics::psd_sqrt(ss.n_term(), numerics::CLAMP_TOL)?.into_inner();
    let p_sqrt = numerics::psd_sqrt(ss.p(), numerics::CLAMP_TOL)?.into_inner();
    Ok(ProgramData {
        g,
        p_dim: layout.p,
        q_dim: layout.q,
        pyf: basis.output_rows(),
        f_p: dynamics.f_p().clone(),
        f_f: dynamics.f_f().clone(),
        f_z: dynamics.f_z().clone(),
        n_sqrt,
        p_sqrt,
        tr_s_d: noise.s_d().trace(),
    })
}

fn add_pd_block(prog: &mut ConicProgram, w: VarId, g: usize) -> Result<(), SdpError> {
    let eye = DMatrix::identity(g, g);
    let mut b = BlockBuilder::new("positive-definite", &[g]);
    b.sandwich(0, 0, eye.clone(), w, eye.clone()).constant(0, 0, -&eye * W_FLOOR);
    prog.add_psd_block(b)
}

fn add_offset_block(
    prog: &mut ConicProgram,
    w: VarId,
    x: VarId,
    data: &ProgramData,
) -> Result<(), SdpError> {
    let g = data.g;
    let eye_g = DMatrix::identity(g, g);
    let mut b = BlockBuilder::new("estimation-offset", &[g, g, data.p_dim]);
    b.sandwich(0, 0, eye_g.clone(), x, eye_g.clone())
        .constant(1, 0, data.n_sqrt.clone())
        .sandwich(1, 1, eye_g.clone(), w, eye_g.clone())
        .constant(2, 0, &data.pyf * &data.p_sqrt)
        .constant(2, 2, DMatrix::identity(data.p_dim, data.p_dim));
    prog.add_psd_block(b)
}

fn add_budget_linear(
    prog: &mut ConicProgram,
    x: VarId,
    gamma2_sq: f64,
    data: &ProgramData,
) -> Result<(), SdpError> {
    let neg_eye = -DMatrix::identity(data.g, data.g);
    prog.add_linear("disturbance-budget", &[(x, neg_eye)], gamma2_sq * data.tr_s_d)
}

/// General mean profile: floor, budget, estimation offset, and the gain block
/// over (W, X, Y, K_d) at fixed squared gains.
pub fn build_theorem1(
    dynamics: &ParamDynamics,
    ss: &SteadyState,
    noise: &NoiseModel,
    gamma1_sq: f64,
    gamma2_sq: f64,
) -> Result<SynthesisProgram, SynthesisError> {
    if gamma1_sq < 0.0 || gamma2_sq < 0.0 {
        return Err(SynthesisError::BadProfile("squared gains must be nonnegative".into()));
    }
    let data = program_data(dynamics, ss, noise)?;
    if data.q_dim == 0 {
        return Err(SynthesisError::Shape(
            "general mode needs a nonempty disturbance channel".into(),
        ));
    }
    let (g, q, p) = (data.g, data.q_dim, data.p_dim);
    let m_dim = data.f_z.ncols();

    let mut prog = ConicProgram::new();
    let w = prog.symmetric_var("W", g)?;
    let x = prog.symmetric_var("X", g)?;
    let y = prog.matrix_var("Y", m_dim, g)?;
    let k_d = prog.matrix_var("K_d", m_dim, q)?;

    add_pd_block(&mut prog, w, g)?;
    add_budget_linear(&mut prog, x, gamma2_sq, &data)?;
    add_offset_block(&mut prog, w, x, &data)?;

    let eye_g = DMatrix::identity(g, g);
    let eye_q = DMatrix::identity(q, q);
    let mut gain = BlockBuilder::new("gain-dissipation", &[g, q, p, g]);
    gain.sandwich(0, 0, eye_g.clone(), w, eye_g.clone())
        .constant(1, 1, &eye_q * gamma1_sq)
        .sandwich(2, 0, data.pyf.clone(), w, eye_g.clone())
        .constant(2, 2, DMatrix::identity(p, p))
        .sandwich(3, 0, data.f_p.clone(), w, eye_g.clone())
        .sandwich(3, 0, data.f_z.clone(), y, eye_g.clone())
        .constant(3, 1, data.f_f.clone())
        .sandwich(3, 1, data.f_z.clone(), k_d, eye_q.clone())
        .sandwich(3, 3, eye_g.clone(), w, eye_g.clone());
    prog.add_psd_block(gain)?;

    Ok(SynthesisProgram {
        program: prog,
        mode: DesignMode::General,
        w,
        x,
        y,
        k_d: Some(k_d),
        xi: None,
        gamma_vars: None,
        fixed_gammas: Some((gamma1_sq, gamma2_sq)),
        rho: None,
        d_bar: None,
        tr_s_d: data.tr_s_d,
    })
}

/// Constant mean profile: floor, estimation offset, and the offset gain block
/// over (W, X, Y, xi); squared gains either fixed or minimized.
pub fn build_theorem2(
    dynamics: &ParamDynamics,
    ss: &SteadyState,
    noise: &NoiseModel,
    d_bar: &DVector<f64>,
    gammas: GammaChoice,
) -> Result<SynthesisProgram, SynthesisError> {
    let data = program_data(dynamics, ss, noise)?;
    if data.q_dim == 0 {
        return Err(SynthesisError::Shape(
            "constant-mean mode needs a nonempty disturbance channel".into(),
        ));
    }
    if d_bar.len() != data.q_dim {
        return Err(SynthesisError::Shape(format!(
            "d_bar has {} entries, disturbance dimension is {}",
            d_bar.len(),
            data.q_dim
        )));
    }
    if !d_bar.iter().all(|v| v.is_finite()) {
        return Err(SynthesisError::Shape("d_bar must be finite".into()));
    }
    let (g, p) = (data.g, data.p_dim);
    let m_dim = data.f_z.ncols();
    let d_norm_sq = d_bar.norm_squared();
    let rho = rho_from_energy(d_norm_sq, data.tr_s_d)?;

    let mut prog = ConicProgram::new();
    let w = prog.symmetric_var("W", g)?;
    let x = prog.symmetric_var("X", g)?;
    let y = prog.matrix_var("Y", m_dim, g)?;
    let xi = prog.matrix_var("xi", m_dim, 1)?;
    let gamma_vars = match gammas {
        GammaChoice::Fixed { .. } => None,
        GammaChoice::Minimize => {
            let g1 = prog.scalar_var("gamma1_sq")?;
            let g2 = prog.scalar_var("gamma2_sq")?;
            Some((g1, g2))
        }
    };

    add_pd_block(&mut prog, w, g)?;
    add_offset_block(&mut prog, w, x, &data)?;

    let eye_g = DMatrix::identity(g, g);
    let neg_eye_g = -eye_g.clone();
    let mut gain = BlockBuilder::new("constant-mean-dissipation", &[1, g, p, g]);
    match gammas {
        GammaChoice::Fixed { gamma1_sq, gamma2_sq } => {
            if gamma1_sq < 0.0 || gamma2_sq < 0.0 {
                return Err(SynthesisError::BadProfile(
                    "squared gains must be nonnegative".into(),
                ));
            }
            let supply = gamma1_sq * d_norm_sq + gamma2_sq * data.tr_s_d;
            gain.constant(0, 0, DMatrix::from_element(1, 1, supply));
        }
        GammaChoice::Minimize => {
            let (g1, g2) = gamma_vars.expect("created above");
            gain.scaled(0, 0, g1, DMatrix::from_element(1, 1, d_norm_sq))
                .scaled(0, 0, g2, DMatrix::from_element(1, 1, data.tr_s_d));
        }
    }
    gain.inner(0, 0, x, neg_eye_g)
        .sandwich(1, 1, eye_g.clone(), w, eye_g.clone())
        .sandwich(2, 1, data.pyf.clone(), w, eye_g.clone())
        .constant(2, 2, DMatrix::identity(p, p))
        .constant(3, 0, DMatrix::from_column_slice(g, 1, (&data.f_f * d_bar).as_slice()))
        .sandwich(3, 0, data.f_z.clone(), xi, DMatrix::identity(1, 1))
        .sandwich(3, 1, data.f_p.clone(), w, eye_g.clone())
        .sandwich(3, 1, data.f_z.clone(), y, eye_g.clone())
        .sandwich(3, 3, eye_g.clone(), w, eye_g.clone());
    prog.add_psd_block(gain)?;

    let fixed_gammas = match gammas {
        GammaChoice::Fixed { gamma1_sq, gamma2_sq } => Some((gamma1_sq, gamma2_sq)),
        GammaChoice::Minimize => {
            let (g1, g2) = gamma_vars.expect("created above");
            let one = DMatrix::identity(1, 1);
            prog.add_linear("gamma1-nonnegative", &[(g1, one.clone())], 0.0)?;
            prog.add_linear("gamma2-nonnegative", &[(g2, one.clone())], 0.0)?;
            prog.set_objective(&[
                (g1, DMatrix::from_element(1, 1, rho)),
                (g2, DMatrix::from_element(1, 1, 1.0 - rho)),
            ])?;
            None
        }
    };

    Ok(SynthesisProgram {
        program: prog,
        mode: DesignMode::ConstantMean,
        w,
        x,
        y,
        k_d: None,
        xi: Some(xi),
        gamma_vars,
        fixed_gammas,
        rho: Some(rho),
        d_bar: Some(d_bar.clone()),
        tr_s_d: data.tr_s_d,
    })
}

/// Zero-mean profile: floor, budget, estimation offset, and the contraction
/// block over (W, X, Y).
pub fn build_zero_mean(
    dynamics: &ParamDynamics,
    ss: &SteadyState,
    noise: &NoiseModel,
    gamma2_sq: f64,
) -> Result<SynthesisProgram, SynthesisError> {
    if gamma2_sq < 0.0 {
        return Err(SynthesisError::BadProfile("squared gain must be nonnegative".into()));
    }
    let data = program_data(dynamics, ss, noise)?;
    let (g, p) = (data.g, data.p_dim);
    let m_dim = data.f_z.ncols();

    let mut prog = ConicProgram::new();
    let w = prog.symmetric_var("W", g)?;
    let x = prog.symmetric_var("X", g)?;
    let y = prog.matrix_var("Y", m_dim, g)?;

    add_pd_block(&mut prog, w, g)?;
    add_budget_linear(&mut prog, x, gamma2_sq, &data)?;
    add_offset_block(&mut prog, w, x, &data)?;

    let eye_g = DMatrix::identity(g, g);
    let mut gain = BlockBuilder::new("mean-contraction", &[g, p, g]);
    gain.sandwich(0, 0, eye_g.clone(), w, eye_g.clone())
        .sandwich(1, 0, data.pyf.clone(), w, eye_g.clone())
        .constant(1, 1, DMatrix::identity(p, p))
        .sandwich(2, 0, data.f_p.clone(), w, eye_g.clone())
        .sandwich(2, 0, data.f_z.clone(), y, eye_g.clone())
        .sandwich(2, 2, eye_g.clone(), w, eye_g.clone());
    prog.add_psd_block(gain)?;

    Ok(SynthesisProgram {
        program: prog,
        mode: DesignMode::ZeroMean,
        w,
        x,
        y,
        k_d: None,
        xi: None,
        gamma_vars: None,
        fixed_gammas: Some((0.0, gamma2_sq)),
        rho: Some(0.0),
        d_bar: None,
        tr_s_d: data.tr_s_d,
    })
}

/// A verified feasible design with its closed-loop maps and certificates.
#[derive(Debug, Clone)]
pub struct ControllerDesign {
    mode: DesignMode,
    w: SymMatrix,
    x: SymMatrix,
    y: DMatrix<f64>,
    k_d: Option<DMatrix<f64>>,
    xi: Option<DVector<f64>>,
    m: SymMatrix,
    p_storage: SymMatrix,
    a_cl: DMatrix<f64>,
    b_cl: Option<DMatrix<f64>>,
    k_g: DMatrix<f64>,
    gamma1_sq: f64,
    gamma2_sq: f64,
    rho: Option<f64>,
    phi: Option<f64>,
    mean_forcing: Option<DVector<f64>>,
    d_bar: Option<DVector<f64>>,
    objective: Option<f64>,
    margins: Vec<(String, f64)>,
}

/// Extracts, completes, and re-verifies a feasible solution.
pub fn assemble_controller(
    sp: &SynthesisProgram,
    sol: &ConicSolution,
    dynamics: &ParamDynamics,
) -> Result<ControllerDesign, SynthesisError> {
    if sol.status != SolveStatus::Feasible {
        return Err(SynthesisError::NotFeasible {
            status: sol.status,
            margin: sol.min_eig_margin,
        });
    }
    let prog = &sp.program;
    let w = SymMatrix::from_average(&sol.assignment.value(prog, sp.w));
    let x = SymMatrix::from_average(&sol.assignment.value(prog, sp.x));
    let y = sol.assignment.value(prog, sp.y);
    let k_d = sp.k_d.map(|v| sol.assignment.value(prog, v));
    let xi = sp.xi.map(|v| DVector::from_column_slice(sol.assignment.value(prog, v).as_slice()));

    let (gamma1_sq, gamma2_sq) = resolve_gammas(sp, sol)?;

    let m = numerics::invert_spd(&w, numerics::COND_MAX)?;
    let k_g = &y * m.mat();
    let a_cl = dynamics.f_p() + dynamics.f_z() * &k_g;
    let b_cl = match sp.mode {
        DesignMode::General => {
            let kd = k_d.as_ref().expect("general mode declares K_d");
            Some(dynamics.f_f() + dynamics.f_z() * kd)
        }
        DesignMode::ConstantMean => {
            let xi_v = xi.as_ref().expect("constant-mean mode declares xi");
            Some(dynamics.f_z() * DMatrix::from_column_slice(xi_v.len(), 1, xi_v.as_slice()))
        }
        DesignMode::ZeroMean => None,
    };
    let mean_forcing = match sp.mode {
        DesignMode::ConstantMean => {
            let d_bar = sp.d_bar.as_ref().expect("constant-mean mode stores d_bar");
            let xi_v = xi.as_ref().expect("constant-mean mode declares xi");
            Some(dynamics.f_f() * d_bar + dynamics.f_z() * xi_v)
        }
        _ => None,
    };
    let phi = match sp.mode {
        DesignMode::ConstantMean => {
            let d_bar = sp.d_bar.as_ref().expect("constant-mean mode stores d_bar");
            Some(gamma1_sq * d_bar.norm_squared() + gamma2_sq * sp.tr_s_d - x.trace())
        }
        _ => None,
    };

    let pyf = dynamics.basis().output_rows();
    let p_storage = SymMatrix::from_average(&(m.mat() - pyf.transpose() * &pyf));
    let storage_eig = p_storage.min_eig();
    if storage_eig < -CERT_TOL {
        return Err(SynthesisError::StorageViolation(storage_eig));
    }

    let mut margins = Vec::new();
    for (name, value) in prog.block_values(&sol.assignment) {
        let eig = numerics::eigen_sym_desc(&numerics::symmetrize(&value)).0.min();
        if eig < -CERT_TOL {
            return Err(SynthesisError::BlockViolation { name, eig });
        }
        margins.push((name, eig));
    }

    Ok(ControllerDesign {
        mode: sp.mode,
        w,
        x,
        y,
        k_d,
        xi,
        m,
        p_storage,
        a_cl,
        b_cl,
        k_g,
        gamma1_sq,
        gamma2_sq,
        rho: sp.rho,
        phi,
        mean_forcing,
        d_bar: sp.d_bar.clone(),
        objective: sol.objective_value,
        margins,
    })
}

/// Fixed gains pass through; minimized gains are re-split along the level set
/// gamma1^2 ||d_bar||^2 + gamma2^2 tr(S_d) = K (the only combination the
/// program constrains) to the analytic center, which gives each term half the
/// budget.
fn resolve_gammas(
    sp: &SynthesisProgram,
    sol: &ConicSolution,
) -> Result<(f64, f64), SynthesisError> {
    if let Some(pair) = sp.fixed_gammas {
        return Ok(pair);
    }
    let (v1, v2) = sp.gamma_vars.expect("programs carry fixed or variable gains");
    let raw1 = sol.assignment.value(&sp.program, v1)[(0, 0)].max(0.0);
    let raw2 = sol.assignment.value(&sp.program, v2)[(0, 0)].max(0.0);
    let d_norm_sq = sp.d_bar.as_ref().map_or(0.0, |d| d.norm_squared());
    let budget = raw1 * d_norm_sq + raw2 * sp.tr_s_d;
    let pair = if d_norm_sq > 0.0 && sp.tr_s_d > 0.0 {
        (budget / (2.0 * d_norm_sq), budget / (2.0 * sp.tr_s_d))
    } else if d_norm_sq > 0.0 {
        let v = budget / d_norm_sq;
        (v, v)
    } else if sp.tr_s_d > 0.0 {
        let v = budget / sp.tr_s_d;
        (v, v)
    } else {
        return Err(SynthesisError::UndefinedRho);
    };
    Ok(pair)
}

impl ControllerDesign {
    pub fn mode(&self) -> DesignMode {
        self.mode
    }

    pub fn w(&self) -> &SymMatrix {
        &self.w
    }

    pub fn x(&self) -> &SymMatrix {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn k_d(&self) -> Option<&DMatrix<f64>> {
        self.k_d.as_ref()
    }

    pub fn xi(&self) -> Option<&DVector<f64>> {
        self.xi.as_ref()
    }

    /// Storage metric M = W^{-1}.
    pub fn m(&self) -> &SymMatrix {
        &self.m
    }

    /// Storage weight P = M - F'Pi_y'Pi_y F.
    pub fn p_storage(&self) -> &SymMatrix {
        &self.p_storage
    }

    /// Closed-loop prior map F_p + F_z Y W^{-1}.
    pub fn a_cl(&self) -> &DMatrix<f64> {
        &self.a_cl
    }

    /// Forcing map: F_f + F_z K_d applied to E[d_k] in general mode, the
    /// constant offset F_z xi in constant-mean mode, absent for zero mean.
    pub fn b_cl(&self) -> Option<&DMatrix<f64>> {
        self.b_cl.as_ref()
    }

    /// Virtual-control feedback gain K_g = Y W^{-1}.
    pub fn k_g(&self) -> &DMatrix<f64> {
        &self.k_g
    }

    pub fn gamma1_sq(&self) -> f64 {
        self.gamma1_sq
    }

    pub fn gamma2_sq(&self) -> f64 {
        self.gamma2_sq
    }

    /// Mean-energy share when it is known offline (constant and zero mean).
    pub fn rho(&self) -> Option<f64> {
        self.rho
    }

    pub fn d_bar(&self) -> Option<&DVector<f64>> {
        self.d_bar.as_ref()
    }

    pub fn objective(&self) -> Option<f64> {
        self.objective
    }

    /// Re-verified minimum eigenvalue of every program block.
    pub fn margins(&self) -> &[(String, f64)] {
        &self.margins
    }

    /// Gain profile for bound evaluation; general mode needs the empirical
    /// rho observed on the run.
    pub fn gain_profile(&self, rho_override: Option<f64>) -> Result<GainProfile, SynthesisError> {
        let rho = rho_override.or(self.rho).ok_or_else(|| {
            SynthesisError::BadProfile(
                "general mode has no a priori rho; supply the empirical value".into(),
            )
        })?;
        GainProfile::new(self.gamma1_sq, self.gamma2_sq, rho)
    }

    /// Spectral radius of the closed-loop prior map.
    pub fn closed_loop_radius(&self) -> f64 {
        self.a_cl.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// One step of the closed-loop mean recursion.
    pub fn step_mean(
        &self,
        g: &DVector<f64>,
        d_mean: Option<&DVector<f64>>,
    ) -> Result<DVector<f64>, SynthesisError> {
        let drift = &self.a_cl * g;
        match self.mode {
            DesignMode::General => {
                let d = d_mean.ok_or_else(|| {
                    SynthesisError::Shape("general mode needs a disturbance mean".into())
                })?;
                let b = self.b_cl.as_ref().expect("general mode stores a forcing map");
                if d.len() != b.ncols() {
                    return Err(SynthesisError::Shape(format!(
                        "mean has {} entries, forcing map has {} columns",
                        d.len(),
                        b.ncols()
                    )));
                }
                Ok(drift + b * d)
            }
            DesignMode::ConstantMean => {
                if d_mean.is_some() {
                    return Err(SynthesisError::Shape(
                        "constant-mean mode bakes the mean into the design".into(),
                    ));
                }
                Ok(drift + self.mean_forcing.as_ref().expect("constant-mean forcing"))
            }
            DesignMode::ZeroMean => {
                if d_mean.is_some() {
                    return Err(SynthesisError::Shape(
                        "zero-mean mode admits no disturbance mean".into(),
                    ));
                }
                Ok(drift)
            }
        }
    }

    /// Pre-Schur scalar dissipation margin at a state: the certified value is
    /// nonnegative up to roundoff for every state and admissible mean.
    ///
    /// General: g'Pg + gamma1^2 ||d||^2 - ||A_cl g + B_cl d||_M^2.
    /// Constant mean: g'Pg + phi - ||A_cl g + F_f d_bar + F_z xi||_M^2.
    /// Zero mean: g'Pg - ||A_cl g||_M^2.
    pub fn dissipation_margin(
        &self,
        g: &DVector<f64>,
        d_mean: Option<&DVector<f64>>,
    ) -> Result<f64, SynthesisError> {
        let next = self.step_mean(g, d_mean)?;
        let supply = match self.mode {
            DesignMode::General => {
                self.gamma1_sq * d_mean.expect("checked by step_mean").norm_squared()
            }
            DesignMode::ConstantMean => self.phi.expect("constant-mean mode stores phi"),
            DesignMode::ZeroMean => 0.0,
        };
        Ok(self.p_storage.quad(g) + supply - self.m.quad(&next))
    }

    /// Per-step margins of the expected-value dissipation along a mean
    /// trajectory driven by the closed loop (general mode).
    pub fn expected_dissipation_margins(
        &self,
        g0: &DVector<f64>,
        d_means: &[DVector<f64>],
    ) -> Result<Vec<f64>, SynthesisError> {
        if self.mode != DesignMode::General {
            return Err(SynthesisError::Shape(
                "expected-value margins follow the general-mode recursion".into(),
            ));
        }
        let mut g = g0.clone();
        let mut out = Vec::with_capacity(d_means.len());
        for d in d_means {
            out.push(self.dissipation_margin(&g, Some(d))?);
            g = self.step_mean(&g, Some(d))?;
        }
        Ok(out)
    }
}

/// The online chance-constraint block: PSD of
/// [[psi, *], [F_p ghat + F_f E[d] + F_z zhat, W]] certifies the supply
/// p gamma^2 (||E[d]||^2 + tr S_d) at the current state, with
/// psi = ||ghat||_P^2 + p gamma^2 (||E[d]||^2 + tr(S_d)) - tr(MN + F'Pi' Pi F P).
#[allow(clippy::too_many_arguments)]
pub fn chance_constraint_block(
    design: &ControllerDesign,
    dynamics: &ParamDynamics,
    ss: &SteadyState,
    g_post_prev: &DVector<f64>,
    d_mean: &DVector<f64>,
    s_d: &SymMatrix,
    gamma: f64,
    p: f64,
    z_hat: &DVector<f64>,
) -> Result<DMatrix<f64>, SynthesisError> {
    let g = dynamics.basis().g_dim();
    if g_post_prev.len() != g {
        return Err(SynthesisError::Shape(format!(
            "state has {} entries, parameterizer dimension is {g}",
            g_post_prev.len()
        )));
    }
    let pyf = dynamics.basis().output_rows();
    let tr_mn = (design.m().mat() * ss.n_term().mat()).trace();
    let tr_fp = (&pyf * ss.p().mat() * pyf.transpose()).trace();
    let psi = design.p_storage().quad(g_post_prev)
        + p * gamma * gamma * (d_mean.norm_squared() + s_d.trace())
        - tr_mn
        - tr_fp;
    if psi < 0.0 {
        return Err(SynthesisError::InfeasibleAtState(psi));
    }
    let v = dynamics.f_p() * g_post_prev + dynamics.f_f() * d_mean + dynamics.f_z() * z_hat;
    let mut block = DMatrix::zeros(1 + g, 1 + g);
    block[(0, 0)] = psi;
    block.view_mut((1, 0), (g, 1)).copy_from(&v);
    block.view_mut((0, 1), (1, g)).copy_from(&v.transpose());
    block.view_mut((1, 1), (g, g)).copy_from(design.w().mat());
    Ok(block)
}

/// Designs for a piecewise-constant mean taking finitely many values; the
/// online forecast selects the nearest entry.
#[derive(Debug, Clone)]
pub struct SwitchedDesign {
    entries: Vec<(DVector<f64>, ControllerDesign)>,
}

impl SwitchedDesign {
    pub fn new(entries: Vec<(DVector<f64>, ControllerDesign)>) -> Result<Self, SynthesisError> {
        if entries.is_empty() {
            return Err(SynthesisError::Shape("switched design needs at least one entry".into()));
        }
        let q = entries[0].0.len();
        for (mean, design) in &entries {
            if mean.len() != q {
                return Err(SynthesisError::Shape("mean values differ in dimension".into()));
            }
            if design.mode() != DesignMode::ConstantMean {
                return Err(SynthesisError::Shape(
                    "switched entries must be constant-mean designs".into(),
                ));
            }
        }
        Ok(SwitchedDesign { entries })
    }

    pub fn entries(&self) -> &[(DVector<f64>, ControllerDesign)] {
        &self.entries
    }

    /// Entry whose design mean is closest to the forecast value.
    pub fn select(&self, d_mean: &DVector<f64>) -> &ControllerDesign {
        let mut best = 0;
        let mut best_dist = f64::INFINITY;
        for (i, (mean, _)) in self.entries.iter().enumerate() {
            let dist = (mean - d_mean).norm_squared();
            if dist < best_dist {
                best_dist = dist;
                best = i;
            }
        }
        &self.entries[best].1
    }
}

const ARTIFACT_HEADER: &str = "controller-design v1";

fn push_scalar(out: &mut String, name: &str, v: f64) {
    out.push_str(&format!("{name} {v:.17e}\n"));
}

fn push_opt_scalar(out: &mut String, name: &str, v: Option<f64>) {
    match v {
        Some(v) => push_scalar(out, name, v),
        None => out.push_str(&format!("{name} none\n")),
    }
}

fn push_matrix(out: &mut String, name: &str, m: &DMatrix<f64>) {
    out.push_str(&format!("matrix {name} {} {}\n", m.nrows(), m.ncols()));
    for r in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols()).map(|c| format!("{:.17e}", m[(r, c)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
}

fn push_opt_matrix(out: &mut String, name: &str, m: Option<&DMatrix<f64>>) {
    match m {
        Some(m) => push_matrix(out, name, m),
        None => out.push_str(&format!("matrix {name} none\n")),
    }
}

struct Cursor<'a> {
    lines: std::iter::Peekable<std::str::Lines<'a>>,
    line_no: usize,
}

impl<'a> Cursor<'a> {
    fn new(text: &'a str) -> Self {
        Cursor { lines: text.lines().peekable(), line_no: 0 }
    }

    fn next_line(&mut self) -> Result<&'a str, SynthesisError> {
        loop {
            let line = self
                .lines
                .next()
                .ok_or_else(|| SynthesisError::Artifact("unexpected end of artifact".into()))?;
            self.line_no += 1;
            let trimmed = line.trim();
            if !trimmed.is_empty() && !trimmed.starts_with('#') {
                return Ok(trimmed);
            }
        }
    }

    fn err(&self, msg: &str) -> SynthesisError {
        SynthesisError::Artifact(format!("line {}: {msg}", self.line_no))
    }

    fn scalar(&mut self, name: &str) -> Result<f64, SynthesisError> {
        let line = self.next_line()?;
        let mut it = line.split_whitespace();
        if it.next() != Some(name) {
            return Err(self.err(&format!("expected `{name}`")));
        }
        let v = it.next().ok_or_else(|| self.err("missing value"))?;
        v.parse::<f64>().map_err(|_| self.err(&format!("bad number `{v}`")))
    }

    fn opt_scalar(&mut self, name: &str) -> Result<Option<f64>, SynthesisError> {
        let line = self.next_line()?;
        let mut it = line.split_whitespace();
        if it.next() != Some(name) {
            return Err(self.err(&format!("expected `{name}`")));
        }
        match it.next() {
            Some("none") => Ok(None),
            Some(v) => {
                Ok(Some(v.parse::<f64>().map_err(|_| self.err(&format!("bad number `{v}`")))?))
            }
            None => Err(self.err("missing value")),
        }
    }

    fn matrix(&mut self, name: &str) -> Result<Option<DMatrix<f64>>, SynthesisError> {
        let line = self.next_line()?;
        let mut it = line.split_whitespace();
        if it.next() != Some("matrix") || it.next() != Some(name) {
            return Err(self.err(&format!("expected `matrix {name}`")));
        }
        let first = it.next().ok_or_else(|| self.err("missing dimensions"))?;
        if first == "none" {
            return Ok(None);
        }
        let rows: usize = first.parse().map_err(|_| self.err("bad row count"))?;
        let cols: usize = it
            .next()
            .ok_or_else(|| self.err("missing column count"))?
            .parse()
            .map_err(|_| self.err("bad column count"))?;
        let mut m = DMatrix::zeros(rows, cols);
        for r in 0..rows {
            let row = self.next_line()?;
            let mut vals = row.split_whitespace();
            for c in 0..cols {
                let v = vals.next().ok_or_else(|| self.err("short matrix row"))?;
                m[(r, c)] =
                    v.parse::<f64>().map_err(|_| self.err(&format!("bad number `{v}`")))?;
            }
            if vals.next().is_some() {
                return Err(self.err("long matrix row"));
            }
        }
        Ok(Some(m))
    }

    fn required_matrix(&mut self, name: &str) -> Result<DMatrix<f64>, SynthesisError> {
        self.matrix(name)?.ok_or_else(|| self.err(&format!("`{name}` is required")))
    }
}

impl ControllerDesign {
    /// Lossless decimal text rendering; numbers carry 18 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(ARTIFACT_HEADER);
        out.push('\n');
        out.push_str(&format!("mode {}\n", self.mode));
        push_scalar(&mut out, "gamma1_sq", self.gamma1_sq);
        push_scalar(&mut out, "gamma2_sq", self.gamma2_sq);
        push_opt_scalar(&mut out, "rho", self.rho);
        push_opt_scalar(&mut out, "phi", self.phi);
        push_opt_scalar(&mut out, "objective", self.objective);
        push_matrix(&mut out, "w", self.w.mat());
        push_matrix(&mut out, "x", self.x.mat());
        push_matrix(&mut out, "y", &self.y);
        push_opt_matrix(&mut out, "k_d", self.k_d.as_ref());
        let xi_m = self.xi.as_ref().map(|v| DMatrix::from_column_slice(v.len(), 1, v.as_slice()));
        push_opt_matrix(&mut out, "xi", xi_m.as_ref());
        push_matrix(&mut out, "m", self.m.mat());
        push_matrix(&mut out, "p_storage", self.p_storage.mat());
        push_matrix(&mut out, "a_cl", &self.a_cl);
        push_opt_matrix(&mut out, "b_cl", self.b_cl.as_ref());
        push_matrix(&mut out, "k_g", &self.k_g);
        let forcing_m = self
            .mean_forcing
            .as_ref()
            .map(|v| DMatrix::from_column_slice(v.len(), 1, v.as_slice()));
        push_opt_matrix(&mut out, "mean_forcing", forcing_m.as_ref());
        let d_bar_m =
            self.d_bar.as_ref().map(|v| DMatrix::from_column_slice(v.len(), 1, v.as_slice()));
        push_opt_matrix(&mut out, "d_bar", d_bar_m.as_ref());
        out.push_str(&format!("margins {}\n", self.margins.len()));
        for (name, eig) in &self.margins {
            out.push_str(&format!("{name} {eig:.17e}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, SynthesisError> {
        let mut cur = Cursor::new(text);
        let header = cur.next_line()?;
        if header != ARTIFACT_HEADER {
            return Err(cur.err("unrecognized artifact header"));
        }
        let mode_line = cur.next_line()?;
        let mut it = mode_line.split_whitespace();
        if it.next() != Some("mode") {
            return Err(cur.err("expected `mode`"));
        }
        let mode = it
            .next()
            .and_then(DesignMode::parse)
            .ok_or_else(|| cur.err("unknown design mode"))?;
        let gamma1_sq = cur.scalar("gamma1_sq")?;
        let gamma2_sq = cur.scalar("gamma2_sq")?;
        let rho = cur.opt_scalar("rho")?;
        let phi = cur.opt_scalar("phi")?;
        let objective = cur.opt_scalar("objective")?;
        let w = SymMatrix::from_average(&cur.required_matrix("w")?);
        let x = SymMatrix::from_average(&cur.required_matrix("x")?);
        let y = cur.required_matrix("y")?;
        let k_d = cur.matrix("k_d")?;
        let xi = cur.matrix("xi")?.map(|m| DVector::from_column_slice(m.as_slice()));
        let m = SymMatrix::from_average(&cur.required_matrix("m")?);
        let p_storage = SymMatrix::from_average(&cur.required_matrix("p_storage")?);
        let a_cl = cur.required_matrix("a_cl")?;
        let b_cl = cur.matrix("b_cl")?;
        let k_g = cur.required_matrix("k_g")?;
        let mean_forcing =
            cur.matrix("mean_forcing")?.map(|m| DVector::from_column_slice(m.as_slice()));
        let d_bar = cur.matrix("d_bar")?.map(|m| DVector::from_column_slice(m.as_slice()));
        let count_line = cur.next_line()?;
        let mut it = count_line.split_whitespace();
        if it.next() != Some("margins") {
            return Err(cur.err("expected `margins`"));
        }
        let count: usize = it
            .next()
            .ok_or_else(|| cur.err("missing margin count"))?
            .parse()
            .map_err(|_| cur.err("bad margin count"))?;
        let mut margins = Vec::with_capacity(count);
        for _ in 0..count {
            let line = cur.next_line()?;
            let mut it = line.split_whitespace();
            let name = it.next().ok_or_else(|| cur.err("missing margin name"))?.to_string();
            let eig = it
                .next()
                .ok_or_else(|| cur.err("missing margin value"))?
                .parse::<f64>()
                .map_err(|_| cur.err("bad margin value"))?;
            margins.push((name, eig));
        }
        let design = ControllerDesign {
            mode,
            w,
            x,
            y,
            k_d,
            xi,
            m,
            p_storage,
            a_cl,
            b_cl,
            k_g,
            gamma1_sq,
            gamma2_sq,
            rho,
            phi,
            mean_forcing,
            d_bar,
            objective,
            margins,
        };
        design.validate_shapes()?;
        Ok(design)
    }

    fn validate_shapes(&self) -> Result<(), SynthesisError> {
        let g = self.w.dim();
        let square = |name: &str, m: &DMatrix<f64>| {
            if m.nrows() != g || m.ncols() != g {
                Err(SynthesisError::Artifact(format!("`{name}` is not {g}x{g}")))
            } else {
                Ok(())
            }
        };
        square("x", self.x.mat())?;
        square("m", self.m.mat())?;
        square("p_storage", self.p_storage.mat())?;
        square("a_cl", &self.a_cl)?;
        if self.y.ncols() != g || self.k_g.ncols() != g {
            return Err(SynthesisError::Artifact("feedback gain width mismatch".into()));
        }
        match self.mode {
            DesignMode::General => {
                if self.b_cl.is_none() || self.k_d.is_none() {
                    return Err(SynthesisError::Artifact(
                        "general mode requires k_d and b_cl".into(),
                    ));
                }
            }
            DesignMode::ConstantMean => {
                if self.xi.is_none()
                    || self.d_bar.is_none()
                    || self.b_cl.is_none()
                    || self.mean_forcing.is_none()
                    || self.phi.is_none()
                {
                    return Err(SynthesisError::Artifact(
                        "constant-mean mode requires xi, d_bar, b_cl, mean_forcing, and phi"
                            .into(),
                    ));
                }
            }
            DesignMode::ZeroMean => {
                if self.b_cl.is_some() {
                    return Err(SynthesisError::Artifact(
                        "zero-mean mode carries no forcing map".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), SynthesisError> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, SynthesisError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text)
    }
}
