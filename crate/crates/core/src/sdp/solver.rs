//! Primal-dual interior-point solver for the conic programs.
//!
//! The program's constraints are affine PSD blocks S_l(x) = C_l + sum_k x_k
//! A_{l,k} >= 0, optionally with a linear objective c' x to minimize. This is
//! the dual standard form of semidefinite programming,
//!
//! ```text
//! maximize   b' y                      b = -c, y = x
//! subject to S_l = C_l - sum_k y_k Abar_{l,k} >= 0,   Abar_{l,k} = -A_{l,k}
//! ```
//!
//! solved with the HKM predictor-corrector method: at each iteration the
//! Schur complement M_ij = sum_l tr(Abar_i X Abar_j S^{-1}) (symmetric
//! positive definite on the central path) is assembled from the sparse
//! coefficient nonzeros, and the search direction follows from
//!
//! ```text
//! M dy = b - nu A(S^{-1}) + A((X R_D + dX_aff dS_aff) S^{-1})
//! dS   = R_D - A*(dy)
//! dX   = nu S^{-1} - X - (X dS + dX_aff dS_aff) S^{-1}   (symmetrized)
//! ```
//!
//! with R_D = C - A*(y) - S, nu = sigma mu, sigma = (mu_aff / mu)^3, and
//! A(V)_i = sum_l tr(Abar_{l,i} V_l) the constraint map.
//!
//! Feasibility problems are solved by slack maximization: every block is
//! augmented to S_l(x) - t I >= 0 together with the cap t <= 1, and t is
//! maximized. The augmented problem is always strictly feasible, and the
//! original system is feasible exactly when the optimal t is positive.
//! Regardless of the solver path, the returned status is decided by direct
//! eigenvalue re-verification of every block at the returned point.
//!
//! Infeasibility is additionally certified through weak duality: at any
//! iterate whose primal residual b - A(X) is small, the dual objective C.X
//! upper-bounds the achievable slack, so a negative bound proves the original
//! system infeasible even when the iteration stops short of full convergence.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::numerics::eigen_sym_desc;

use super::program::{Assignment, CompiledBlock, ConicProgram, SdpError, Triplet};

/// Default eigenvalue tolerance when classifying a point as feasible.
pub const FEAS_TOL: f64 = 1e-8;
/// Default iteration cap per interior-point run.
pub const MAX_ITERATIONS: usize = 200;
/// Relative tolerance on residuals and duality gap.
const CONV_TOL: f64 = 1e-9;
/// Fraction of the step to the cone boundary actually taken.
const STEP_FRAC: f64 = 0.98;
/// Stall declared after this many iterations without complementarity progress.
const STALL_LIMIT: usize = 12;
/// Primal residual below which the dual objective counts as a certified
/// bound on the optimum.
const CERT_RESIDUAL: f64 = 1e-7;

/// Solver knobs.
#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Eigenvalue margin above which a point counts as feasible.
    pub feas_tol: f64,
    /// Iteration cap per interior-point run.
    pub max_iterations: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions { feas_tol: FEAS_TOL, max_iterations: MAX_ITERATIONS }
    }
}

/// Outcome classification of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    /// Returned point satisfies every block to the feasibility tolerance.
    Feasible,
    /// Slack maximization converged to a negative optimal margin, or weak
    /// duality certified a negative upper bound on that margin.
    Infeasible,
    /// Iteration cap or stall before the status could be certified.
    MaxIterations,
}

/// Solution returned by [`solve`].
#[derive(Debug, Clone)]
pub struct ConicSolution {
    pub assignment: Assignment,
    pub status: SolveStatus,
    /// Smallest eigenvalue across all blocks, from direct re-verification.
    pub min_eig_margin: f64,
    /// Objective value at the returned point, when an objective is set.
    pub objective_value: Option<f64>,
    pub iterations: usize,
    /// Optimal uniform slack from the feasibility phase, when it ran.
    pub phase1_margin: Option<f64>,
}

struct IpmResult {
    y: DVector<f64>,
    iterations: usize,
    converged: bool,
    /// Smallest dual objective C.X seen at an iterate with primal residual
    /// below `CERT_RESIDUAL`: a certified upper bound on the optimal b'y.
    upper_cert: Option<f64>,
}

/// Solves the program: slack maximization when no objective is set, a
/// feasibility phase followed by objective minimization otherwise.
pub fn solve(prog: &ConicProgram, opts: &SolveOptions) -> Result<ConicSolution, SdpError> {
    let nvar = prog.scalar_len();
    if prog.blocks.is_empty() {
        let assignment = prog.assignment_from_scalars(vec![0.0; nvar]);
        let objective_value = prog.objective_value(&assignment);
        return Ok(ConicSolution {
            assignment,
            status: SolveStatus::Feasible,
            min_eig_margin: f64::INFINITY,
            objective_value,
            iterations: 0,
            phase1_margin: None,
        });
    }

    // Phase 1: maximize the uniform slack t with cap t <= 1.
    let (aug_blocks, t_index) = augment_with_slack(&prog.blocks, nvar);
    let mut b1 = DVector::zeros(nvar + 1);
    b1[t_index] = 1.0;
    let p1 = run_ipm(&aug_blocks, nvar + 1, &b1, opts.max_iterations)?;
    let x1: Vec<f64> = p1.y.as_slice()[..nvar].to_vec();
    let t_star = p1.y[t_index];
    let asn1 = prog.assignment_from_scalars(x1);
    let margin1 = prog.margin(&asn1);

    // A certified upper bound on the optimal slack that is clearly negative
    // proves infeasibility even when the iteration stopped early.
    let bound_cut = -(10.0 * opts.feas_tol).max(1e-6);
    let phase1_status = if margin1 >= -opts.feas_tol {
        SolveStatus::Feasible
    } else if p1.converged || p1.upper_cert.is_some_and(|u| u < bound_cut) {
        SolveStatus::Infeasible
    } else {
        SolveStatus::MaxIterations
    };

    let has_objective = prog.objective.is_some();
    if !has_objective || phase1_status != SolveStatus::Feasible {
        let objective_value =
            if phase1_status == SolveStatus::Feasible { prog.objective_value(&asn1) } else { None };
        return Ok(ConicSolution {
            assignment: asn1,
            status: phase1_status,
            min_eig_margin: margin1,
            objective_value,
            iterations: p1.iterations,
            phase1_margin: Some(t_star),
        });
    }

    // Phase 2: minimize the objective over the verified-feasible system.
    let c = prog.objective.as_ref().expect("objective checked above");
    let b2 = -DVector::from_column_slice(c);
    let p2 = run_ipm(&prog.blocks, nvar, &b2, opts.max_iterations)?;
    let asn2 = prog.assignment_from_scalars(p2.y.as_slice().to_vec());
    let margin2 = prog.margin(&asn2);
    let iterations = p1.iterations + p2.iterations;
    if margin2 >= -opts.feas_tol {
        let objective_value = prog.objective_value(&asn2);
        Ok(ConicSolution {
            assignment: asn2,
            status: SolveStatus::Feasible,
            min_eig_margin: margin2,
            objective_value,
            iterations,
            phase1_margin: Some(t_star),
        })
    } else {
        // Keep the certified phase-1 point rather than an uncertified
        // minimizer; the caller sees the failure through the status.
        Ok(ConicSolution {
            assignment: asn1,
            status: SolveStatus::MaxIterations,
            min_eig_margin: margin1,
            objective_value: None,
            iterations,
            phase1_margin: Some(t_star),
        })
    }
}

/// Appends the slack variable: every block gains -t I, plus the cap 1 - t >= 0.
fn augment_with_slack(blocks: &[CompiledBlock], nvar: usize) -> (Vec<CompiledBlock>, usize) {
    let t_index = nvar;
    let mut out = Vec::with_capacity(blocks.len() + 1);
    for b in blocks {
        let mut nb = b.clone();
        let eye: Vec<Triplet> =
            (0..b.dim as u32).map(|i| Triplet { r: i, c: i, v: -1.0 }).collect();
        nb.terms.push((t_index, eye));
        out.push(nb);
    }
    out.push(CompiledBlock {
        name: "slack-cap".into(),
        dim: 1,
        constant: DMatrix::from_element(1, 1, 1.0),
        terms: vec![(t_index, vec![Triplet { r: 0, c: 0, v: -1.0 }])],
    });
    (out, t_index)
}

/// One HKM predictor-corrector run on `maximize b' y` over the given blocks.
fn run_ipm(
    blocks: &[CompiledBlock],
    nvar: usize,
    b: &DVector<f64>,
    max_iterations: usize,
) -> Result<IpmResult, SdpError> {
    let nblk = blocks.len();
    let total_dim: usize = blocks.iter().map(|b| b.dim).sum();

    // Initial scale keeps X and S comparable to the data magnitude.
    let mut omega: f64 = 10.0;
    for blk in blocks {
        omega = omega.max(blk.constant.norm());
        for (_, trips) in &blk.terms {
            let f: f64 = trips.iter().map(|t| t.v * t.v).sum::<f64>().sqrt();
            omega = omega.max(f);
        }
    }

    let mut x_mats: Vec<DMatrix<f64>> =
        blocks.iter().map(|b| DMatrix::identity(b.dim, b.dim) * omega).collect();
    let mut s_mats: Vec<DMatrix<f64>> = x_mats.clone();
    let mut y: DVector<f64> = DVector::zeros(nvar);

    let c_norm: f64 = blocks.iter().map(|b| b.constant.norm_squared()).sum::<f64>().sqrt();
    let b_norm = b.norm();

    let mut iterations = 0;
    let mut converged = false;
    let mut stall = 0usize;
    let mut last_mu = f64::INFINITY;
    let mut upper_cert: Option<f64> = None;

    for it in 1..=max_iterations {
        iterations = it;

        // Roundoff can push an iterate off the cone after aggressive steps;
        // stop at the previous point and let verification decide the status.
        let Some(s_chol) = factor_all(&s_mats) else { break };
        let Some(x_chol) = factor_all(&x_mats) else { break };
        let s_inv: Vec<DMatrix<f64>> = s_chol.iter().map(|c| c.inverse()).collect();

        // Residuals: R_D = C - A*(y) - S (coefficient signs baked in),
        // r_p = b - A(X).
        let mut r_d: Vec<DMatrix<f64>> = Vec::with_capacity(nblk);
        for (l, blk) in blocks.iter().enumerate() {
            let mut m = blk.constant.clone();
            for (k, trips) in &blk.terms {
                let yk = y[*k];
                if yk != 0.0 {
                    for t in trips {
                        m[(t.r as usize, t.c as usize)] += yk * t.v;
                    }
                }
            }
            m -= &s_mats[l];
            r_d.push(m);
        }
        let r_p = b - op_adjoint(blocks, &x_mats, nvar);

        let mu: f64 =
            x_mats.iter().zip(&s_mats).map(|(x, s)| x.dot(s)).sum::<f64>() / total_dim as f64;
        let p_err = r_p.norm() / (1.0 + b_norm);
        let d_err = r_d.iter().map(|m| m.norm()).fold(0.0f64, f64::max) / (1.0 + c_norm);
        let pobj: f64 = blocks.iter().zip(&x_mats).map(|(blk, x)| blk.constant.dot(x)).sum();
        let dobj = b.dot(&y);
        let gap = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());

        if p_err <= CERT_RESIDUAL {
            upper_cert = Some(upper_cert.map_or(pobj, |u| u.min(pobj)));
        }

        if p_err < CONV_TOL && d_err < CONV_TOL && gap < CONV_TOL {
            converged = true;
            break;
        }
        if mu > 0.98 * last_mu && p_err < 1e-7 && d_err < 1e-7 {
            stall += 1;
            if stall >= STALL_LIMIT {
                converged = gap < 1e-7;
                break;
            }
        } else {
            stall = 0;
        }
        last_mu = mu;

        // Schur complement M_ij = sum_l tr(A_i X A_j S^{-1}).
        let m_schur = build_schur(blocks, &x_mats, &s_inv, nvar);
        let m_fact = factor_schur(m_schur)?;

        // Predictor: nu = 0.
        let rhs_aff = {
            let mut g: Vec<DMatrix<f64>> = Vec::with_capacity(nblk);
            for l in 0..nblk {
                g.push(&x_mats[l] * &r_d[l] * &s_inv[l]);
            }
            b + op_adjoint(blocks, &g, nvar)
        };
        let dy_aff = m_fact.solve(&rhs_aff);
        let ds_aff = ds_from_dy(blocks, &r_d, &dy_aff);
        let mut dx_aff: Vec<DMatrix<f64>> = Vec::with_capacity(nblk);
        for l in 0..nblk {
            let m = -&x_mats[l] - (&x_mats[l] * &ds_aff[l]) * &s_inv[l];
            dx_aff.push(symmetric_part(&m));
        }

        let alpha_aff = step_length(&x_chol, &dx_aff).min(1.0);
        let beta_aff = step_length(&s_chol, &ds_aff).min(1.0);
        let mu_aff: f64 = x_mats
            .iter()
            .zip(&dx_aff)
            .zip(s_mats.iter().zip(&ds_aff))
            .map(|((x, dx), (s, ds))| (x + dx * alpha_aff).dot(&(s + ds * beta_aff)))
            .sum::<f64>()
            .max(0.0)
            / total_dim as f64;
        let sigma = ((mu_aff / mu).powi(3)).clamp(0.0, 1.0);
        let nu = sigma * mu;

        // Corrector.
        let rhs = {
            let mut g: Vec<DMatrix<f64>> = Vec::with_capacity(nblk);
            for l in 0..nblk {
                let inner = &x_mats[l] * &r_d[l] + &dx_aff[l] * &ds_aff[l];
                g.push(inner * &s_inv[l]);
            }
            let mut rhs = b + op_adjoint(blocks, &g, nvar);
            let s_inv_vec = op_adjoint(blocks, &s_inv, nvar);
            rhs.axpy(-nu, &s_inv_vec, 1.0);
            rhs
        };
        let dy = m_fact.solve(&rhs);
        let ds = ds_from_dy(blocks, &r_d, &dy);
        let mut dx: Vec<DMatrix<f64>> = Vec::with_capacity(nblk);
        for l in 0..nblk {
            let m = &s_inv[l] * nu
                - &x_mats[l]
                - (&x_mats[l] * &ds[l] + &dx_aff[l] * &ds_aff[l]) * &s_inv[l];
            dx.push(symmetric_part(&m));
        }

        let alpha = (STEP_FRAC * step_length(&x_chol, &dx)).min(1.0);
        let beta = (STEP_FRAC * step_length(&s_chol, &ds)).min(1.0);

        for l in 0..nblk {
            x_mats[l] += &dx[l] * alpha;
            x_mats[l] = symmetric_part(&x_mats[l]);
            s_mats[l] += &ds[l] * beta;
            s_mats[l] = symmetric_part(&s_mats[l]);
        }
        y.axpy(beta, &dy, 1.0);

        // Diverging multipliers signal an ill-posed phase; bail out and let
        // verification decide the status.
        if y.norm() > 1e12 * (1.0 + omega) {
            break;
        }
    }

    Ok(IpmResult { y, iterations, converged, upper_cert })
}

fn factor_all(mats: &[DMatrix<f64>]) -> Option<Vec<Cholesky<f64, Dyn>>> {
    mats.iter().map(|m| Cholesky::new(m.clone())).collect()
}

fn symmetric_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Constraint map A(V)_k = sum_l tr(Abar_{l,k} V_l) = -sum_l tr(A_{l,k} V_l).
fn op_adjoint(blocks: &[CompiledBlock], mats: &[DMatrix<f64>], nvar: usize) -> DVector<f64> {
    let mut out = DVector::zeros(nvar);
    for (blk, v) in blocks.iter().zip(mats) {
        for (k, trips) in &blk.terms {
            let mut acc = 0.0;
            for t in trips {
                acc += t.v * v[(t.r as usize, t.c as usize)];
            }
            out[*k] -= acc;
        }
    }
    out
}

/// dS = R_D - A*(dy), with A*(dy)_l = -sum_k dy_k A_{l,k}.
fn ds_from_dy(
    blocks: &[CompiledBlock],
    r_d: &[DMatrix<f64>],
    dy: &DVector<f64>,
) -> Vec<DMatrix<f64>> {
    let mut out: Vec<DMatrix<f64>> = r_d.to_vec();
    for (l, blk) in blocks.iter().enumerate() {
        for (k, trips) in &blk.terms {
            let c = dy[*k];
            if c != 0.0 {
                for t in trips {
                    out[l][(t.r as usize, t.c as usize)] += c * t.v;
                }
            }
        }
    }
    out
}

/// M_ij = sum_l tr(A_i X A_j S^{-1}); the coefficient signs cancel pairwise.
fn build_schur(
    blocks: &[CompiledBlock],
    x_mats: &[DMatrix<f64>],
    s_inv: &[DMatrix<f64>],
    nvar: usize,
) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(nvar, nvar);
    for (l, blk) in blocks.iter().enumerate() {
        let n = blk.dim;
        let x = &x_mats[l];
        let sv = &s_inv[l];
        for (jj, (kj, trips_j)) in blk.terms.iter().enumerate() {
            // T_j = X A_j S^{-1} accumulated from rank-one contributions.
            let mut t_j = DMatrix::zeros(n, n);
            for t in trips_j {
                let xr = x.column(t.r as usize);
                for bcol in 0..n {
                    let s = t.v * sv[(t.c as usize, bcol)];
                    if s != 0.0 {
                        t_j.column_mut(bcol).axpy(s, &xr, 1.0);
                    }
                }
            }
            for (ki, trips_i) in blk.terms.iter().take(jj + 1) {
                let mut acc = 0.0;
                for t in trips_i {
                    acc += t.v * t_j[(t.c as usize, t.r as usize)];
                }
                let (lo, hi) = if ki <= kj { (*ki, *kj) } else { (*kj, *ki) };
                m[(lo, hi)] += acc;
            }
        }
    }
    for i in 0..nvar {
        for j in 0..i {
            m[(i, j)] = m[(j, i)];
        }
    }
    m
}

struct SchurFactor {
    chol: Cholesky<f64, Dyn>,
}

impl SchurFactor {
    fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }
}

/// Cholesky with an escalating ridge for nearly singular Schur systems.
fn factor_schur(m: DMatrix<f64>) -> Result<SchurFactor, SdpError> {
    let n = m.nrows();
    let mean_diag = (m.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
    let mut ridge = 0.0;
    loop {
        let attempt = if ridge == 0.0 {
            m.clone()
        } else {
            &m + DMatrix::identity(n, n) * (ridge * mean_diag)
        };
        if let Some(c) = Cholesky::new(attempt) {
            return Ok(SchurFactor { chol: c });
        }
        ridge = if ridge == 0.0 { 1e-12 } else { ridge * 100.0 };
        if ridge > 1e-2 {
            return Err(SdpError::Factorization(
                "Schur complement is numerically singular".into(),
            ));
        }
    }
}

/// Largest step keeping every block inside the cone: min over blocks of
/// -1/lambda_min(L^{-1} D L^{-T}) over negative curvature, else effectively
/// unbounded.
fn step_length(chols: &[Cholesky<f64, Dyn>], deltas: &[DMatrix<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for (chol, delta) in chols.iter().zip(deltas) {
        let l = chol.l();
        let z = l.solve_lower_triangular(delta).expect("Cholesky factor is nonsingular");
        let zt = z.transpose();
        let b = l
            .solve_lower_triangular(&zt)
            .expect("Cholesky factor is nonsingular")
            .transpose();
        let sym = symmetric_part(&b);
        let lam_min = eigen_sym_desc(&sym).0.min();
        if lam_min < -1e-13 {
            best = best.min(-1.0 / lam_min);
        }
    }
    best.min(1.0e8)
}
