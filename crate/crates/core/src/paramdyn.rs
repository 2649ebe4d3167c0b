//! Transition structure of the window parameterizer.
//!
//! A behavior basis `F` maps parameter vectors to stacked windows, `w = F g`.
//! Sliding the window one step forward constrains the new parameter `g_k`
//! through two requirements: the first `L` steps of the new window must equal
//! the last `L` steps of the old one, and the disturbance slot of the new
//! step is pinned to the realized `d_k`. Solving those constraints splits the
//! parameter update into
//!
//! ```text
//! g_k = F_p g_{k-1} + F_f d_k + F_z z_k
//! ```
//!
//! where `F_p` propagates the shared past, `F_f` injects the disturbance, and
//! `F_z` spans the residual freedom. That freedom has dimension `m` and is in
//! one-to-one correspondence with the input of the underlying system, which
//! makes `z_k` the virtual control handle: choosing `z_k` selects `u_k`
//! through the invertible map `Pi_u F F_z`.
//!
//! The same split yields the coefficients of the one-step estimation-error
//! recursion. With `E_u = F_z (Pi_u F F_z)^{-1}` and the oblique projector
//! `I - E_u Pi_u F`, the matrices
//!
//! ```text
//! E_p = (I - E_u Pi_u F) F_p      E_f = (I - E_u Pi_u F) F_f
//! ```
//!
//! annihilate under `Pi_u F`, while `Pi_u F E_u = I`. Consequently an error
//! in the parameter estimate perturbs the applied input only through `E_u`,
//! and `E_p`, `E_f` govern the part of the error the input cannot see.
//!
//! The freedom dimension is `m` by construction, so `F_z` is always the `m`
//! trailing right-singular directions of the constraint. A basis built from
//! an exact kernel annihilates them to machine precision; a basis learned
//! from noisy data only approximately, and the worst annihilation residual is
//! recorded as `kernel_residual`. The split is rejected when the smallest
//! retained constraint singular value fails to clear the residual by
//! `KERNEL_GAP_MIN`, since the freedom directions are then indistinguishable
//! from genuine constraints.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::behavior::BehaviorBasis;
use crate::numerics::{self, NumericsError};

/// Condition-number ceiling for the virtual-control map Pi_u F F_z.
pub const CONTROL_COND_MAX: f64 = 1e8;
/// Residual ceiling for the algebraic identities validated after decomposition.
pub const IDENTITY_TOL: f64 = 1e-9;
/// Minimum ratio between the smallest retained constraint singular value and
/// the kernel residual for an unambiguous constraint/freedom split.
pub const KERNEL_GAP_MIN: f64 = 10.0;

/// Errors from the parameterizer-dynamics decomposition.
#[derive(Debug, Error)]
pub enum ParamDynError {
    /// The stacked constraint [F_wp; F_dk] does not leave exactly m degrees
    /// of freedom, so the basis cannot describe a system with m inputs.
    #[error("constraint null space has dimension {got}, expected the input dimension {expected}")]
    NullSpaceDim { expected: usize, got: usize },
    /// The m trailing singular values of [F_wp; F_dk] are not separated from
    /// the retained ones, so the freedom directions cannot be told apart from
    /// genuine constraints.
    #[error(
        "constraint/freedom split is ambiguous: smallest retained singular value {constrained:.3e} \
         is within a factor {gap_min:.0} of the kernel residual {residual:.3e}"
    )]
    KernelGap { constrained: f64, residual: f64, gap_min: f64 },
    /// Pi_u F F_z is numerically singular; the virtual control cannot reach
    /// every input value.
    #[error("virtual-control map has condition number {cond:.3e}, exceeding {max:.1e}")]
    IllConditioned { cond: f64, max: f64 },
    /// A defining identity of the decomposition failed to hold numerically.
    #[error("decomposition identity `{name}` violated with residual {residual:.3e}")]
    Identity { name: &'static str, residual: f64 },
    #[error("sequence lengths differ: {lhs} disturbances vs {rhs} virtual controls")]
    LengthMismatch { lhs: usize, rhs: usize },
    #[error("dimension mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Transition and error coefficients derived from one behavior basis.
#[derive(Debug, Clone)]
pub struct ParamDynamics {
    basis: BehaviorBasis,
    f_p: DMatrix<f64>,
    f_f: DMatrix<f64>,
    f_z: DMatrix<f64>,
    e_p: DMatrix<f64>,
    e_f: DMatrix<f64>,
    e_u: DMatrix<f64>,
    control_cond: f64,
    kernel_residual: f64,
}

impl ParamDynamics {
    pub fn basis(&self) -> &BehaviorBasis {
        &self.basis
    }

    /// Past-propagation coefficient, g_dim x g_dim.
    pub fn f_p(&self) -> &DMatrix<f64> {
        &self.f_p
    }

    /// Disturbance-injection coefficient, g_dim x q.
    pub fn f_f(&self) -> &DMatrix<f64> {
        &self.f_f
    }

    /// Orthonormal basis of the residual freedom, g_dim x m.
    pub fn f_z(&self) -> &DMatrix<f64> {
        &self.f_z
    }

    /// Error propagation coefficient annihilated by Pi_u F.
    pub fn e_p(&self) -> &DMatrix<f64> {
        &self.e_p
    }

    /// Disturbance-error coefficient annihilated by Pi_u F.
    pub fn e_f(&self) -> &DMatrix<f64> {
        &self.e_f
    }

    /// Input-error coefficient with Pi_u F E_u = I.
    pub fn e_u(&self) -> &DMatrix<f64> {
        &self.e_u
    }

    /// Condition number of Pi_u F F_z observed during the decomposition.
    pub fn control_cond(&self) -> f64 {
        self.control_cond
    }

    /// Largest singular value of [F_wp; F_dk] F_z: how far the freedom
    /// directions are from annihilating the shift constraints. Near machine
    /// precision for exact bases, on the order of the estimation error for
    /// learned ones.
    pub fn kernel_residual(&self) -> f64 {
        self.kernel_residual
    }

    /// One parameter transition g_k = F_p g + F_f d + F_z z.
    pub fn step(
        &self,
        g: &DVector<f64>,
        d: &DVector<f64>,
        z: &DVector<f64>,
    ) -> Result<DVector<f64>, ParamDynError> {
        let layout = self.basis.layout();
        if g.len() != layout.g_dim() || d.len() != layout.q || z.len() != layout.m {
            return Err(ParamDynError::Shape(format!(
                "step expects (g, d, z) of lengths ({}, {}, {}), got ({}, {}, {})",
                layout.g_dim(),
                layout.q,
                layout.m,
                g.len(),
                d.len(),
                z.len()
            )));
        }
        Ok(&self.f_p * g + &self.f_f * d + &self.f_z * z)
    }
}

/// Splits the window-shift constraints of a behavior basis into the
/// transition coefficients (F_p, F_f, F_z) and the prior-error coefficients
/// (E_p, E_f, E_u).
///
/// The constraint matrix is [F_wp; F_dk]: F_z is the m trailing
/// right-singular directions (the null space when the basis is exact), and
/// the rank-(g_dim - m) truncated pseudoinverse applied to [Pi_p F; 0] and
/// [0; I_q] gives F_p and F_f. Truncation keeps F_p and F_f orthogonal to
/// the freedom directions, where the homogeneous term lives.
pub fn decompose(basis: &BehaviorBasis) -> Result<ParamDynamics, ParamDynError> {
    let layout = *basis.layout();
    let g = layout.g_dim();
    let (m, q) = (layout.m, layout.q);

    let f_wp = basis.prefix_rows();
    let f_dk = basis.disturbance_rows();
    let past_rows = f_wp.nrows();
    let mut stacked = DMatrix::zeros(past_rows + q, g);
    stacked.rows_mut(0, past_rows).copy_from(&f_wp);
    stacked.rows_mut(past_rows, q).copy_from(&f_dk);

    // Eigendecomposition of the Gram matrix doubles as an SVD of `stacked`
    // that always yields all g right-singular directions, even when the
    // constraint matrix is wide.
    let gram = stacked.transpose() * &stacked;
    let (gram_vals, gram_vecs) = numerics::eigen_sym_desc(&gram);
    let singulars: Vec<f64> = gram_vals.iter().map(|l| l.max(0.0).sqrt()).collect();
    let cut = numerics::RANK_TOL * singulars[0].max(f64::MIN_POSITIVE);
    let vanished = singulars.iter().filter(|s| **s <= cut).count();
    if vanished > m {
        return Err(ParamDynError::NullSpaceDim { expected: m, got: vanished });
    }
    let residual = singulars[g - m];
    let constrained = singulars[g - m - 1];
    if constrained <= KERNEL_GAP_MIN * residual {
        return Err(ParamDynError::KernelGap {
            constrained,
            residual,
            gap_min: KERNEL_GAP_MIN,
        });
    }
    let f_z = numerics::orthonormalize(&gram_vecs.columns(g - m, m).into_owned())?;

    let retained = gram_vecs.columns(0, g - m);
    let inv_vals =
        DVector::from_iterator(g - m, gram_vals.iter().take(g - m).map(|l| 1.0 / l));
    let stacked_pinv =
        &retained * DMatrix::from_diagonal(&inv_vals) * retained.transpose() * stacked.transpose();
    let suffix = basis.suffix_rows();
    let mut rhs_p = DMatrix::zeros(past_rows + q, g);
    rhs_p.rows_mut(0, past_rows).copy_from(&suffix);
    let f_p = &stacked_pinv * rhs_p;
    let mut rhs_f = DMatrix::zeros(past_rows + q, q);
    rhs_f.rows_mut(past_rows, q).copy_from(&DMatrix::identity(q, q));
    let f_f = &stacked_pinv * rhs_f;

    let pi_u = basis.input_rows();
    let control_map = &pi_u * &f_z;
    let svd = control_map.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    let control_cond = if smin > 0.0 { smax / smin } else { f64::INFINITY };
    if !control_cond.is_finite() || control_cond > CONTROL_COND_MAX {
        return Err(ParamDynError::IllConditioned { cond: control_cond, max: CONTROL_COND_MAX });
    }
    let control_inv = control_map
        .clone()
        .lu()
        .try_inverse()
        .ok_or(ParamDynError::IllConditioned { cond: control_cond, max: CONTROL_COND_MAX })?;

    let e_u = &f_z * control_inv;
    let e_p = &f_p - &e_u * (&pi_u * &f_p);
    let e_f = &f_f - &e_u * (&pi_u * &f_f);

    let checks: [(&'static str, f64); 4] = [
        ("F_z orthonormal", (f_z.transpose() * &f_z - DMatrix::identity(m, m)).abs().max()),
        ("Pi_u F E_u = I", (&pi_u * &e_u - DMatrix::identity(m, m)).abs().max()),
        ("Pi_u F E_p = 0", (&pi_u * &e_p).abs().max()),
        ("Pi_u F E_f = 0", (&pi_u * &e_f).abs().max()),
    ];
    for (name, value) in checks {
        if value.is_nan() || value > IDENTITY_TOL {
            return Err(ParamDynError::Identity { name, residual: value });
        }
    }

    Ok(ParamDynamics {
        basis: basis.clone(),
        f_p,
        f_f,
        f_z,
        e_p,
        e_f,
        e_u,
        control_cond,
        kernel_residual: residual,
    })
}

/// Iterates the parameter transition over paired disturbance and
/// virtual-control sequences, returning g_1, ..., g_n.
pub fn simulate_parameterizer(
    dynamics: &ParamDynamics,
    g0: &DVector<f64>,
    d_seq: &[DVector<f64>],
    z_seq: &[DVector<f64>],
) -> Result<Vec<DVector<f64>>, ParamDynError> {
    if d_seq.len() != z_seq.len() {
        return Err(ParamDynError::LengthMismatch { lhs: d_seq.len(), rhs: z_seq.len() });
    }
    let mut g = g0.clone();
    let mut out = Vec::with_capacity(d_seq.len());
    for (d, z) in d_seq.iter().zip(z_seq) {
        g = dynamics.step(&g, d, z)?;
        out.push(g.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::behavior::{exact_basis_from_kernel, SignalLayout};
    use crate::simulator::kernel::{KernelModel, KernelPlant};
    use rand::rngs::StdRng;
    use rand::{RngExt, SeedableRng};
    use rand_distr::StandardNormal;

    fn integrator_model() -> KernelModel {
        KernelModel::new(
            vec![DMatrix::identity(1, 1), DMatrix::from_element(1, 1, -1.0)],
            vec![DMatrix::from_element(1, 1, -1.0), DMatrix::zeros(1, 1)],
            vec![],
        )
        .unwrap()
    }

    // y_k = 0.5 y_{k-1} + u_k + 0.3 u_{k-1} + d_k - 0.2 d_{k-1}.
    fn disturbed_model() -> KernelModel {
        KernelModel::new(
            vec![DMatrix::identity(1, 1), DMatrix::from_element(1, 1, -0.5)],
            vec![DMatrix::from_element(1, 1, -1.0), DMatrix::from_element(1, 1, -0.3)],
            vec![DMatrix::from_element(1, 1, -1.0), DMatrix::from_element(1, 1, 0.2)],
        )
        .unwrap()
    }

    fn disturbed_dynamics() -> ParamDynamics {
        let layout = SignalLayout::new(1, 1, 1, 3, 1).unwrap();
        let basis = exact_basis_from_kernel(&disturbed_model(), &layout).unwrap();
        decompose(&basis).unwrap()
    }

    fn randn_vec(rng: &mut StdRng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    #[test]
    fn integrator_error_coefficients_satisfy_control_identities() {
        let layout = SignalLayout::new(1, 1, 0, 1, 1).unwrap();
        let basis = exact_basis_from_kernel(&integrator_model(), &layout).unwrap();
        let dynamics = decompose(&basis).unwrap();
        let pi_u = basis.input_rows();
        assert!((pi_u.clone() * dynamics.e_u() - DMatrix::identity(1, 1)).abs().max() < 1e-10);
        assert!((pi_u.clone() * dynamics.e_p()).abs().max() < 1e-10);
        assert_eq!(dynamics.f_f().ncols(), 0);
        assert_eq!(dynamics.f_z().ncols(), 1);
        assert!(dynamics.control_cond() >= 1.0);
        assert!(dynamics.kernel_residual() < 1e-9);
    }

    #[test]
    fn perturbed_basis_decomposes_with_reported_kernel_residual() {
        let layout = SignalLayout::new(1, 1, 1, 3, 1).unwrap();
        let exact = exact_basis_from_kernel(&disturbed_model(), &layout).unwrap();
        let mut rng = StdRng::seed_from_u64(13);
        let noise = DMatrix::from_fn(exact.f().nrows(), exact.f().ncols(), |_, _| {
            1e-4 * rng.sample::<f64, _>(StandardNormal)
        });
        let f = numerics::orthonormalize(&(exact.f() + noise)).unwrap();
        let basis = BehaviorBasis::new(layout, f).unwrap();
        let dynamics = decompose(&basis).unwrap();

        // The perturbation leaves a visible but small annihilation residual.
        assert!(dynamics.kernel_residual() > 1e-12);
        assert!(dynamics.kernel_residual() < 1e-2);

        // Construction identities are exact regardless of the perturbation.
        let pi_u = basis.input_rows();
        assert!((pi_u.clone() * dynamics.e_u() - DMatrix::identity(1, 1)).abs().max() < 1e-9);
        assert!((pi_u * dynamics.e_p()).abs().max() < 1e-9);
        assert!((dynamics.f_z().transpose() * dynamics.f_p()).abs().max() < 1e-9);
        assert!((dynamics.f_z().transpose() * dynamics.f_f()).abs().max() < 1e-9);
    }

    #[test]
    fn exact_basis_leaves_no_kernel_residual() {
        let dynamics = disturbed_dynamics();
        assert!(dynamics.kernel_residual() < 1e-12);
        let basis = dynamics.basis();
        assert!((basis.prefix_rows() * dynamics.f_z()).abs().max() < 1e-10);
        assert!((basis.disturbance_rows() * dynamics.f_z()).abs().max() < 1e-10);
    }

    #[test]
    fn one_step_window_extends_the_past_and_pins_the_disturbance() {
        let dynamics = disturbed_dynamics();
        let basis = dynamics.basis();
        let layout = *basis.layout();
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..20 {
            let g = randn_vec(&mut rng, layout.g_dim());
            let d = randn_vec(&mut rng, layout.q);
            let z = randn_vec(&mut rng, layout.m);
            let g_next = dynamics.step(&g, &d, &z).unwrap();
            let window = basis.f() * &g_next;
            let prefix = window.rows(0, layout.lag * layout.w_dim()).into_owned();
            let expected_past = basis.suffix_rows() * &g;
            let past_err = (prefix - expected_past).abs().max();
            assert!(past_err < 1e-9, "past residual {past_err:.3e}");
            let step = layout.window_step(&window);
            let (_, _, d_slot) = layout.split_step(&step);
            let d_err = (d_slot - d).abs().max();
            assert!(d_err < 1e-9, "disturbance residual {d_err:.3e}");
        }
    }

    #[test]
    fn woven_windows_form_one_kernel_trajectory() {
        let dynamics = disturbed_dynamics();
        let basis = dynamics.basis();
        let layout = *basis.layout();
        let model = disturbed_model();
        let w = layout.w_dim();

        // Seed the parameter with a genuine plant window.
        let mut plant = KernelPlant::new(model.clone());
        let mut rng = StdRng::seed_from_u64(77);
        let mut steps = Vec::new();
        for _ in 0..=layout.lag {
            let u = randn_vec(&mut rng, 1);
            let d = randn_vec(&mut rng, 1);
            let y = plant.step(&u, &d);
            steps.push(DVector::from_vec(vec![y[0], u[0], d[0]]));
        }
        let window0 = DVector::from_iterator(w * steps.len(), steps.iter().flat_map(|s| s.iter().copied()));
        assert!(basis.window_residual(&window0) < 1e-10);
        let g0 = basis.state_map(&window0);

        let horizon = 25;
        let d_seq: Vec<_> = (0..horizon).map(|_| randn_vec(&mut rng, 1)).collect();
        let z_seq: Vec<_> = (0..horizon).map(|_| randn_vec(&mut rng, 1)).collect();
        let gs = simulate_parameterizer(&dynamics, &g0, &d_seq, &z_seq).unwrap();

        // Consecutive windows overlap on L steps.
        let mut prev = window0.clone();
        let mut trajectory_cols: Vec<DVector<f64>> = steps;
        for g in &gs {
            let window = basis.f() * g;
            let overlap = window.rows(0, layout.lag * w) - prev.rows(w, layout.lag * w);
            assert!(overlap.abs().max() < 1e-8);
            trajectory_cols.push(layout.window_step(&window));
            prev = window;
        }

        // The woven signal is itself a kernel trajectory.
        let traj = DMatrix::from_columns(&trajectory_cols);
        assert!(model.residual(&traj) < 1e-8);
    }

    #[test]
    fn zero_inputs_keep_the_parameter_at_zero() {
        let dynamics = disturbed_dynamics();
        let layout = *dynamics.basis().layout();
        let g0 = DVector::zeros(layout.g_dim());
        let d_seq = vec![DVector::zeros(layout.q); 5];
        let z_seq = vec![DVector::zeros(layout.m); 5];
        let gs = simulate_parameterizer(&dynamics, &g0, &d_seq, &z_seq).unwrap();
        for g in gs {
            assert!(g.abs().max() == 0.0);
        }
    }

    #[test]
    fn control_deviation_survives_the_error_recursion() {
        let dynamics = disturbed_dynamics();
        let basis = dynamics.basis();
        let layout = *basis.layout();
        let pi_u = basis.input_rows();
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..20 {
            let e = randn_vec(&mut rng, layout.g_dim());
            let dd = randn_vec(&mut rng, layout.q);
            let du = randn_vec(&mut rng, layout.m);
            let err = dynamics.e_p() * &e + dynamics.e_f() * &dd + dynamics.e_u() * &du;
            let recovered = &pi_u * err;
            assert!((recovered - du).abs().max() < 1e-9);
        }
    }

    #[test]
    fn mismatched_sequences_are_rejected() {
        let dynamics = disturbed_dynamics();
        let layout = *dynamics.basis().layout();
        let g0 = DVector::zeros(layout.g_dim());
        let err = simulate_parameterizer(
            &dynamics,
            &g0,
            &vec![DVector::zeros(layout.q); 2],
            &vec![DVector::zeros(layout.m); 3],
        );
        assert!(matches!(err, Err(ParamDynError::LengthMismatch { lhs: 2, rhs: 3 })));
    }

    #[test]
    fn unreachable_input_direction_is_ill_conditioned() {
        // Hand-built span of {e1, e2, e3} in window coordinates (y0,u0,y1,u1):
        // the only constraint-free direction fixes u1 = 0, so the virtual
        // control cannot move the input.
        let layout = SignalLayout::new(1, 1, 0, 1, 1).unwrap();
        let mut f = DMatrix::zeros(4, 3);
        f[(0, 0)] = 1.0;
        f[(1, 1)] = 1.0;
        f[(2, 2)] = 1.0;
        let basis = BehaviorBasis::new(layout, f).unwrap();
        assert!(matches!(decompose(&basis), Err(ParamDynError::IllConditioned { .. })));
    }

    #[test]
    fn wrong_freedom_count_is_a_layout_error() {
        // Span {e1, e3, e4}: two directions with zero past, one input.
        let layout = SignalLayout::new(1, 1, 0, 1, 1).unwrap();
        let mut f = DMatrix::zeros(4, 3);
        f[(0, 0)] = 1.0;
        f[(2, 1)] = 1.0;
        f[(3, 2)] = 1.0;
        let basis = BehaviorBasis::new(layout, f).unwrap();
        assert!(matches!(
            decompose(&basis),
            Err(ParamDynError::NullSpaceDim { expected: 1, got: 2 })
        ));
    }
}
