//! Shared numeric kernels: symmetric-matrix plumbing, pseudoinverses with
//! annihilators, PSD square roots, subspace distances, and the completion
//! step for indefinite quadratic forms with a free second argument.
//!
//! Everything here is pure: no RNG, no global state, and eigendecompositions
//! are post-processed into a deterministic order so repeated runs produce
//! bit-identical results.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Relative singular-value cutoff for rank decisions.
pub const RANK_TOL: f64 = 1e-9;
/// Magnitude below which a negative eigenvalue is treated as roundoff in PSD maps.
pub const CLAMP_TOL: f64 = 1e-8;
/// Absolute asymmetry allowed when wrapping a matrix as symmetric.
pub const SYM_TOL: f64 = 1e-10;
/// Default condition-number cap for explicit inverses of definite matrices.
pub const COND_MAX: f64 = 1e10;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("matrix contains non-finite entries ({context})")]
    NonFinite { context: &'static str },
    #[error("matrix is not symmetric: max |A - A'| = {max_asym:.3e} exceeds {tol:.1e}")]
    NotSymmetric { max_asym: f64, tol: f64 },
    #[error("matrix is not positive semidefinite: eigenvalue {min_eig:.6e} below -{clamp_tol:.1e}")]
    NotPsd { min_eig: f64, clamp_tol: f64 },
    #[error("invalid subspace basis: {reason}")]
    InvalidBasis { reason: String },
    #[error("matrix inverse rejected: condition number {cond:.3e} exceeds cap {cond_max:.1e}")]
    IllConditioned { cond: f64, cond_max: f64 },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
}

/// Symmetric matrix wrapper. Construction checks symmetry to an absolute
/// tolerance and then stores the exactly symmetrized average, so downstream
/// eigendecompositions never see asymmetric dust.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    m: DMatrix<f64>,
}

impl SymMatrix {
    /// Wraps `m`, requiring max |m - m'| <= `SYM_TOL`.
    pub fn new(m: DMatrix<f64>) -> Result<Self, NumericsError> {
        Self::with_tol(m, SYM_TOL)
    }

    /// Wraps `m` with a caller-chosen asymmetry tolerance.
    pub fn with_tol(m: DMatrix<f64>, tol: f64) -> Result<Self, NumericsError> {
        if m.nrows() != m.ncols() {
            return Err(NumericsError::ShapeMismatch {
                expected: "square matrix".into(),
                got: format!("{}x{}", m.nrows(), m.ncols()),
            });
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(NumericsError::NonFinite { context: "SymMatrix::new" });
        }
        let max_asym = (&m - m.transpose()).abs().max();
        if max_asym > tol {
            return Err(NumericsError::NotSymmetric { max_asym, tol });
        }
        Ok(Self { m: symmetrize(&m) })
    }

    /// Symmetrizes unconditionally; for matrices that are symmetric by
    /// construction but accumulate one-ulp drift through long products.
    pub fn from_average(m: &DMatrix<f64>) -> Self {
        Self { m: symmetrize(m) }
    }

    pub fn identity(n: usize) -> Self {
        Self { m: DMatrix::identity(n, n) }
    }

    pub fn zeros(n: usize) -> Self {
        Self { m: DMatrix::zeros(n, n) }
    }

    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn mat(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.m
    }

    pub fn trace(&self) -> f64 {
        self.m.trace()
    }

    /// Eigendecomposition in deterministic descending order.
    pub fn eigen_desc(&self) -> (DVector<f64>, DMatrix<f64>) {
        eigen_sym_desc(&self.m)
    }

    pub fn min_eig(&self) -> f64 {
        let (vals, _) = self.eigen_desc();
        vals[vals.len() - 1]
    }

    /// x' M x.
    pub fn quad(&self, x: &DVector<f64>) -> f64 {
        (x.transpose() * &self.m * x)[(0, 0)]
    }
}

/// (A + A')/2.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = m.clone();
    s += m.transpose();
    s *= 0.5;
    s
}

/// Symmetric eigendecomposition sorted by descending eigenvalue, with each
/// eigenvector's sign fixed (first component of magnitude > 1e-12 made
/// positive) and exact ties ordered lexicographically by eigenvector. The
/// ordering makes learned bases reproducible across runs of the same build.
pub fn eigen_sym_desc(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let eig = SymMatrix::from_average(m).m.symmetric_eigen();
    let mut cols: Vec<(f64, DVector<f64>)> = (0..n)
        .map(|j| {
            let mut v: DVector<f64> = eig.eigenvectors.column(j).into_owned();
            if let Some(lead) = v.iter().find(|x| x.abs() > 1e-12) {
                if *lead < 0.0 {
                    v.neg_mut();
                }
            }
            (eig.eigenvalues[j], v)
        })
        .collect();
    cols.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| {
                for (x, y) in a.1.iter().zip(b.1.iter()) {
                    match x.partial_cmp(y) {
                        Some(std::cmp::Ordering::Equal) | None => continue,
                        Some(ord) => return ord,
                    }
                }
                std::cmp::Ordering::Equal
            })
    });
    let vals = DVector::from_iterator(n, cols.iter().map(|c| c.0));
    let mut vecs = DMatrix::zeros(n, n);
    for (j, (_, v)) in cols.iter().enumerate() {
        vecs.set_column(j, v);
    }
    (vals, vecs)
}

/// Moore-Penrose pseudoinverse of a rectangular matrix, keeping the factors
/// needed for the two orthogonal annihilators.
#[derive(Debug, Clone)]
pub struct Pseudoinverse {
    a: DMatrix<f64>,
    pinv: DMatrix<f64>,
    rank: usize,
}

impl Pseudoinverse {
    pub fn pinv(&self) -> &DMatrix<f64> {
        &self.pinv
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// I - A A'  (annihilates the range of A from the left).
    pub fn left_annihilator(&self) -> DMatrix<f64> {
        let r = self.a.nrows();
        DMatrix::identity(r, r) - &self.a * &self.pinv
    }

    /// I - A' A  (annihilates the row space of A from the right).
    pub fn right_annihilator(&self) -> DMatrix<f64> {
        let c = self.a.ncols();
        DMatrix::identity(c, c) - &self.pinv * &self.a
    }
}

/// Pseudoinverse via SVD with a relative singular-value cutoff.
pub fn pinv(a: &DMatrix<f64>, rank_tol: f64) -> Result<Pseudoinverse, NumericsError> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(NumericsError::NonFinite { context: "pinv" });
    }
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd with u");
    let v_t = svd.v_t.as_ref().expect("svd with v_t");
    let smax = svd.singular_values.max();
    let cut = rank_tol * smax.max(f64::MIN_POSITIVE);
    let rank = svd.singular_values.iter().filter(|s| **s > cut).count();
    let k = svd.singular_values.len();
    let mut sinv = DMatrix::zeros(k, k);
    for i in 0..k {
        let s = svd.singular_values[i];
        if s > cut {
            sinv[(i, i)] = 1.0 / s;
        }
    }
    let pinv = v_t.transpose() * sinv * u.transpose();
    Ok(Pseudoinverse { a: a.clone(), pinv, rank })
}

/// Numerical rank with the same convention as `pinv`.
pub fn rank(a: &DMatrix<f64>, rank_tol: f64) -> Result<usize, NumericsError> {
    Ok(pinv(a, rank_tol)?.rank)
}

/// Symmetric PSD square root. Eigenvalues in [-clamp_tol, 0) are clamped to
/// zero; anything below -clamp_tol is a hard error carrying the offender.
pub fn psd_sqrt(a: &SymMatrix, clamp_tol: f64) -> Result<SymMatrix, NumericsError> {
    let (vals, vecs) = a.eigen_desc();
    let min_eig = vals[vals.len() - 1];
    if min_eig < -clamp_tol {
        return Err(NumericsError::NotPsd { min_eig, clamp_tol });
    }
    let sq = DMatrix::from_diagonal(&vals.map(|l| l.max(0.0).sqrt()));
    Ok(SymMatrix::from_average(&(&vecs * sq * vecs.transpose())))
}

/// Inverse of a symmetric positive-definite matrix through its
/// eigendecomposition, rejected when the condition number exceeds `cond_max`.
pub fn invert_spd(a: &SymMatrix, cond_max: f64) -> Result<SymMatrix, NumericsError> {
    let (vals, vecs) = a.eigen_desc();
    let lmax = vals[0];
    let lmin = vals[vals.len() - 1];
    if lmin <= 0.0 {
        return Err(NumericsError::NotPsd { min_eig: lmin, clamp_tol: 0.0 });
    }
    let cond = lmax / lmin;
    if cond > cond_max {
        return Err(NumericsError::IllConditioned { cond, cond_max });
    }
    let inv = DMatrix::from_diagonal(&vals.map(|l| 1.0 / l));
    Ok(SymMatrix::from_average(&(&vecs * inv * vecs.transpose())))
}

/// Distance between the column spans of two orthonormal bases:
/// sqrt(sum_i sin^2 theta_i) over the principal angles, equivalently
/// ||U U' - V V'||_F / sqrt(2). Zero iff equal spans, maximum sqrt(k) for
/// orthogonal k-dimensional subspaces.
pub fn chordal_distance(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<f64, NumericsError> {
    if u.nrows() != v.nrows() || u.ncols() != v.ncols() {
        return Err(NumericsError::ShapeMismatch {
            expected: format!("{}x{}", u.nrows(), u.ncols()),
            got: format!("{}x{}", v.nrows(), v.ncols()),
        });
    }
    for (name, b) in [("first", u), ("second", v)] {
        let gram = b.transpose() * b;
        let dev = (&gram - DMatrix::identity(b.ncols(), b.ncols())).abs().max();
        if dev > 1e-8 {
            return Err(NumericsError::InvalidBasis {
                reason: format!("{name} argument has non-orthonormal columns (|B'B - I| = {dev:.3e})"),
            });
        }
    }
    let svd = (u.transpose() * v).svd(false, false);
    let sum: f64 = svd
        .singular_values
        .iter()
        .map(|s| (1.0 - s * s).max(0.0))
        .sum();
    Ok(sum.sqrt())
}

/// Orthonormalizes the columns of `b` (thin QR with deterministic signs).
/// Columns must be linearly independent.
pub fn orthonormalize(b: &DMatrix<f64>) -> Result<DMatrix<f64>, NumericsError> {
    let qr = b.clone().qr();
    let q = qr.q();
    let r = qr.r();
    let k = b.ncols();
    let mut out = q.columns(0, k).into_owned();
    for j in 0..k {
        let d = r[(j, j)];
        if d.abs() < RANK_TOL * r[(0, 0)].abs().max(1.0) {
            return Err(NumericsError::InvalidBasis {
                reason: format!("column {j} is linearly dependent (R diagonal {d:.3e})"),
            });
        }
        if d < 0.0 {
            for i in 0..out.nrows() {
                out[(i, j)] = -out[(i, j)];
            }
        }
    }
    Ok(out)
}

/// Orthonormal basis of the null space of a rectangular matrix. The rank
/// comes from the singular values (relative cutoff `rank_tol`); the basis is
/// extracted from the row-space complement projector, whose eigenvectors are
/// post-processed deterministically.
pub fn null_space(a: &DMatrix<f64>, rank_tol: f64) -> Result<DMatrix<f64>, NumericsError> {
    if a.iter().any(|x| !x.is_finite()) {
        return Err(NumericsError::NonFinite { context: "null_space" });
    }
    let c = a.ncols();
    let svd = a.clone().svd(false, true);
    let v_t = svd.v_t.as_ref().expect("svd with v_t");
    let smax = svd.singular_values.max();
    let cut = rank_tol * smax.max(f64::MIN_POSITIVE);
    let rank = svd.singular_values.iter().filter(|s| **s > cut).count();
    let null_dim = c - rank;
    if null_dim == 0 {
        return Ok(DMatrix::zeros(c, 0));
    }
    let vr = v_t.rows(0, rank);
    let proj = DMatrix::identity(c, c) - vr.transpose() * vr;
    let (vals, vecs) = eigen_sym_desc(&proj);
    debug_assert!(vals[null_dim - 1] > 0.5, "projector spectrum inconsistent with rank");
    orthonormalize(&vecs.columns(0, null_dim).into_owned())
}

/// Block-diagonal matrix with `copies` copies of `s`: I_copies (x) s.
pub fn block_diag_copies(s: &DMatrix<f64>, copies: usize) -> DMatrix<f64> {
    let n = s.nrows();
    let mut out = DMatrix::zeros(n * copies, n * copies);
    for k in 0..copies {
        out.view_mut((k * n, k * n), (n, n)).copy_from(s);
    }
    out
}

/// Indefinite quadratic form in a pair (v1, v2) with the second argument free:
///
///   J(v1, v2) = [v1; v2]' [[Q, S], [S', -R]] [v1; v2] + [eta; mu]' [v1; v2] + beta,
///
/// with R symmetric PSD. `quadratic_freedom_solve` decides whether v2 can be
/// chosen as an affine function of v1 making J nonnegative for every v1, and
/// constructs that function when it exists.
#[derive(Debug, Clone)]
pub struct QuadraticForm {
    pub q: SymMatrix,
    pub s: DMatrix<f64>,
    pub r: SymMatrix,
    pub eta: DVector<f64>,
    pub mu: DVector<f64>,
    pub beta: f64,
}

impl QuadraticForm {
    pub fn new(
        q: SymMatrix,
        s: DMatrix<f64>,
        r: SymMatrix,
        eta: DVector<f64>,
        mu: DVector<f64>,
        beta: f64,
    ) -> Result<Self, NumericsError> {
        let n1 = q.dim();
        let n2 = r.dim();
        if s.nrows() != n1 || s.ncols() != n2 || eta.len() != n1 || mu.len() != n2 {
            return Err(NumericsError::ShapeMismatch {
                expected: format!("S {n1}x{n2}, eta {n1}, mu {n2}"),
                got: format!("S {}x{}, eta {}, mu {}", s.nrows(), s.ncols(), eta.len(), mu.len()),
            });
        }
        let min_r = r.min_eig();
        if min_r < -CLAMP_TOL {
            return Err(NumericsError::NotPsd { min_eig: min_r, clamp_tol: CLAMP_TOL });
        }
        if !beta.is_finite() {
            return Err(NumericsError::NonFinite { context: "QuadraticForm beta" });
        }
        Ok(Self { q, s, r, eta, mu, beta })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.q.dim(), self.r.dim())
    }

    /// Direct evaluation of J(v1, v2).
    pub fn evaluate(&self, v1: &DVector<f64>, v2: &DVector<f64>) -> f64 {
        self.q.quad(v1) + 2.0 * (v1.transpose() * &self.s * v2)[(0, 0)] - self.r.quad(v2)
            + self.eta.dot(v1)
            + self.mu.dot(v2)
            + self.beta
    }
}

/// Affine completion v2 = K v1 + xi returned by `quadratic_freedom_solve`.
#[derive(Debug, Clone)]
pub struct FreedomSolution {
    pub gain: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub tau: f64,
    /// Smallest eigenvalue of the certificate matrix; nonnegative up to
    /// roundoff when the completion exists.
    pub cert_min_eig: f64,
}

/// Outcome of a single-tau completion attempt. Infeasibility is an ordinary
/// outcome, not an error.
#[derive(Debug, Clone)]
pub enum FreedomOutcome {
    Feasible(FreedomSolution),
    Infeasible { cert_min_eig: f64 },
}

/// Default tau grid for `quadratic_freedom_scan`: zero plus +-10^k, k = -2..2.
pub const TAU_GRID: [f64; 11] = [
    0.0, 0.01, -0.01, 0.1, -0.1, 1.0, -1.0, 10.0, -10.0, 100.0, -100.0,
];

/// Tests the completion certificate at one value of the scalar `tau` and
/// builds the affine map when it is PSD:
///
///   G(tau) = [[beta, eta'/2], [eta/2, Q]] + J (R^+ + tau P) J',
///   J = [mu'/2; S],  P = I - R R^+,
///   K = (R^+ + tau/2 P) S',  xi = (R^+ + tau/2 P) mu / 2.
///
/// When R is definite, P = 0 and tau is irrelevant.
pub fn quadratic_freedom_solve(qf: &QuadraticForm, tau: f64) -> Result<FreedomOutcome, NumericsError> {
    let (n1, n2) = qf.dims();
    let r_pinv = pinv_psd(&qf.r)?;
    let r_perp = &r_pinv.perp;
    let rp = &r_pinv.pinv;

    let mut j = DMatrix::zeros(1 + n1, n2);
    j.view_mut((0, 0), (1, n2))
        .copy_from(&(qf.mu.transpose() * 0.5));
    j.view_mut((1, 0), (n1, n2)).copy_from(&qf.s);

    let mut base = DMatrix::zeros(1 + n1, 1 + n1);
    base[(0, 0)] = qf.beta;
    base.view_mut((0, 1), (1, n1))
        .copy_from(&(qf.eta.transpose() * 0.5));
    base.view_mut((1, 0), (n1, 1)).copy_from(&(&qf.eta * 0.5));
    base.view_mut((1, 1), (n1, n1)).copy_from(qf.q.mat());

    let middle = rp + r_perp * tau;
    let cert = SymMatrix::from_average(&(base + &j * middle * j.transpose()));
    let (vals, _) = cert.eigen_desc();
    let lmax = vals[0].max(1.0);
    let cert_min_eig = vals[vals.len() - 1];
    if cert_min_eig < -1e-12 * lmax {
        return Ok(FreedomOutcome::Infeasible { cert_min_eig });
    }

    let half = rp + r_perp * (tau / 2.0);
    let gain = &half * qf.s.transpose();
    let offset = &half * &qf.mu * 0.5;
    if qf.mu.amax() == 0.0 {
        debug_assert!(qf.beta >= -1e-12 * lmax, "beta must be nonnegative when mu = 0");
    }
    Ok(FreedomOutcome::Feasible(FreedomSolution { gain, offset, tau, cert_min_eig }))
}

/// Scans the default tau grid and returns the first feasible completion.
pub fn quadratic_freedom_scan(qf: &QuadraticForm) -> Result<Option<FreedomSolution>, NumericsError> {
    for &tau in TAU_GRID.iter() {
        if let FreedomOutcome::Feasible(sol) = quadratic_freedom_solve(qf, tau)? {
            return Ok(Some(sol));
        }
    }
    Ok(None)
}

/// Eigendecomposition-based pseudoinverse of a symmetric PSD matrix, kept
/// exactly symmetric, with the range-complement projector I - R R^+.
struct PsdPinv {
    pinv: DMatrix<f64>,
    perp: DMatrix<f64>,
}

fn pinv_psd(r: &SymMatrix) -> Result<PsdPinv, NumericsError> {
    let (vals, vecs) = r.eigen_desc();
    let n = r.dim();
    let cut = RANK_TOL * vals[0].max(f64::MIN_POSITIVE);
    let inv = DMatrix::from_diagonal(&vals.map(|l| if l > cut { 1.0 / l } else { 0.0 }));
    let ind = DMatrix::from_diagonal(&vals.map(|l| if l > cut { 1.0 } else { 0.0 }));
    let pinv = symmetrize(&(&vecs * inv * vecs.transpose()));
    let proj = &vecs * ind * vecs.transpose();
    let perp = symmetrize(&(DMatrix::identity(n, n) - proj));
    Ok(PsdPinv { pinv, perp })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::rngs::StdRng;
    use rand::{RngExt, SeedableRng};
    use rand_distr::StandardNormal;

    fn randn_mat(rng: &mut StdRng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
    }

    fn randn_vec(rng: &mut StdRng, n: usize) -> DVector<f64> {
        DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
    }

    #[test]
    fn pinv_of_rank_one_ones() {
        let a = DMatrix::from_element(2, 2, 1.0);
        let p = pinv(&a, RANK_TOL).unwrap();
        assert_eq!(p.rank(), 1);
        assert_abs_diff_eq!(p.pinv(), &DMatrix::from_element(2, 2, 0.25), epsilon = 1e-12);
    }

    #[test]
    fn pinv_penrose_conditions_random() {
        let mut rng = StdRng::seed_from_u64(7);
        for trial in 0..40 {
            let (r, c) = (2 + trial % 5, 2 + (trial * 3) % 6);
            let mut a = randn_mat(&mut rng, r, c);
            if trial % 3 == 0 && c >= 2 {
                // Force a rank drop: make the last column a combination.
                let col: DVector<f64> = a.column(0) + a.column(1);
                a.set_column(c - 1, &col);
            }
            let p = pinv(&a, RANK_TOL).unwrap();
            let ap = p.pinv();
            assert_abs_diff_eq!(&a * ap * &a, a.clone(), epsilon = 1e-10);
            assert_abs_diff_eq!(ap * &a * ap, ap.clone(), epsilon = 1e-10);
            let aap = &a * ap;
            let apa = ap * &a;
            assert_abs_diff_eq!(aap.transpose(), aap, epsilon = 1e-10);
            assert_abs_diff_eq!(apa.transpose(), apa, epsilon = 1e-10);
            // Annihilators kill the matrix from the matching side.
            assert!((p.left_annihilator() * &a).abs().max() < 1e-10);
            assert!((&a * p.right_annihilator()).abs().max() < 1e-10);
        }
    }

    #[test]
    fn pinv_zero_matrix_has_rank_zero() {
        let a = DMatrix::zeros(3, 2);
        let p = pinv(&a, RANK_TOL).unwrap();
        assert_eq!(p.rank(), 0);
        assert!(p.pinv().abs().max() == 0.0);
    }

    #[test]
    fn psd_sqrt_reconstructs_and_clamps() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..20 {
            let b = randn_mat(&mut rng, 5, 5);
            let a = SymMatrix::from_average(&(&b * b.transpose()));
            let s = psd_sqrt(&a, CLAMP_TOL).unwrap();
            assert_abs_diff_eq!(s.mat() * s.mat(), a.mat().clone(), epsilon = 1e-8);
        }
        // A tiny negative eigenvalue inside the clamp window maps to zero.
        let a = SymMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-9])))
            .unwrap();
        let s = psd_sqrt(&a, CLAMP_TOL).unwrap();
        assert_abs_diff_eq!(s.mat()[(1, 1)], 0.0, epsilon = 1e-12);
        // A genuinely indefinite matrix errors with the offending eigenvalue.
        let a = SymMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -0.5])))
            .unwrap();
        match psd_sqrt(&a, CLAMP_TOL) {
            Err(NumericsError::NotPsd { min_eig, .. }) => assert_abs_diff_eq!(min_eig, -0.5, epsilon = 1e-12),
            other => panic!("expected NotPsd, got {other:?}"),
        }
    }

    #[test]
    fn eigen_desc_is_sorted_and_deterministic() {
        let mut rng = StdRng::seed_from_u64(3);
        let b = randn_mat(&mut rng, 6, 6);
        let a = symmetrize(&b);
        let (v1, w1) = eigen_sym_desc(&a);
        let (v2, w2) = eigen_sym_desc(&a);
        assert_eq!(w1, w2);
        for i in 1..v1.len() {
            assert!(v1[i - 1] >= v1[i]);
        }
        assert_eq!(v1, v2);
        // Reconstruction.
        let rec = &w1 * DMatrix::from_diagonal(&v1) * w1.transpose();
        assert_abs_diff_eq!(rec, a, epsilon = 1e-10);
    }

    #[test]
    fn chordal_distance_matches_projector_oracle() {
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..20 {
            let u = orthonormalize(&randn_mat(&mut rng, 8, 3)).unwrap();
            let v = orthonormalize(&randn_mat(&mut rng, 8, 3)).unwrap();
            let d = chordal_distance(&u, &v).unwrap();
            let oracle = ((&u * u.transpose() - &v * v.transpose()).norm()) / 2f64.sqrt();
            assert_abs_diff_eq!(d, oracle, epsilon = 1e-10);
        }
    }

    #[test]
    fn chordal_distance_extremes_and_rotation_invariance() {
        let mut rng = StdRng::seed_from_u64(9);
        let u = orthonormalize(&randn_mat(&mut rng, 7, 3)).unwrap();
        assert_abs_diff_eq!(chordal_distance(&u, &u).unwrap(), 0.0, epsilon = 1e-12);
        // Same span under a random orthogonal recombination.
        let q = orthonormalize(&randn_mat(&mut rng, 3, 3)).unwrap();
        assert_abs_diff_eq!(chordal_distance(&u, &(&u * q)).unwrap(), 0.0, epsilon = 1e-7);
        // Orthogonal subspaces reach sqrt(k).
        let mut a = DMatrix::zeros(6, 2);
        a[(0, 0)] = 1.0;
        a[(1, 1)] = 1.0;
        let mut b = DMatrix::zeros(6, 2);
        b[(2, 0)] = 1.0;
        b[(3, 1)] = 1.0;
        assert_abs_diff_eq!(chordal_distance(&a, &b).unwrap(), 2f64.sqrt(), epsilon = 1e-12);
        // Non-orthonormal input is rejected.
        let bad = DMatrix::from_element(6, 2, 0.5);
        assert!(matches!(
            chordal_distance(&bad, &a),
            Err(NumericsError::InvalidBasis { .. })
        ));
    }

    #[test]
    fn invert_spd_rejects_ill_conditioned() {
        let a = SymMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 1e-12])))
            .unwrap();
        assert!(matches!(
            invert_spd(&a, COND_MAX),
            Err(NumericsError::IllConditioned { .. })
        ));
        let b = SymMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 2.0]))).unwrap();
        let inv = invert_spd(&b, COND_MAX).unwrap();
        assert_abs_diff_eq!(inv.mat() * b.mat(), DMatrix::identity(2, 2), epsilon = 1e-12);
    }

    #[test]
    fn freedom_trivial_bound_is_feasible_with_zero_gain() {
        // J = -|v2|^2 + 1: choosing v2 = 0 keeps J = 1 >= 0.
        let qf = QuadraticForm::new(
            SymMatrix::zeros(2),
            DMatrix::zeros(2, 1),
            SymMatrix::identity(1),
            DVector::zeros(2),
            DVector::zeros(1),
            1.0,
        )
        .unwrap();
        match quadratic_freedom_solve(&qf, 0.0).unwrap() {
            FreedomOutcome::Feasible(sol) => {
                assert!(sol.gain.abs().max() == 0.0);
                assert!(sol.offset.abs().max() == 0.0);
            }
            other => panic!("expected feasible, got {other:?}"),
        }
    }

    #[test]
    fn freedom_negative_beta_with_zero_mu_is_infeasible() {
        let qf = QuadraticForm::new(
            SymMatrix::zeros(1),
            DMatrix::zeros(1, 1),
            SymMatrix::identity(1),
            DVector::zeros(1),
            DVector::zeros(1),
            -0.25,
        )
        .unwrap();
        assert!(matches!(
            quadratic_freedom_solve(&qf, 0.0).unwrap(),
            FreedomOutcome::Infeasible { .. }
        ));
    }

    #[test]
    fn freedom_substitution_is_nonnegative_on_random_feasible_instances() {
        let mut rng = StdRng::seed_from_u64(21);
        let mut feasible_seen = 0;
        for _ in 0..60 {
            let (n1, n2) = (3, 2);
            let b = randn_mat(&mut rng, n2, n2);
            let r = SymMatrix::from_average(&(&b * b.transpose() + DMatrix::identity(n2, n2) * 0.3));
            let s = randn_mat(&mut rng, n1, n2);
            // Build Q large enough that many draws are feasible.
            let c = randn_mat(&mut rng, n1, n1);
            let q = SymMatrix::from_average(&(&c * c.transpose()));
            let eta = randn_vec(&mut rng, n1);
            let mu = randn_vec(&mut rng, n2);
            let beta = rng.sample::<f64, _>(StandardNormal).abs() * 3.0 + 2.0;
            let qf = QuadraticForm::new(q, s, r, eta, mu, beta).unwrap();
            if let FreedomOutcome::Feasible(sol) = quadratic_freedom_solve(&qf, 0.0).unwrap() {
                feasible_seen += 1;
                for _ in 0..200 {
                    let v1 = randn_vec(&mut rng, n1);
                    let v2 = &sol.gain * &v1 + &sol.offset;
                    assert!(qf.evaluate(&v1, &v2) >= -1e-9, "substitution dipped negative");
                }
            }
        }
        assert!(feasible_seen >= 10, "test fixture produced too few feasible draws");
    }

    #[test]
    fn freedom_singular_r_uses_tau_scan() {
        // R singular: the free direction must not be penalized. Construct a
        // case feasible only with a nonzero tau on the annihilated part.
        let r = SymMatrix::new(DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.0])))
            .unwrap();
        let s = DMatrix::from_row_slice(1, 2, &[0.0, 1.0]);
        // J = q*v1^2 + 2 v1 s v2 - v2' R v2 with q slightly negative: the
        // certificate needs tau >= 0.5 on the annihilated direction, so the
        // scan must move off tau = 0.
        let q = SymMatrix::new(DMatrix::from_element(1, 1, -0.5)).unwrap();
        let qf = QuadraticForm::new(
            q,
            s,
            r,
            DVector::zeros(1),
            DVector::zeros(2),
            0.0,
        )
        .unwrap();
        let sol = quadratic_freedom_scan(&qf).unwrap().expect("scan should find a tau");
        assert!(sol.tau != 0.0);
        let mut rng = StdRng::seed_from_u64(2);
        for _ in 0..200 {
            let v1 = randn_vec(&mut rng, 1);
            let v2 = &sol.gain * &v1 + &sol.offset;
            assert!(qf.evaluate(&v1, &v2) >= -1e-9);
        }
    }

    #[test]
    fn block_diag_copies_layout() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 5.0]);
        let b = block_diag_copies(&s, 3);
        assert_eq!(b.nrows(), 6);
        assert_eq!(b[(0, 1)], 2.0);
        assert_eq!(b[(4, 5)], 2.0);
        assert_eq!(b[(0, 3)], 0.0);
    }
}
