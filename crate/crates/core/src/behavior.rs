//! Finite-horizon behavior identification.
//!
//! The object of interest is the subspace of all (L+1)-step signal windows
//!
//!   col(w_{k-L}, ..., w_k),   w_k = (y_k, u_k, d_k),
//!
//! that a linear time-invariant relation can produce. Its dimension is
//! (L+1)(m+q) + n, with n the state cardinality. `learn_basis` recovers an
//! orthonormal basis of that subspace from noisy trajectories by pooling
//! window Gram matrices and subtracting the known measurement-noise bias;
//! `exact_basis_from_kernel` builds the same subspace from a known kernel
//! model and serves as the learning oracle.

use crate::numerics::{self, block_diag_copies, NumericsError, SymMatrix, RANK_TOL};
use crate::simulator::kernel::KernelModel;
use nalgebra::{DMatrix, DVector};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

/// Ratio of retained-to-discarded eigenvalue below which a learned basis is
/// flagged as poorly separated.
pub const GAP_TOL: f64 = 10.0;

#[derive(Debug, Error)]
pub enum BehaviorError {
    #[error("invalid signal layout: {0}")]
    Layout(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("trajectory {trajectory} is not persistently exciting of order {order}")]
    NotPersistentlyExciting { trajectory: usize, order: usize },
    #[error("trajectory {trajectory} has {len} steps, need at least {need}")]
    TooShort { trajectory: usize, len: usize, need: usize },
    #[error("kernel null space has dimension {got}, layout requires {expected}")]
    InconsistentLayout { expected: usize, got: usize },
    #[error("basis has {got} columns, layout requires {expected}")]
    BasisShape { expected: String, got: String },
    #[error("trajectory set is empty")]
    Empty,
    #[error("trajectory {trajectory} has length {got}, set requires uniform length {expected}")]
    RaggedSet { trajectory: usize, expected: usize, got: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Channel counts and horizon of the signal tuple w = (y, u, d), plus the
/// state cardinality that fixes the window-subspace dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SignalLayout {
    pub p: usize,
    pub m: usize,
    pub q: usize,
    pub lag: usize,
    pub n_state: usize,
}

impl SignalLayout {
    pub fn new(p: usize, m: usize, q: usize, lag: usize, n_state: usize) -> Result<Self, BehaviorError> {
        if p == 0 || m == 0 {
            return Err(BehaviorError::Layout(format!(
                "need at least one output and one input channel, got p={p}, m={m}"
            )));
        }
        if lag == 0 {
            return Err(BehaviorError::Layout("window horizon must be at least 1".into()));
        }
        let layout = Self { p, m, q, lag, n_state };
        if n_state > (lag + 1) * p {
            return Err(BehaviorError::Layout(format!(
                "state cardinality {n_state} exceeds the output capacity {} of an {}-step window",
                (lag + 1) * p,
                lag + 1
            )));
        }
        Ok(layout)
    }

    /// Per-step signal dimension p + m + q.
    pub fn w_dim(&self) -> usize {
        self.p + self.m + self.q
    }

    /// Window-subspace dimension (L+1)(m+q) + n_state.
    pub fn g_dim(&self) -> usize {
        (self.lag + 1) * (self.m + self.q) + self.n_state
    }

    /// Stacked window dimension (L+1)(p+m+q).
    pub fn window_dim(&self) -> usize {
        (self.lag + 1) * self.w_dim()
    }

    /// Row range of the u channels inside one step vector.
    pub fn u_range(&self) -> std::ops::Range<usize> {
        self.p..self.p + self.m
    }

    /// Row range of the d channels inside one step vector.
    pub fn d_range(&self) -> std::ops::Range<usize> {
        self.p + self.m..self.w_dim()
    }

    /// Splits one step vector into (y, u, d).
    pub fn split_step(&self, w: &DVector<f64>) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        assert_eq!(w.len(), self.w_dim());
        (
            w.rows(0, self.p).into_owned(),
            w.rows(self.p, self.m).into_owned(),
            w.rows(self.p + self.m, self.q).into_owned(),
        )
    }

    /// Last L steps of a stacked window (drops the oldest step).
    pub fn window_past(&self, window: &DVector<f64>) -> DVector<f64> {
        assert_eq!(window.len(), self.window_dim());
        window.rows(self.w_dim(), self.lag * self.w_dim()).into_owned()
    }

    /// Newest step of a stacked window.
    pub fn window_step(&self, window: &DVector<f64>) -> DVector<f64> {
        assert_eq!(window.len(), self.window_dim());
        window
            .rows(self.lag * self.w_dim(), self.w_dim())
            .into_owned()
    }
}

/// Measured trajectories with a shared layout and uniform length, stored as
/// (p+m+q) x len matrices with rows ordered (y, u, d) and columns as steps.
#[derive(Debug, Clone)]
pub struct TrajectorySet {
    layout: SignalLayout,
    trajectories: Vec<DMatrix<f64>>,
}

impl TrajectorySet {
    pub fn new(layout: SignalLayout, trajectories: Vec<DMatrix<f64>>) -> Result<Self, BehaviorError> {
        if trajectories.is_empty() {
            return Err(BehaviorError::Empty);
        }
        let len = trajectories[0].ncols();
        for (i, t) in trajectories.iter().enumerate() {
            if t.nrows() != layout.w_dim() {
                return Err(BehaviorError::BasisShape {
                    expected: format!("{} signal rows", layout.w_dim()),
                    got: format!("{} rows in trajectory {i}", t.nrows()),
                });
            }
            if t.ncols() != len {
                return Err(BehaviorError::RaggedSet { trajectory: i, expected: len, got: t.ncols() });
            }
        }
        Ok(Self { layout, trajectories })
    }

    pub fn layout(&self) -> &SignalLayout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Steps per trajectory.
    pub fn steps(&self) -> usize {
        self.trajectories[0].ncols()
    }

    pub fn trajectories(&self) -> &[DMatrix<f64>] {
        &self.trajectories
    }

    /// The (u, d) rows of one trajectory, the channels whose excitation the
    /// identification conditions constrain.
    pub fn input_rows(&self, i: usize) -> DMatrix<f64> {
        let t = &self.trajectories[i];
        t.rows(self.layout.p, self.layout.m + self.layout.q).into_owned()
    }

    /// Writes the columnar text format: optional comment lines, a header row
    /// naming channels y1..yp u1..um d1..dq, then one whitespace-separated
    /// row per step and a blank line between trajectories.
    pub fn write_to<W: Write>(&self, mut out: W, comments: &[String]) -> Result<(), BehaviorError> {
        for c in comments {
            writeln!(out, "# {c}")?;
        }
        let mut names = Vec::new();
        for i in 0..self.layout.p {
            names.push(format!("y{}", i + 1));
        }
        for i in 0..self.layout.m {
            names.push(format!("u{}", i + 1));
        }
        for i in 0..self.layout.q {
            names.push(format!("d{}", i + 1));
        }
        writeln!(out, "{}", names.join(" "))?;
        for (i, t) in self.trajectories.iter().enumerate() {
            if i > 0 {
                writeln!(out)?;
            }
            for c in 0..t.ncols() {
                let row: Vec<String> = (0..t.nrows()).map(|r| format!("{:.17e}", t[(r, c)])).collect();
                writeln!(out, "{}", row.join(" "))?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path, comments: &[String]) -> Result<(), BehaviorError> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f), comments)
    }

    /// Reads the columnar text format. The header fixes (p, m, q); the window
    /// horizon and state cardinality are not stored in the file and must be
    /// supplied.
    pub fn read_from<R: BufRead>(input: R, lag: usize, n_state: usize) -> Result<Self, BehaviorError> {
        let mut header: Option<(usize, usize, usize)> = None;
        let mut blocks: Vec<Vec<DVector<f64>>> = Vec::new();
        let mut current: Vec<DVector<f64>> = Vec::new();
        let mut w_dim = 0usize;
        for (lineno, line) in input.lines().enumerate() {
            let line = line?;
            let lineno = lineno + 1;
            let trimmed = line.trim();
            if trimmed.starts_with('#') {
                continue;
            }
            if trimmed.is_empty() {
                if !current.is_empty() {
                    blocks.push(std::mem::take(&mut current));
                }
                continue;
            }
            if header.is_none() {
                let counts = parse_header(trimmed).map_err(|reason| BehaviorError::Parse { line: lineno, reason })?;
                w_dim = counts.0 + counts.1 + counts.2;
                header = Some(counts);
                continue;
            }
            let fields: Result<Vec<f64>, _> = trimmed
                .split_whitespace()
                .map(|f| f.parse::<f64>())
                .collect();
            let fields = fields.map_err(|e| BehaviorError::Parse { line: lineno, reason: e.to_string() })?;
            if fields.len() != w_dim {
                return Err(BehaviorError::Parse {
                    line: lineno,
                    reason: format!("expected {w_dim} fields, got {}", fields.len()),
                });
            }
            current.push(DVector::from_vec(fields));
        }
        if !current.is_empty() {
            blocks.push(current);
        }
        let (p, m, q) = header.ok_or(BehaviorError::Parse { line: 0, reason: "missing header".into() })?;
        let layout = SignalLayout::new(p, m, q, lag, n_state)?;
        let trajectories: Vec<DMatrix<f64>> = blocks
            .into_iter()
            .map(|steps| DMatrix::from_columns(&steps))
            .collect();
        Self::new(layout, trajectories)
    }

    pub fn load(path: &Path, lag: usize, n_state: usize) -> Result<Self, BehaviorError> {
        let f = std::fs::File::open(path)?;
        Self::read_from(std::io::BufReader::new(f), lag, n_state)
    }
}

fn parse_header(line: &str) -> Result<(usize, usize, usize), String> {
    let mut counts = [0usize; 3];
    let mut stage = 0usize;
    for tok in line.split([' ', ',']).filter(|t| !t.is_empty()) {
        let (prefix, idx) = tok.split_at(1);
        let slot = match prefix {
            "y" => 0,
            "u" => 1,
            "d" => 2,
            _ => return Err(format!("unknown channel name {tok}")),
        };
        if slot < stage {
            return Err(format!("channel {tok} out of order (expected y..u..d)"));
        }
        stage = slot;
        let n: usize = idx.parse().map_err(|_| format!("bad channel index in {tok}"))?;
        counts[slot] += 1;
        if n != counts[slot] {
            return Err(format!("channel {tok} out of sequence"));
        }
    }
    if counts[0] == 0 || counts[1] == 0 {
        return Err("header must name at least y1 and u1".into());
    }
    Ok((counts[0], counts[1], counts[2]))
}

/// Block-Hankel matrix of depth `depth` from a (channels x len) signal:
/// column j stacks steps j .. j+depth-1, oldest step on top.
pub fn hankel(signal: &DMatrix<f64>, depth: usize) -> Result<DMatrix<f64>, BehaviorError> {
    let c = signal.nrows();
    let len = signal.ncols();
    if depth == 0 {
        return Err(BehaviorError::Layout("hankel depth must be at least 1".into()));
    }
    if len < depth {
        return Err(BehaviorError::TooShort { trajectory: 0, len, need: depth });
    }
    let cols = len - depth + 1;
    let mut h = DMatrix::zeros(c * depth, cols);
    for j in 0..cols {
        for s in 0..depth {
            h.view_mut((s * c, j), (c, 1)).copy_from(&signal.column(j + s));
        }
    }
    Ok(h)
}

/// A signal is persistently exciting of order r when its depth-r block-Hankel
/// matrix has full row rank. Too-short signals are simply not exciting.
pub fn is_persistently_exciting(signal: &DMatrix<f64>, order: usize) -> Result<bool, BehaviorError> {
    let c = signal.nrows();
    if c == 0 {
        return Err(BehaviorError::Layout("signal has no channels".into()));
    }
    if signal.ncols() < order || signal.ncols() - order + 1 < c * order {
        return Ok(false);
    }
    let h = hankel(signal, order)?;
    Ok(numerics::rank(&h, RANK_TOL)? == c * order)
}

/// Orthonormal basis of the window subspace, with the index maps that select
/// past steps, the newest step, and the newest step's (y, u, d) channels.
#[derive(Debug, Clone)]
pub struct BehaviorBasis {
    layout: SignalLayout,
    f: DMatrix<f64>,
}

impl BehaviorBasis {
    /// Wraps a basis matrix, checking shape and orthonormality (F'F = I to
    /// 1e-10 elementwise).
    pub fn new(layout: SignalLayout, f: DMatrix<f64>) -> Result<Self, BehaviorError> {
        if f.nrows() != layout.window_dim() || f.ncols() != layout.g_dim() {
            return Err(BehaviorError::BasisShape {
                expected: format!("{}x{}", layout.window_dim(), layout.g_dim()),
                got: format!("{}x{}", f.nrows(), f.ncols()),
            });
        }
        let gram = f.transpose() * &f;
        let dev = (&gram - DMatrix::identity(f.ncols(), f.ncols())).abs().max();
        if dev > 1e-10 {
            return Err(BehaviorError::BasisShape {
                expected: "orthonormal columns".into(),
                got: format!("|F'F - I| = {dev:.3e}"),
            });
        }
        Ok(Self { layout, f })
    }

    pub fn layout(&self) -> &SignalLayout {
        &self.layout
    }

    pub fn f(&self) -> &DMatrix<f64> {
        &self.f
    }

    pub fn g_dim(&self) -> usize {
        self.layout.g_dim()
    }

    /// Rows of F for the oldest L steps (the window prefix).
    pub fn prefix_rows(&self) -> DMatrix<f64> {
        self.f.rows(0, self.layout.lag * self.layout.w_dim()).into_owned()
    }

    /// Rows of F for the d channels of the newest step.
    pub fn disturbance_rows(&self) -> DMatrix<f64> {
        let base = self.layout.lag * self.layout.w_dim();
        self.f
            .rows(base + self.layout.p + self.layout.m, self.layout.q)
            .into_owned()
    }

    /// Rows of F for the newest L steps (window with the oldest step dropped).
    pub fn suffix_rows(&self) -> DMatrix<f64> {
        self.f
            .rows(self.layout.w_dim(), self.layout.lag * self.layout.w_dim())
            .into_owned()
    }

    /// Rows of F for the newest step: the map from window coordinates to w_k.
    pub fn step_rows(&self) -> DMatrix<f64> {
        self.f
            .rows(self.layout.lag * self.layout.w_dim(), self.layout.w_dim())
            .into_owned()
    }

    /// Rows of F for the newest step's y channels.
    pub fn output_rows(&self) -> DMatrix<f64> {
        self.f
            .rows(self.layout.lag * self.layout.w_dim(), self.layout.p)
            .into_owned()
    }

    /// Rows of F for the newest step's u channels.
    pub fn input_rows(&self) -> DMatrix<f64> {
        let base = self.layout.lag * self.layout.w_dim();
        self.f.rows(base + self.layout.p, self.layout.m).into_owned()
    }

    /// Window coordinates of a stacked (L+1)-step window: g = F' w. For
    /// windows inside the subspace this inverts w = F g exactly.
    pub fn state_map(&self, window: &DVector<f64>) -> DVector<f64> {
        assert_eq!(window.len(), self.layout.window_dim());
        self.f.transpose() * window
    }

    /// Distance from a window to the subspace, ||(I - FF') w||.
    pub fn window_residual(&self, window: &DVector<f64>) -> f64 {
        let proj = &self.f * (self.f.transpose() * window);
        (window - proj).norm()
    }
}

/// Outcome of `learn_basis`: the basis plus the spectrum it was cut from.
#[derive(Debug, Clone)]
pub struct LearnedBasis {
    pub basis: BehaviorBasis,
    /// Full eigenvalue spectrum of the bias-corrected pooled Gram, descending.
    pub spectrum: DVector<f64>,
    /// Ratio of the smallest retained to the largest discarded eigenvalue.
    pub spectral_gap: f64,
    /// Set when the spectral gap is below `GAP_TOL`; the basis is still
    /// returned but the cut is poorly separated.
    pub gap_warning: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct LearnOptions {
    pub gap_tol: f64,
    /// Verify persistent excitation of each trajectory's (u, d) rows before
    /// pooling; disable only for data known exciting by construction.
    pub check_excitation: bool,
}

impl Default for LearnOptions {
    fn default() -> Self {
        Self { gap_tol: GAP_TOL, check_excitation: true }
    }
}

/// Learns an orthonormal window-subspace basis from noisy trajectories.
///
/// Pools per-trajectory window Gram matrices, subtracts the measurement-noise
/// bias (cols * I_{L+1} (x) S_n), and keeps the eigenvectors of the top
/// g_dim eigenvalues, re-orthonormalized so F'F = I holds exactly.
pub fn learn_basis(
    set: &TrajectorySet,
    s_n: &SymMatrix,
    opts: &LearnOptions,
) -> Result<LearnedBasis, BehaviorError> {
    let layout = *set.layout();
    let gram = pooled_corrected_gram(set, s_n, opts)?;
    cut_basis(&gram, layout, opts.gap_tol)
}

/// `learn_basis` with the state cardinality picked automatically: the cut is
/// placed at the largest relative eigenvalue gap among the admissible
/// dimensions (L+1)(m+q) + n, n = 0 .. (L+1)p. The supplied layout's n_state
/// is ignored.
pub fn learn_basis_auto(
    set: &TrajectorySet,
    s_n: &SymMatrix,
    opts: &LearnOptions,
) -> Result<(LearnedBasis, usize), BehaviorError> {
    let base = *set.layout();
    // Excitation depends on n_state; defer the check to the final pass.
    let mut pre = *opts;
    pre.check_excitation = false;
    let gram = pooled_corrected_gram(set, s_n, &pre)?;
    let (vals, _) = gram.eigen_desc();
    let wd = base.window_dim();
    let mut best: Option<(f64, usize)> = None;
    for n in 0..=(base.lag + 1) * base.p {
        let g = (base.lag + 1) * (base.m + base.q) + n;
        if g == 0 || g >= wd {
            continue;
        }
        let hi = vals[g - 1];
        let lo = vals[g];
        if hi <= 0.0 {
            continue;
        }
        let ratio = if lo <= 0.0 { f64::INFINITY } else { hi / lo };
        if best.map(|(r, _)| ratio > r).unwrap_or(true) {
            best = Some((ratio, n));
        }
    }
    let (_, n_state) = best.ok_or_else(|| {
        BehaviorError::Layout("spectrum offers no admissible subspace cut".into())
    })?;
    let layout = SignalLayout::new(base.p, base.m, base.q, base.lag, n_state)?;
    let set2 = TrajectorySet::new(layout, set.trajectories().to_vec())?;
    let learned = learn_basis(&set2, s_n, opts)?;
    Ok((learned, n_state))
}

fn pooled_corrected_gram(
    set: &TrajectorySet,
    s_n: &SymMatrix,
    opts: &LearnOptions,
) -> Result<SymMatrix, BehaviorError> {
    let layout = *set.layout();
    if s_n.dim() != layout.w_dim() {
        return Err(BehaviorError::BasisShape {
            expected: format!("noise covariance of dimension {}", layout.w_dim()),
            got: format!("{}", s_n.dim()),
        });
    }
    let depth = layout.lag + 1;
    let need = depth.max(layout.lag + layout.n_state + 1);
    let pe_order = layout.lag + layout.n_state + 1;
    let mut gram = DMatrix::zeros(layout.window_dim(), layout.window_dim());
    let mut cols = None;
    for i in 0..set.len() {
        let t = &set.trajectories()[i];
        if t.ncols() < need {
            return Err(BehaviorError::TooShort { trajectory: i, len: t.ncols(), need });
        }
        if opts.check_excitation && !is_persistently_exciting(&set.input_rows(i), pe_order)? {
            return Err(BehaviorError::NotPersistentlyExciting { trajectory: i, order: pe_order });
        }
        let h = hankel(t, depth)?;
        cols.get_or_insert(h.ncols());
        gram += &h * h.transpose();
    }
    gram /= set.len() as f64;
    let bias = block_diag_copies(s_n.mat(), depth) * cols.unwrap_or(0) as f64;
    Ok(SymMatrix::from_average(&(gram - bias)))
}

fn cut_basis(gram: &SymMatrix, layout: SignalLayout, gap_tol: f64) -> Result<LearnedBasis, BehaviorError> {
    let (vals, vecs) = gram.eigen_desc();
    let g = layout.g_dim();
    if g >= layout.window_dim() {
        return Err(BehaviorError::Layout(format!(
            "subspace dimension {g} leaves no discarded directions in a {}-dimensional window",
            layout.window_dim()
        )));
    }
    let hi = vals[g - 1];
    let lo = vals[g];
    let spectral_gap = if hi <= 0.0 {
        0.0
    } else if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    };
    let gap_warning = spectral_gap < gap_tol;
    let f = numerics::orthonormalize(&vecs.columns(0, g).into_owned())?;
    let basis = BehaviorBasis::new(layout, f)?;
    Ok(LearnedBasis { basis, spectrum: vals, spectral_gap, gap_warning })
}

/// Builds the exact window-subspace basis of a kernel model: the orthonormal
/// null space of the block-banded constraint matrix that applies the kernel
/// at every window step where it fully fits. Fails when the null-space
/// dimension disagrees with the layout's g_dim.
pub fn exact_basis_from_kernel(
    model: &KernelModel,
    layout: &SignalLayout,
) -> Result<BehaviorBasis, BehaviorError> {
    if model.p() != layout.p || model.m() != layout.m || model.q() != layout.q {
        return Err(BehaviorError::Layout(format!(
            "kernel channels ({}, {}, {}) do not match layout ({}, {}, {})",
            model.p(),
            model.m(),
            model.q(),
            layout.p,
            layout.m,
            layout.q
        )));
    }
    let ell = model.lag();
    let big_l = layout.lag;
    if ell > big_l {
        return Err(BehaviorError::Layout(format!(
            "kernel lag {ell} exceeds window horizon {big_l}"
        )));
    }
    let w = layout.w_dim();
    let rows = (big_l + 1 - ell) * layout.p;
    let mut cmat = DMatrix::zeros(rows, layout.window_dim());
    for (blk, s) in (ell..=big_l).enumerate() {
        for j in 0..=ell {
            let coeff = model.stacked_coefficient(j);
            cmat.view_mut((blk * layout.p, (s - j) * w), (layout.p, w))
                .copy_from(&coeff);
        }
    }
    let f = numerics::null_space(&cmat, numerics::RANK_TOL)?;
    if f.ncols() != layout.g_dim() {
        return Err(BehaviorError::InconsistentLayout { expected: layout.g_dim(), got: f.ncols() });
    }
    BehaviorBasis::new(*layout, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
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

    #[test]
    fn hankel_of_scalar_ramp() {
        let signal = DMatrix::from_row_slice(1, 5, &[0.0, 1.0, 2.0, 3.0, 4.0]);
        let h = hankel(&signal, 2).unwrap();
        assert_eq!(h.nrows(), 2);
        assert_eq!(h.ncols(), 4);
        assert_eq!(h[(0, 0)], 0.0);
        assert_eq!(h[(1, 0)], 1.0);
        assert_eq!(h[(0, 3)], 3.0);
        assert_eq!(h[(1, 3)], 4.0);
    }

    #[test]
    fn hankel_depth_full_length_has_one_column() {
        let signal = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let h = hankel(&signal, 3).unwrap();
        assert_eq!(h.ncols(), 1);
        assert_eq!(h.column(0).as_slice(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn persistent_excitation_of_random_and_constant_signals() {
        let mut rng = StdRng::seed_from_u64(17);
        let noise = DMatrix::from_fn(2, 40, |_, _| rng.sample::<f64, _>(StandardNormal));
        assert!(is_persistently_exciting(&noise, 4).unwrap());
        let constant = DMatrix::from_element(1, 40, 1.0);
        assert!(!is_persistently_exciting(&constant, 2).unwrap());
        // A pure sinusoid carries two independent shifts, not three.
        let sine = DMatrix::from_fn(1, 60, |_, k| (0.7 * k as f64).sin());
        assert!(is_persistently_exciting(&sine, 2).unwrap());
        assert!(!is_persistently_exciting(&sine, 3).unwrap());
        // Too short to certify.
        let short = DMatrix::from_fn(1, 3, |_, k| k as f64);
        assert!(!is_persistently_exciting(&short, 4).unwrap());
    }

    #[test]
    fn integrator_exact_basis_matches_hand_null_space() {
        // One-step windows of the integrator satisfy -y0 + 0*u0 + y1 - u1 = 0.
        let layout = SignalLayout::new(1, 1, 0, 1, 1).unwrap();
        let basis = exact_basis_from_kernel(&integrator_model(), &layout).unwrap();
        assert_eq!(basis.f().ncols(), 3);
        let c = DMatrix::from_row_slice(1, 4, &[-1.0, 0.0, 1.0, -1.0]);
        assert!((c * basis.f()).abs().max() < 1e-10);
        // Windows from a simulated trajectory live in the span.
        let mut plant = crate::simulator::kernel::KernelPlant::new(integrator_model());
        let mut wprev = DVector::from_vec(vec![0.0, 0.0]);
        for k in 0..6 {
            let u = DVector::from_element(1, (k as f64).cos());
            let y = plant.step(&u, &DVector::zeros(0));
            let wk = DVector::from_vec(vec![y[0], u[0]]);
            let window = DVector::from_vec(vec![wprev[0], wprev[1], wk[0], wk[1]]);
            assert!(basis.window_residual(&window) < 1e-10);
            wprev = wk;
        }
    }

    #[test]
    fn exact_basis_rejects_wrong_state_cardinality() {
        let layout = SignalLayout::new(1, 1, 0, 1, 0).unwrap();
        assert!(matches!(
            exact_basis_from_kernel(&integrator_model(), &layout),
            Err(BehaviorError::InconsistentLayout { expected: 2, got: 3 })
        ));
    }

    fn noisy_integrator_set(
        n_traj: usize,
        len: usize,
        noise_sd: f64,
        seed: u64,
    ) -> (TrajectorySet, SymMatrix) {
        let layout = SignalLayout::new(1, 1, 0, 1, 1).unwrap();
        let mut rng = StdRng::seed_from_u64(seed);
        let mut trajs = Vec::new();
        for _ in 0..n_traj {
            let mut plant = crate::simulator::kernel::KernelPlant::new(integrator_model());
            let mut cols = Vec::new();
            for _ in 0..len {
                let u = DVector::from_element(1, rng.sample::<f64, _>(StandardNormal));
                let y = plant.step(&u, &DVector::zeros(0));
                let ny: f64 = rng.sample(StandardNormal);
                let nu: f64 = rng.sample(StandardNormal);
                cols.push(DVector::from_vec(vec![y[0] + noise_sd * ny, u[0] + noise_sd * nu]));
            }
            trajs.push(DMatrix::from_columns(&cols));
        }
        let s_n = SymMatrix::from_average(&(DMatrix::identity(2, 2) * noise_sd * noise_sd));
        (TrajectorySet::new(layout, trajs).unwrap(), s_n)
    }

    #[test]
    fn learned_integrator_basis_approaches_exact_subspace() {
        let layout = SignalLayout::new(1, 1, 0, 1, 1).unwrap();
        let exact = exact_basis_from_kernel(&integrator_model(), &layout).unwrap();
        let (set, s_n) = noisy_integrator_set(400, 30, 0.1, 5);
        let learned = learn_basis(&set, &s_n, &LearnOptions::default()).unwrap();
        let d = numerics::chordal_distance(learned.basis.f(), exact.f()).unwrap();
        assert!(d < 0.05, "chordal distance {d} too large");
        assert!(!learned.gap_warning);
        // Fewer, shorter trajectories learn a worse subspace.
        let (small, s_n2) = noisy_integrator_set(12, 30, 0.1, 6);
        let rough = learn_basis(&small, &s_n2, &LearnOptions::default()).unwrap();
        let d2 = numerics::chordal_distance(rough.basis.f(), exact.f()).unwrap();
        assert!(d2 > d, "more data should tighten the subspace ({d2} vs {d})");
    }

    #[test]
    fn auto_state_detection_recovers_integrator_dimension() {
        let (set, s_n) = noisy_integrator_set(400, 30, 0.05, 9);
        let (_, n) = learn_basis_auto(&set, &s_n, &LearnOptions::default()).unwrap();
        assert_eq!(n, 1);
    }

    #[test]
    fn excitation_failure_names_the_trajectory() {
        let layout = SignalLayout::new(1, 1, 0, 1, 1).unwrap();
        let (set, s_n) = noisy_integrator_set(3, 30, 0.1, 8);
        let mut trajs = set.trajectories().to_vec();
        // Overwrite trajectory 1's input row with a constant.
        let len = trajs[1].ncols();
        for c in 0..len {
            trajs[1][(1, c)] = 1.0;
        }
        let set = TrajectorySet::new(layout, trajs).unwrap();
        match learn_basis(&set, &s_n, &LearnOptions::default()) {
            Err(BehaviorError::NotPersistentlyExciting { trajectory, order }) => {
                assert_eq!(trajectory, 1);
                assert_eq!(order, 3);
            }
            other => panic!("expected excitation failure, got {other:?}"),
        }
    }

    #[test]
    fn trajectory_file_round_trip_is_lossless() {
        let (set, _) = noisy_integrator_set(3, 7, 0.3, 12);
        let mut buf = Vec::new();
        set.write_to(&mut buf, &["seed=12".into()]).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# seed=12\ny1 u1\n"));
        let back = TrajectorySet::read_from(std::io::Cursor::new(buf), 1, 1).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in set.trajectories().iter().zip(back.trajectories()) {
            assert_eq!(a, b, "round trip must be bit-exact");
        }
    }

    #[test]
    fn reader_rejects_ragged_blocks_and_bad_headers() {
        let text = "y1 u1\n1.0 2.0\n3.0 4.0\n\n5.0 6.0\n";
        let r = TrajectorySet::read_from(std::io::Cursor::new(text.as_bytes()), 1, 1);
        assert!(matches!(r, Err(BehaviorError::RaggedSet { .. })));
        let text = "y1 z1\n1.0 2.0\n";
        let r = TrajectorySet::read_from(std::io::Cursor::new(text.as_bytes()), 1, 1);
        assert!(matches!(r, Err(BehaviorError::Parse { .. })));
        let text = "y1 u1\n1.0\n";
        let r = TrajectorySet::read_from(std::io::Cursor::new(text.as_bytes()), 1, 1);
        assert!(matches!(r, Err(BehaviorError::Parse { .. })));
    }

    #[test]
    fn state_map_inverts_in_span_windows() {
        let layout = SignalLayout::new(1, 1, 0, 1, 1).unwrap();
        let basis = exact_basis_from_kernel(&integrator_model(), &layout).unwrap();
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..20 {
            let g = DVector::from_fn(3, |_, _| rng.sample::<f64, _>(StandardNormal));
            let window = basis.f() * &g;
            let back = basis.state_map(&window);
            assert_abs_diff_eq!(back, g, epsilon = 1e-12);
        }
    }
}
