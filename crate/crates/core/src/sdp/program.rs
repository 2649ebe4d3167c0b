//! Conic-program representation: matrix variables, affine PSD blocks,
//! scalar linear constraints, and an optional linear objective.
//!
//! A program collects named variables (symmetric, rectangular, or scalar)
//! and constraints of the form
//!
//! ```text
//! F(x) = C + sum_k x_k A_k  >= 0   (one per PSD block)
//! <a, x> + beta >= 0               (scalar linear constraints)
//! ```
//!
//! where `x` is the concatenation of all scalar components: a symmetric s x s
//! variable contributes s(s+1)/2 components (lower triangle), a rectangular
//! r x c variable contributes r*c. Blocks are built on a grid partition so
//! callers place sub-matrices the way the underlying matrix inequalities are
//! written; off-diagonal placements are mirrored as transposes automatically
//! and the compiled coefficient matrices are validated to be symmetric.
//! Scalar linear constraints compile to 1 x 1 PSD blocks so the solver sees
//! one uniform cone.

use std::collections::HashMap;
use std::fmt;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::numerics::NumericsError;

/// Asymmetry ceiling for compiled coefficient matrices.
const COMPILE_SYM_TOL: f64 = 1e-9;

/// Errors from program construction.
#[derive(Debug, Error)]
pub enum SdpError {
    #[error("variable name `{0}` is already taken")]
    DuplicateVariable(String),
    #[error("block `{block}`: {reason}")]
    BadPlacement { block: String, reason: String },
    #[error("block `{block}` compiles to an asymmetric matrix (defect {defect:.3e})")]
    AsymmetricBlock { block: String, defect: f64 },
    #[error("{0}")]
    Shape(String),
    #[error("Schur system factorization failed: {0}")]
    Factorization(String),
    #[error("iteration limit {0} reached before the iterate stabilized")]
    Stalled(usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Handle to a declared variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub(crate) usize);

/// Shape and symmetry of a variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    /// Symmetric dim x dim; components are the lower triangle, column-major.
    Symmetric(usize),
    /// Rectangular rows x cols; components are row-major entries.
    Rectangular(usize, usize),
}

impl VarKind {
    pub fn rows(&self) -> usize {
        match self {
            VarKind::Symmetric(d) => *d,
            VarKind::Rectangular(r, _) => *r,
        }
    }

    pub fn cols(&self) -> usize {
        match self {
            VarKind::Symmetric(d) => *d,
            VarKind::Rectangular(_, c) => *c,
        }
    }

    pub fn component_count(&self) -> usize {
        match self {
            VarKind::Symmetric(d) => d * (d + 1) / 2,
            VarKind::Rectangular(r, c) => r * c,
        }
    }

    /// Entries of the matrix basis element for one scalar component.
    fn basis_entries(&self, k: usize) -> Vec<(usize, usize)> {
        match self {
            VarKind::Symmetric(d) => {
                let (a, b) = sym_unindex(*d, k);
                if a == b {
                    vec![(a, a)]
                } else {
                    vec![(a, b), (b, a)]
                }
            }
            VarKind::Rectangular(_, c) => vec![(k / c, k % c)],
        }
    }
}

/// Component index of entry (a, b), a >= b, in the lower triangle.
fn sym_index(d: usize, a: usize, b: usize) -> usize {
    debug_assert!(a >= b && a < d);
    // Columns 0..b hold d, d-1, ... entries: b*(2d - b + 1)/2 in total.
    b * (2 * d - b + 1) / 2 + (a - b)
}

/// Inverse of `sym_index`.
fn sym_unindex(d: usize, mut k: usize) -> (usize, usize) {
    for b in 0..d {
        let len = d - b;
        if k < len {
            return (b + k, b);
        }
        k -= len;
    }
    unreachable!("component index out of range");
}

#[derive(Debug, Clone)]
struct Variable {
    name: String,
    kind: VarKind,
    offset: usize,
}

/// One term placed in a grid cell of a block under construction.
#[derive(Debug, Clone)]
enum Term {
    Constant(DMatrix<f64>),
    /// left * VAR * right.
    Sandwich { left: DMatrix<f64>, var: VarId, right: DMatrix<f64> },
    /// VAR[0,0] * coeff for a 1 x 1 variable.
    Scaled { var: VarId, coeff: DMatrix<f64> },
    /// <weights, VAR> placed in a 1 x 1 cell.
    Inner { var: VarId, weights: DMatrix<f64> },
}

/// Grid-partitioned affine PSD block under construction.
#[derive(Debug, Clone)]
pub struct BlockBuilder {
    name: String,
    partition: Vec<usize>,
    placements: Vec<(usize, usize, Term)>,
}

impl BlockBuilder {
    /// A block partitioned into `partition` row/column groups.
    pub fn new(name: &str, partition: &[usize]) -> Self {
        assert!(!partition.is_empty() && partition.iter().all(|s| *s > 0), "empty partition");
        BlockBuilder { name: name.to_string(), partition: partition.to_vec(), placements: Vec::new() }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// Adds a constant matrix in grid cell (i, j); mirrored if off-diagonal.
    pub fn constant(&mut self, i: usize, j: usize, mat: DMatrix<f64>) -> &mut Self {
        self.placements.push((i, j, Term::Constant(mat)));
        self
    }

    /// Adds `left * var * right` in grid cell (i, j); mirrored if off-diagonal.
    pub fn sandwich(
        &mut self,
        i: usize,
        j: usize,
        left: DMatrix<f64>,
        var: VarId,
        right: DMatrix<f64>,
    ) -> &mut Self {
        self.placements.push((i, j, Term::Sandwich { left, var, right }));
        self
    }

    /// Adds `var * coeff` for a scalar variable in grid cell (i, j).
    pub fn scaled(&mut self, i: usize, j: usize, var: VarId, coeff: DMatrix<f64>) -> &mut Self {
        self.placements.push((i, j, Term::Scaled { var, coeff }));
        self
    }

    /// Adds the scalar `<weights, var>` in a 1 x 1 grid cell (i, j).
    pub fn inner(&mut self, i: usize, j: usize, var: VarId, weights: DMatrix<f64>) -> &mut Self {
        self.placements.push((i, j, Term::Inner { var, weights }));
        self
    }
}

/// One nonzero of a coefficient matrix.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Triplet {
    pub r: u32,
    pub c: u32,
    pub v: f64,
}

/// A compiled affine PSD block: constant plus per-component coefficients.
#[derive(Debug, Clone)]
pub(crate) struct CompiledBlock {
    pub name: String,
    pub dim: usize,
    pub constant: DMatrix<f64>,
    /// Sorted by scalar-component index; each coefficient matrix is stored
    /// as the full (symmetric) set of nonzeros.
    pub terms: Vec<(usize, Vec<Triplet>)>,
}

impl CompiledBlock {
    /// Evaluates constant + sum x_k A_k.
    pub fn evaluate(&self, x: &[f64]) -> DMatrix<f64> {
        let mut m = self.constant.clone();
        for (k, trips) in &self.terms {
            let xk = x[*k];
            if xk != 0.0 {
                for t in trips {
                    m[(t.r as usize, t.c as usize)] += xk * t.v;
                }
            }
        }
        m
    }
}

/// Conic program over matrix variables.
#[derive(Debug, Clone, Default)]
pub struct ConicProgram {
    variables: Vec<Variable>,
    scalar_len: usize,
    pub(crate) blocks: Vec<CompiledBlock>,
    /// Objective coefficients over scalar components (minimize c' x).
    pub(crate) objective: Option<Vec<f64>>,
}

impl ConicProgram {
    pub fn new() -> Self {
        Self::default()
    }

    fn declare(&mut self, name: &str, kind: VarKind) -> Result<VarId, SdpError> {
        if self.variables.iter().any(|v| v.name == name) {
            return Err(SdpError::DuplicateVariable(name.to_string()));
        }
        let offset = self.scalar_len;
        self.scalar_len += kind.component_count();
        self.variables.push(Variable { name: name.to_string(), kind, offset });
        Ok(VarId(self.variables.len() - 1))
    }

    /// Declares a symmetric dim x dim variable.
    pub fn symmetric_var(&mut self, name: &str, dim: usize) -> Result<VarId, SdpError> {
        self.declare(name, VarKind::Symmetric(dim))
    }

    /// Declares a rectangular rows x cols variable.
    pub fn matrix_var(&mut self, name: &str, rows: usize, cols: usize) -> Result<VarId, SdpError> {
        self.declare(name, VarKind::Rectangular(rows, cols))
    }

    /// Declares a scalar (1 x 1) variable.
    pub fn scalar_var(&mut self, name: &str) -> Result<VarId, SdpError> {
        self.declare(name, VarKind::Rectangular(1, 1))
    }

    pub fn var_kind(&self, var: VarId) -> VarKind {
        self.variables[var.0].kind
    }

    pub fn var_name(&self, var: VarId) -> &str {
        &self.variables[var.0].name
    }

    pub fn var_by_name(&self, name: &str) -> Option<VarId> {
        self.variables.iter().position(|v| v.name == name).map(VarId)
    }

    pub(crate) fn scalar_len(&self) -> usize {
        self.scalar_len
    }

    pub fn block_names(&self) -> Vec<&str> {
        self.blocks.iter().map(|b| b.name.as_str()).collect()
    }

    /// Reconstructs a variable's matrix value from the scalar vector.
    pub(crate) fn unpack(&self, var: VarId, x: &[f64]) -> DMatrix<f64> {
        let v = &self.variables[var.0];
        match v.kind {
            VarKind::Symmetric(d) => {
                let mut m = DMatrix::zeros(d, d);
                for b in 0..d {
                    for a in b..d {
                        let val = x[v.offset + sym_index(d, a, b)];
                        m[(a, b)] = val;
                        m[(b, a)] = val;
                    }
                }
                m
            }
            VarKind::Rectangular(r, c) => {
                let mut m = DMatrix::zeros(r, c);
                for k in 0..r * c {
                    m[(k / c, k % c)] = x[v.offset + k];
                }
                m
            }
        }
    }

    /// Compiles linear-functional terms `sum_i <coef_i, V_i>` to a scalar
    /// coefficient vector over all components.
    fn linear_coeffs(&self, terms: &[(VarId, DMatrix<f64>)]) -> Result<Vec<f64>, SdpError> {
        let mut c = vec![0.0; self.scalar_len];
        for (var, coef) in terms {
            let v = &self.variables[var.0];
            if coef.nrows() != v.kind.rows() || coef.ncols() != v.kind.cols() {
                return Err(SdpError::Shape(format!(
                    "linear coefficient for `{}` is {}x{}, variable is {}x{}",
                    v.name,
                    coef.nrows(),
                    coef.ncols(),
                    v.kind.rows(),
                    v.kind.cols()
                )));
            }
            for k in 0..v.kind.component_count() {
                let mut val = 0.0;
                for (a, b) in v.kind.basis_entries(k) {
                    val += coef[(a, b)];
                }
                c[v.offset + k] += val;
            }
        }
        Ok(c)
    }

    /// Adds the scalar constraint `sum_i <coef_i, V_i> + constant >= 0`,
    /// stored as a 1 x 1 PSD block.
    pub fn add_linear(
        &mut self,
        name: &str,
        terms: &[(VarId, DMatrix<f64>)],
        constant: f64,
    ) -> Result<(), SdpError> {
        let coeffs = self.linear_coeffs(terms)?;
        let terms = coeffs
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(k, v)| (k, vec![Triplet { r: 0, c: 0, v: *v }]))
            .collect();
        self.blocks.push(CompiledBlock {
            name: name.to_string(),
            dim: 1,
            constant: DMatrix::from_element(1, 1, constant),
            terms,
        });
        Ok(())
    }

    /// Sets the objective `minimize sum_i <coef_i, V_i>`.
    pub fn set_objective(&mut self, terms: &[(VarId, DMatrix<f64>)]) -> Result<(), SdpError> {
        self.objective = Some(self.linear_coeffs(terms)?);
        Ok(())
    }

    /// Compiles and adds a PSD block, validating shapes and symmetry.
    pub fn add_psd_block(&mut self, builder: BlockBuilder) -> Result<(), SdpError> {
        let name = builder.name.clone();
        let bad = |reason: String| SdpError::BadPlacement { block: name.clone(), reason };
        let offsets: Vec<usize> = builder
            .partition
            .iter()
            .scan(0, |acc, s| {
                let o = *acc;
                *acc += s;
                Some(o)
            })
            .collect();
        let dim: usize = builder.partition.iter().sum();
        let ncells = builder.partition.len();

        let mut constant = DMatrix::zeros(dim, dim);
        let mut comp: HashMap<usize, HashMap<(u32, u32), f64>> = HashMap::new();
        let add_entry = |comp: &mut HashMap<usize, HashMap<(u32, u32), f64>>,
                             k: usize,
                             r: usize,
                             c: usize,
                             v: f64| {
            if v != 0.0 {
                *comp.entry(k).or_default().entry((r as u32, c as u32)).or_insert(0.0) += v;
            }
        };

        for (i, j, term) in &builder.placements {
            if *i >= ncells || *j >= ncells {
                return Err(bad(format!("cell ({i}, {j}) outside {ncells}-way partition")));
            }
            let (ri, ci) = (builder.partition[*i], builder.partition[*j]);
            let (ro, co) = (offsets[*i], offsets[*j]);
            let mirror = i != j;
            match term {
                Term::Constant(mat) => {
                    if mat.nrows() != ri || mat.ncols() != ci {
                        return Err(bad(format!(
                            "constant in cell ({i}, {j}) is {}x{}, cell is {ri}x{ci}",
                            mat.nrows(),
                            mat.ncols()
                        )));
                    }
                    for r in 0..ri {
                        for c in 0..ci {
                            constant[(ro + r, co + c)] += mat[(r, c)];
                            if mirror {
                                constant[(co + c, ro + r)] += mat[(r, c)];
                            }
                        }
                    }
                }
                Term::Sandwich { left, var, right } => {
                    let v = &self.variables[var.0];
                    let (vr, vc) = (v.kind.rows(), v.kind.cols());
                    if left.nrows() != ri || left.ncols() != vr || right.nrows() != vc
                        || right.ncols() != ci
                    {
                        return Err(bad(format!(
                            "sandwich of `{}` in cell ({i}, {j}): {}x{} * {vr}x{vc} * {}x{} does not fill {ri}x{ci}",
                            v.name,
                            left.nrows(),
                            left.ncols(),
                            right.nrows(),
                            right.ncols()
                        )));
                    }
                    for k in 0..v.kind.component_count() {
                        for (a, b) in v.kind.basis_entries(k) {
                            // Contribution left[:, a] * right[b, :].
                            for r in 0..ri {
                                let lv = left[(r, a)];
                                if lv == 0.0 {
                                    continue;
                                }
                                for c in 0..ci {
                                    let val = lv * right[(b, c)];
                                    add_entry(&mut comp, v.offset + k, ro + r, co + c, val);
                                    if mirror {
                                        add_entry(&mut comp, v.offset + k, co + c, ro + r, val);
                                    }
                                }
                            }
                        }
                    }
                }
                Term::Scaled { var, coeff } => {
                    let v = &self.variables[var.0];
                    if v.kind.component_count() != 1 {
                        return Err(bad(format!("`{}` is not scalar", v.name)));
                    }
                    if coeff.nrows() != ri || coeff.ncols() != ci {
                        return Err(bad(format!(
                            "scaled coefficient in cell ({i}, {j}) is {}x{}, cell is {ri}x{ci}",
                            coeff.nrows(),
                            coeff.ncols()
                        )));
                    }
                    for r in 0..ri {
                        for c in 0..ci {
                            add_entry(&mut comp, v.offset, ro + r, co + c, coeff[(r, c)]);
                            if mirror {
                                add_entry(&mut comp, v.offset, co + c, ro + r, coeff[(r, c)]);
                            }
                        }
                    }
                }
                Term::Inner { var, weights } => {
                    if ri != 1 || ci != 1 {
                        return Err(bad(format!("inner product needs a 1x1 cell, ({i}, {j}) is {ri}x{ci}")));
                    }
                    let v = &self.variables[var.0];
                    if weights.nrows() != v.kind.rows() || weights.ncols() != v.kind.cols() {
                        return Err(bad(format!(
                            "inner weights for `{}` are {}x{}, variable is {}x{}",
                            v.name,
                            weights.nrows(),
                            weights.ncols(),
                            v.kind.rows(),
                            v.kind.cols()
                        )));
                    }
                    for k in 0..v.kind.component_count() {
                        let mut val = 0.0;
                        for (a, b) in v.kind.basis_entries(k) {
                            val += weights[(a, b)];
                        }
                        add_entry(&mut comp, v.offset + k, ro, co, val);
                        if mirror {
                            add_entry(&mut comp, v.offset + k, co, ro, val);
                        }
                    }
                }
            }
        }

        // Symmetry validation and conversion to sorted triplets.
        let sym_defect = (&constant - constant.transpose()).abs().max();
        if sym_defect > COMPILE_SYM_TOL {
            return Err(SdpError::AsymmetricBlock { block: name, defect: sym_defect });
        }
        let constant = (&constant + constant.transpose()) * 0.5;
        let mut terms: Vec<(usize, Vec<Triplet>)> = Vec::with_capacity(comp.len());
        for (k, entries) in comp {
            let mut defect: f64 = 0.0;
            for ((r, c), v) in &entries {
                let vt = entries.get(&(*c, *r)).copied().unwrap_or(0.0);
                defect = defect.max((v - vt).abs());
            }
            if defect > COMPILE_SYM_TOL {
                return Err(SdpError::AsymmetricBlock { block: name, defect });
            }
            let mut trips: Vec<Triplet> =
                entries.into_iter().map(|((r, c), v)| Triplet { r, c, v }).collect();
            trips.sort_by_key(|t| (t.r, t.c));
            terms.push((k, trips));
        }
        terms.sort_by_key(|(k, _)| *k);
        self.blocks.push(CompiledBlock { name, dim, constant, terms });
        Ok(())
    }

    /// Evaluates every block at an assignment; returns (name, value) pairs.
    pub fn block_values(&self, x: &Assignment) -> Vec<(String, DMatrix<f64>)> {
        self.blocks.iter().map(|b| (b.name.clone(), b.evaluate(&x.scalars))).collect()
    }

    /// Smallest eigenvalue across all block values at an assignment.
    pub fn margin(&self, x: &Assignment) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                let m = b.evaluate(&x.scalars);
                let sym = (&m + m.transpose()) * 0.5;
                crate::numerics::eigen_sym_desc(&sym).0.min()
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Objective value at an assignment, when an objective is set.
    pub fn objective_value(&self, x: &Assignment) -> Option<f64> {
        self.objective
            .as_ref()
            .map(|c| c.iter().zip(&x.scalars).map(|(a, b)| a * b).sum())
    }

    pub(crate) fn assignment_from_scalars(&self, scalars: Vec<f64>) -> Assignment {
        Assignment { scalars }
    }
}

/// Values for all scalar components of a program's variables.
#[derive(Debug, Clone)]
pub struct Assignment {
    pub(crate) scalars: Vec<f64>,
}

impl Assignment {
    /// Matrix value of one variable.
    pub fn value(&self, prog: &ConicProgram, var: VarId) -> DMatrix<f64> {
        prog.unpack(var, &self.scalars)
    }
}

impl fmt::Display for ConicProgram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "conic program: {} variables, {} blocks", self.variables.len(), self.blocks.len())?;
        for v in &self.variables {
            let (r, c) = (v.kind.rows(), v.kind.cols());
            let kind = match v.kind {
                VarKind::Symmetric(_) => "symmetric",
                VarKind::Rectangular(..) => "rectangular",
            };
            writeln!(f, "  var {} : {kind} {r}x{c} ({} components)", v.name, v.kind.component_count())?;
        }
        for b in &self.blocks {
            let nnz: usize = b.terms.iter().map(|(_, t)| t.len()).sum();
            writeln!(
                f,
                "  block {} : dim {}, {} active components, {} coefficient nonzeros",
                b.name,
                b.dim,
                b.terms.len(),
                nnz
            )?;
        }
        match &self.objective {
            Some(c) => {
                let nnz = c.iter().filter(|v| **v != 0.0).count();
                writeln!(f, "  objective: minimize, {nnz} nonzero coefficients")?
            }
            None => writeln!(f, "  objective: none (feasibility)")?,
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn symmetric_index_round_trip() {
        let d = 5;
        for b in 0..d {
            for a in b..d {
                let k = sym_index(d, a, b);
                assert_eq!(sym_unindex(d, k), (a, b));
            }
        }
        assert_eq!(sym_index(d, 0, 0), 0);
        assert_eq!(sym_index(d, d - 1, d - 1), d * (d + 1) / 2 - 1);
    }

    #[test]
    fn block_compilation_mirrors_and_evaluates() {
        let mut prog = ConicProgram::new();
        let w = prog.symmetric_var("W", 2).unwrap();
        let y = prog.matrix_var("Y", 1, 2).unwrap();
        let mut blk = BlockBuilder::new("test", &[2, 1]);
        blk.sandwich(0, 0, DMatrix::identity(2, 2), w, DMatrix::identity(2, 2));
        blk.sandwich(1, 0, DMatrix::identity(1, 1), y, DMatrix::identity(2, 2));
        blk.constant(1, 1, DMatrix::from_element(1, 1, 3.0));
        prog.add_psd_block(blk).unwrap();

        // W = [[1, 2], [2, 4]], Y = [5, 6].
        let x = prog.assignment_from_scalars(vec![1.0, 2.0, 4.0, 5.0, 6.0]);
        let vals = prog.block_values(&x);
        let m = &vals[0].1;
        let expected = DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 2.0, 5.0, 2.0, 4.0, 6.0, 5.0, 6.0, 3.0],
        );
        assert!((m - expected).abs().max() < 1e-14);
        assert_eq!(x.value(&prog, w)[(0, 1)], 2.0);
        assert_eq!(x.value(&prog, y)[(0, 1)], 6.0);
    }

    #[test]
    fn asymmetric_diagonal_placement_is_rejected() {
        let mut prog = ConicProgram::new();
        let w = prog.symmetric_var("W", 2).unwrap();
        let mut blk = BlockBuilder::new("bad", &[2]);
        // W * A alone is asymmetric for nontrivial A.
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        blk.sandwich(0, 0, DMatrix::identity(2, 2), w, a);
        assert!(matches!(prog.add_psd_block(blk), Err(SdpError::AsymmetricBlock { .. })));
    }

    #[test]
    fn linear_constraint_compiles_traces() {
        let mut prog = ConicProgram::new();
        let x = prog.symmetric_var("X", 2).unwrap();
        prog.add_linear("budget", &[(x, -DMatrix::identity(2, 2))], 5.0).unwrap();
        // tr(X) = 1 + 4 -> 5 - 5 = 0.
        let asn = prog.assignment_from_scalars(vec![1.0, 2.0, 4.0]);
        let vals = prog.block_values(&asn);
        assert!((vals[0].1[(0, 0)] - 0.0).abs() < 1e-14);
        let s = prog.to_string();
        assert!(s.contains("var X"));
        assert!(s.contains("block budget"));
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut prog = ConicProgram::new();
        prog.scalar_var("g").unwrap();
        assert!(matches!(prog.scalar_var("g"), Err(SdpError::DuplicateVariable(_))));
    }
}
