//! Small dense semidefinite programs.
//!
//! A problem is a linear objective over symmetric-matrix, rectangular-matrix
//! and scalar variables, subject to affine LMIs `C + Σ Mᵢ(Vᵢ) ⪰ 0` and
//! scalar linear equalities. Each LMI term is a linear map from one variable
//! to a symmetric matrix of the LMI's order, which keeps block-structured
//! inequalities like
//!
//! ```text
//! [ X − W      AX + BY ]
//! [ (AX+BY)ᵀ   X       ]  ⪰ 0
//! ```
//!
//! easy to write down: `X` enters through two congruences and one sandwich
//! product, `Y` through one sandwich product.
//!
//! [`solve`] runs a primal-dual interior-point method on the homogeneous
//! self-dual embedding with Nesterov–Todd scaling and Mehrotra
//! predictor-corrector steps. [`SdpProblem::to_sdpa`] exports the problem in
//! SDPA sparse format for cross-checking with external solvers.

mod solver;

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

pub use solver::{solve, IterationInfo};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarId(usize);

impl VarId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKind {
    /// Symmetric matrix of the given order.
    Symmetric(usize),
    /// Unstructured `rows × cols` matrix.
    Matrix { rows: usize, cols: usize },
    Scalar,
}

impl VarKind {
    pub fn shape(self) -> (usize, usize) {
        match self {
            VarKind::Symmetric(k) => (k, k),
            VarKind::Matrix { rows, cols } => (rows, cols),
            VarKind::Scalar => (1, 1),
        }
    }

    /// Number of scalar degrees of freedom.
    pub fn dof(self) -> usize {
        match self {
            VarKind::Symmetric(k) => k * (k + 1) / 2,
            VarKind::Matrix { rows, cols } => rows * cols,
            VarKind::Scalar => 1,
        }
    }

    /// The `p`-th basis matrix of this variable's space.
    fn basis(self, p: usize) -> Matrix {
        let (r, c) = self.shape();
        let mut e = Matrix::zeros(r, c);
        match self {
            VarKind::Symmetric(k) => {
                let (i, j) = sym_index(k, p);
                e[(i, j)] = 1.0;
                e[(j, i)] = 1.0;
            }
            VarKind::Matrix { cols, .. } => e[(p / cols, p % cols)] = 1.0,
            VarKind::Scalar => e[(0, 0)] = 1.0,
        }
        e
    }
}

/// Upper-triangle enumeration `(0,0), (0,1), …, (0,k−1), (1,1), …`.
fn sym_index(k: usize, mut p: usize) -> (usize, usize) {
    for i in 0..k {
        let row = k - i;
        if p < row {
            return (i, i + p);
        }
        p -= row;
    }
    unreachable!("symmetric coordinate out of range")
}

#[derive(Debug, Clone)]
pub struct SdpVariable {
    pub id: VarId,
    pub kind: VarKind,
    pub label: String,
}

/// Linear map from a variable to a symmetric matrix of the LMI order `N`.
#[derive(Debug, Clone)]
pub enum LinearMap {
    /// `L V Lᵀ` for a symmetric variable `V`; `L` is `N × k`.
    Congruence(Matrix),
    /// `L V R + (L V R)ᵀ`; `L` is `N × rows`, `R` is `cols × N`.
    Sandwich { left: Matrix, right: Matrix },
    /// `v · M` for a scalar variable `v`; `M` is symmetric `N × N`.
    Scale(Matrix),
}

impl LinearMap {
    pub fn apply(&self, value: &Matrix) -> Matrix {
        match self {
            LinearMap::Congruence(l) => l * value * l.transpose(),
            LinearMap::Sandwich { left, right } => {
                let p = left * value * right;
                &p + p.transpose()
            }
            LinearMap::Scale(m) => m * value[(0, 0)],
        }
    }

    fn output_order(&self) -> (usize, usize) {
        match self {
            LinearMap::Congruence(l) => (l.nrows(), l.nrows()),
            LinearMap::Sandwich { left, right } => (left.nrows(), right.ncols()),
            LinearMap::Scale(m) => (m.nrows(), m.ncols()),
        }
    }

    fn check(&self, kind: VarKind, order: usize) -> std::result::Result<(), String> {
        let (vr, vc) = kind.shape();
        match self {
            LinearMap::Congruence(l) => {
                if !matches!(kind, VarKind::Symmetric(_)) {
                    return Err("congruence term needs a symmetric variable".into());
                }
                if l.ncols() != vr {
                    return Err(format!("congruence factor has {} columns, variable order is {vr}", l.ncols()));
                }
            }
            LinearMap::Sandwich { left, right } => {
                if left.ncols() != vr || right.nrows() != vc {
                    return Err(format!(
                        "sandwich factors {}x{} and {}x{} do not fit a {vr}x{vc} variable",
                        left.nrows(),
                        left.ncols(),
                        right.nrows(),
                        right.ncols()
                    ));
                }
            }
            LinearMap::Scale(m) => {
                if kind != VarKind::Scalar {
                    return Err("scale term needs a scalar variable".into());
                }
                let asym = (m - m.transpose()).amax();
                if asym > linalg::SYM_TOL * m.norm() {
                    return Err("scale matrix is not symmetric".into());
                }
            }
        }
        if self.output_order() != (order, order) {
            return Err(format!(
                "term produces a {}x{} matrix in an LMI of order {order}",
                self.output_order().0,
                self.output_order().1
            ));
        }
        Ok(())
    }
}

/// `constant + Σ map(variable) ⪰ 0`.
#[derive(Debug, Clone)]
pub struct AffineLmi {
    pub label: String,
    pub constant: Matrix,
    pub terms: Vec<(VarId, LinearMap)>,
}

impl AffineLmi {
    pub fn new(label: impl Into<String>, constant: Matrix) -> Self {
        Self { label: label.into(), constant, terms: Vec::new() }
    }

    pub fn order(&self) -> usize {
        self.constant.nrows()
    }

    pub fn term(mut self, var: VarId, map: LinearMap) -> Self {
        self.terms.push((var, map));
        self
    }

    /// Adds `L V Lᵀ`.
    pub fn congruence(self, var: VarId, left: Matrix) -> Self {
        self.term(var, LinearMap::Congruence(left))
    }

    /// Adds `L V R + (L V R)ᵀ`.
    pub fn sandwich(self, var: VarId, left: Matrix, right: Matrix) -> Self {
        self.term(var, LinearMap::Sandwich { left, right })
    }

    /// Adds `v · M`.
    pub fn scale(self, var: VarId, m: Matrix) -> Self {
        self.term(var, LinearMap::Scale(m))
    }

    /// The LMI matrix at the given variable values.
    pub fn evaluate(&self, values: &[Matrix]) -> Matrix {
        let mut m = self.constant.clone();
        for (var, map) in &self.terms {
            m += map.apply(&values[var.0]);
        }
        linalg::symmetrize(&m)
    }
}

/// `Σ ⟨Cᵢ, Vᵢ⟩` with the Frobenius inner product.
#[derive(Debug, Clone, Default)]
pub struct LinearFunctional {
    pub terms: Vec<(VarId, Matrix)>,
}

impl LinearFunctional {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn term(mut self, var: VarId, coeff: Matrix) -> Self {
        self.terms.push((var, coeff));
        self
    }

    pub fn evaluate(&self, values: &[Matrix]) -> f64 {
        self.terms.iter().map(|(v, c)| c.dot(&values[v.0])).sum()
    }
}

#[derive(Debug, Clone)]
pub struct LinearEquality {
    pub lhs: LinearFunctional,
    pub rhs: f64,
}

#[derive(Debug, Clone, Default)]
pub struct SdpProblem {
    pub variables: Vec<SdpVariable>,
    pub objective: LinearFunctional,
    pub lmis: Vec<AffineLmi>,
    pub equalities: Vec<LinearEquality>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverSettings {
    pub feas_tol: f64,
    /// Relative duality gap tolerance.
    pub gap_tol: f64,
    pub max_iter: usize,
    /// Fraction of the step to the cone boundary taken each iteration.
    pub step_fraction: f64,
    /// Exponent `p` of the Mehrotra centering heuristic `σ = (1 − α)ᵖ`.
    pub centering_exponent: f64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { feas_tol: 1e-8, gap_tol: 1e-8, max_iter: 200, step_fraction: 0.99, centering_exponent: 3.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdpStatus {
    Optimal,
    Infeasible,
    Unbounded,
    MaxIterations,
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub status: SdpStatus,
    /// Variable values indexed by [`VarId::index`]; scalars are `1 × 1`.
    pub values: Vec<Matrix>,
    /// Dual matrices, one per LMI, normalized like `values`.
    pub duals: Vec<Matrix>,
    pub objective_value: f64,
    pub dual_objective: f64,
    pub iterations: usize,
    /// Relative duality gap at termination.
    pub duality_gap: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub history: Vec<IterationInfo>,
    pub message: String,
}

impl SdpSolution {
    pub fn value(&self, var: VarId) -> &Matrix {
        &self.values[var.0]
    }

    pub fn scalar(&self, var: VarId) -> f64 {
        self.values[var.0][(0, 0)]
    }

    pub fn is_optimal(&self) -> bool {
        self.status == SdpStatus::Optimal
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Verification {
    pub feasible: bool,
    /// Most negative LMI eigenvalue, or minus the largest equality residual,
    /// whichever is worse. Non-negative when every constraint holds exactly.
    pub worst_violation: f64,
    /// Label of the constraint attaining `worst_violation`.
    pub worst_constraint: String,
}

impl SdpProblem {
    pub fn new() -> Self {
        Self::default()
    }

    fn add_variable(&mut self, kind: VarKind, label: impl Into<String>) -> VarId {
        let id = VarId(self.variables.len());
        self.variables.push(SdpVariable { id, kind, label: label.into() });
        id
    }

    pub fn add_symmetric(&mut self, order: usize, label: impl Into<String>) -> VarId {
        self.add_variable(VarKind::Symmetric(order), label)
    }

    pub fn add_matrix(&mut self, rows: usize, cols: usize, label: impl Into<String>) -> VarId {
        self.add_variable(VarKind::Matrix { rows, cols }, label)
    }

    pub fn add_scalar(&mut self, label: impl Into<String>) -> VarId {
        self.add_variable(VarKind::Scalar, label)
    }

    pub fn add_lmi(&mut self, lmi: AffineLmi) {
        self.lmis.push(lmi);
    }

    pub fn add_equality(&mut self, lhs: LinearFunctional, rhs: f64) {
        self.equalities.push(LinearEquality { lhs, rhs });
    }

    pub fn minimize(&mut self, objective: LinearFunctional) {
        self.objective = objective;
    }

    pub fn kind(&self, var: VarId) -> VarKind {
        self.variables[var.0].kind
    }

    /// Checks that every term refers to a declared variable and has
    /// consistent dimensions.
    pub fn validate(&self) -> Result<()> {
        let malformed = |msg: String| Err(Error::MalformedProblem(msg));
        if self.variables.is_empty() {
            return malformed("problem has no variables".into());
        }
        if self.lmis.is_empty() {
            return malformed("problem has no LMI constraints".into());
        }
        for v in &self.variables {
            if v.kind.dof() == 0 {
                return malformed(format!("variable '{}' is empty", v.label));
            }
        }
        let known = |id: VarId| id.0 < self.variables.len();
        let check_functional = |f: &LinearFunctional, what: &str| -> Result<()> {
            for (id, c) in &f.terms {
                if !known(*id) {
                    return malformed(format!("{what} references an undeclared variable"));
                }
                let shape = self.variables[id.0].kind.shape();
                if c.shape() != shape {
                    return malformed(format!(
                        "{what} coefficient for '{}' is {}x{}, variable is {}x{}",
                        self.variables[id.0].label,
                        c.nrows(),
                        c.ncols(),
                        shape.0,
                        shape.1
                    ));
                }
                if c.iter().any(|x| !x.is_finite()) {
                    return malformed(format!("{what} has a non-finite coefficient"));
                }
            }
            Ok(())
        };
        check_functional(&self.objective, "objective")?;
        for (k, eq) in self.equalities.iter().enumerate() {
            check_functional(&eq.lhs, &format!("equality {k}"))?;
            if !eq.rhs.is_finite() {
                return malformed(format!("equality {k} has a non-finite right-hand side"));
            }
        }
        for lmi in &self.lmis {
            let n = lmi.constant.nrows();
            if n == 0 || lmi.constant.ncols() != n {
                return malformed(format!("LMI '{}' constant is not square", lmi.label));
            }
            if lmi.constant.iter().any(|x| !x.is_finite()) {
                return malformed(format!("LMI '{}' constant is not finite", lmi.label));
            }
            if (&lmi.constant - lmi.constant.transpose()).amax() > linalg::SYM_TOL * lmi.constant.norm() {
                return malformed(format!("LMI '{}' constant is not symmetric", lmi.label));
            }
            for (id, map) in &lmi.terms {
                if !known(*id) {
                    return malformed(format!("LMI '{}' references an undeclared variable", lmi.label));
                }
                map.check(self.variables[id.0].kind, n)
                    .or_else(|e| malformed(format!("LMI '{}', variable '{}': {e}", lmi.label, self.variables[id.0].label)))?;
            }
        }
        Ok(())
    }

    /// Flattens the problem into `min cᵀx` s.t. `F₀ⱼ + Σ xₚ Fₚⱼ ⪰ 0`, `Ax = b`.
    fn compile(&self) -> Result<Compiled> {
        self.validate()?;
        let mut offsets = Vec::with_capacity(self.variables.len());
        let mut n = 0;
        for v in &self.variables {
            offsets.push(n);
            n += v.kind.dof();
        }
        let flatten = |f: &LinearFunctional| {
            let mut row = nalgebra::DVector::zeros(n);
            for (id, coeff) in &f.terms {
                let kind = self.variables[id.0].kind;
                for p in 0..kind.dof() {
                    row[offsets[id.0] + p] += coeff.dot(&kind.basis(p));
                }
            }
            row
        };
        let c = flatten(&self.objective);
        let mut a = Matrix::zeros(self.equalities.len(), n);
        let mut b = nalgebra::DVector::zeros(self.equalities.len());
        for (k, eq) in self.equalities.iter().enumerate() {
            a.row_mut(k).copy_from(&flatten(&eq.lhs).transpose());
            b[k] = eq.rhs;
        }
        let blocks = self
            .lmis
            .iter()
            .map(|lmi| {
                let mut coeffs: Vec<(usize, Matrix)> = Vec::new();
                for (id, map) in &lmi.terms {
                    let kind = self.variables[id.0].kind;
                    for p in 0..kind.dof() {
                        let f = map.apply(&kind.basis(p));
                        let idx = offsets[id.0] + p;
                        match coeffs.iter_mut().find(|(q, _)| *q == idx) {
                            Some((_, m)) => *m += f,
                            None => coeffs.push((idx, f)),
                        }
                    }
                }
                coeffs.retain(|(_, m)| m.amax() > 0.0);
                coeffs.sort_by_key(|(p, _)| *p);
                Block { constant: linalg::symmetrize(&lmi.constant), coeffs }
            })
            .collect();
        Ok(Compiled { n, offsets, c, a, b, blocks })
    }

    fn unflatten(&self, offsets: &[usize], x: &nalgebra::DVector<f64>) -> Vec<Matrix> {
        self.variables
            .iter()
            .zip(offsets)
            .map(|(v, &off)| {
                let (r, c) = v.kind.shape();
                let mut m = Matrix::zeros(r, c);
                for p in 0..v.kind.dof() {
                    m += v.kind.basis(p) * x[off + p];
                }
                m
            })
            .collect()
    }

    /// Evaluates every LMI's minimum eigenvalue and every equality residual
    /// at `values`. An LMI counts as satisfied when its minimum eigenvalue is
    /// at least `−tol · max(1, ‖constant‖)`; an equality when its residual is
    /// at most `tol · max(1, |rhs|)`.
    pub fn verify(&self, values: &[Matrix], tol: f64) -> Result<Verification> {
        self.validate()?;
        if values.len() != self.variables.len() {
            return Err(Error::MalformedProblem(format!(
                "{} values supplied for {} variables",
                values.len(),
                self.variables.len()
            )));
        }
        for (v, val) in self.variables.iter().zip(values) {
            if val.shape() != v.kind.shape() {
                return Err(Error::MalformedProblem(format!("value for '{}' has the wrong shape", v.label)));
            }
        }
        let mut feasible = true;
        let mut worst = f64::INFINITY;
        let mut worst_constraint = String::new();
        for lmi in &self.lmis {
            let lam = linalg::min_eigenvalue(&lmi.evaluate(values));
            if lam < -tol * lmi.constant.norm().max(1.0) {
                feasible = false;
            }
            if lam < worst {
                worst = lam;
                worst_constraint = lmi.label.clone();
            }
        }
        for (k, eq) in self.equalities.iter().enumerate() {
            let r = (eq.lhs.evaluate(values) - eq.rhs).abs();
            if r > tol * eq.rhs.abs().max(1.0) {
                feasible = false;
            }
            if -r < worst {
                worst = -r;
                worst_constraint = format!("equality {k}");
            }
        }
        Ok(Verification { feasible, worst_violation: worst, worst_constraint })
    }

    /// SDPA sparse ("dat-s") export.
    ///
    /// SDPA's primal form is `min cᵀx` s.t. `Σ xᵢFᵢ − F₀ ⪰ 0`, so each LMI
    /// contributes its constant negated as `F₀`. Equalities `aᵀx = b` become
    /// one diagonal (LP) block holding the pair `aᵀx − b ≥ 0`,
    /// `−aᵀx + b ≥ 0`. Decision variables are numbered in declaration order;
    /// symmetric variables contribute their upper triangle row by row,
    /// rectangular ones their entries row-major. Only the upper triangle of
    /// each block is written, indices are 1-based, and values use Rust's
    /// shortest round-trip formatting.
    pub fn to_sdpa(&self) -> Result<String> {
        let comp = self.compile()?;
        let mut out = String::new();
        let _ = writeln!(out, "\"ccsynth SDP export: {} LMIs, {} equalities", self.lmis.len(), self.equalities.len());
        for v in &self.variables {
            let _ = writeln!(out, "* variable '{}' {:?} at x{}", v.label, v.kind, comp.offsets[v.id.0] + 1);
        }
        let neq = self.equalities.len();
        let nblocks = comp.blocks.len() + usize::from(neq > 0);
        let _ = writeln!(out, "{}", comp.n);
        let _ = writeln!(out, "{nblocks}");
        let mut sizes: Vec<String> = comp.blocks.iter().map(|b| b.constant.nrows().to_string()).collect();
        if neq > 0 {
            sizes.push(format!("-{}", 2 * neq));
        }
        let _ = writeln!(out, "{}", sizes.join(" "));
        let cs: Vec<String> = comp.c.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(out, "{}", cs.join(" "));
        let mut entry = |mat: usize, blk: usize, m: &Matrix, sign: f64| {
            for i in 0..m.nrows() {
                for j in i..m.ncols() {
                    let v = sign * m[(i, j)];
                    if v != 0.0 {
                        let _ = writeln!(out, "{mat} {blk} {} {} {v:?}", i + 1, j + 1);
                    }
                }
            }
        };
        for (bi, block) in comp.blocks.iter().enumerate() {
            entry(0, bi + 1, &block.constant, -1.0);
            for (p, f) in &block.coeffs {
                entry(p + 1, bi + 1, f, 1.0);
            }
        }
        if neq > 0 {
            let blk = comp.blocks.len() + 1;
            for k in 0..neq {
                let mut rows = vec![(0usize, -comp.b[k])];
                for p in 0..comp.n {
                    if comp.a[(k, p)] != 0.0 {
                        rows.push((p + 1, comp.a[(k, p)]));
                    }
                }
                for (mat, v) in rows {
                    // F₀ holds the negated constant: aᵀx − b ⪰ 0 means F₀ = b.
                    let (first, second) = if mat == 0 { (-v, v) } else { (v, -v) };
                    let _ = writeln!(out, "{mat} {blk} {} {} {first:?}", 2 * k + 1, 2 * k + 1);
                    let _ = writeln!(out, "{mat} {blk} {} {} {second:?}", 2 * k + 2, 2 * k + 2);
                }
            }
        }
        Ok(out)
    }
}

struct Block {
    constant: Matrix,
    /// `(parameter index, Fₚ)` for every parameter this block depends on.
    coeffs: Vec<(usize, Matrix)>,
}

struct Compiled {
    n: usize,
    offsets: Vec<usize>,
    c: nalgebra::DVector<f64>,
    a: Matrix,
    b: nalgebra::DVector<f64>,
    blocks: Vec<Block>,
}
