//! Controller synthesis: stationary LQR with chance constraints.
//!
//! With `Y = KX` the stationarity condition `X ⪰ (A+BK)X(A+BK)ᵀ + W` becomes
//! the LMI `[X − W, AX + BY; (AX + BY)ᵀ, X] ⪰ 0`, and every feasible `X`
//! dominates the true stationary covariance `X̄(K)`. The quadratic cost
//! `Tr(QX) + Tr(R K X Kᵀ)` is handled by an epigraph variable `P` and a Schur
//! complement, and each chance constraint turns into one more LMI via the
//! factors in [`crate::probbounds`].

use nalgebra::{Cholesky, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::probbounds::{self, DisturbanceClass, LevelKind, Sidedness, LEVEL_FLOOR};
use crate::sdp::{self, AffineLmi, LinearFunctional, SdpProblem, SdpSolution, SdpStatus, SolverSettings, VarId};

/// Relative floor applied to the eigenvalues of a JCC shape matrix `G⁻¹`.
pub const JCC_REG: f64 = 1e-6;
/// `X` counts as singular when `λ_min(X) ≤ SING_TOL·‖X‖`.
pub const SING_TOL: f64 = 1e-10;
/// When the requested level is below the minimum level, the design uses
/// `ε̄·(1 + LEVEL_MARGIN)` so that the constrained problem keeps an interior.
pub const LEVEL_MARGIN: f64 = 1e-4;
/// Relative slack below which a constraint is reported as active.
const ACTIVE_TOL: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct SystemModel {
    pub a: Matrix,
    pub b: Matrix,
    pub c: Option<Matrix>,
    pub w: Matrix,
    pub v: Option<Matrix>,
}

pub(crate) fn ensure_pd(m: &Matrix, what: &str) -> Result<Matrix> {
    let m = linalg::checked_symmetric(m)?;
    let min_eigenvalue = linalg::min_eigenvalue(&m);
    if !(min_eigenvalue > 0.0) {
        return Err(Error::OutOfRange(format!(
            "{what} must be positive definite (minimum eigenvalue {min_eigenvalue:.3e})"
        )));
    }
    Ok(m)
}

impl SystemModel {
    /// State-feedback model `x⁺ = Ax + Bu + w`, `Cov(w) = W ≻ 0`.
    pub fn new(a: Matrix, b: Matrix, w: Matrix) -> Result<Self> {
        let model = Self { a, b, c: None, w, v: None };
        model.validate()?;
        Ok(model)
    }

    /// Adds the measurement `y = Cx + v`, `Cov(v) = V ≻ 0`.
    pub fn with_output(mut self, c: Matrix, v: Matrix) -> Result<Self> {
        self.c = Some(c);
        self.v = Some(v);
        self.validate()?;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    pub fn p(&self) -> Option<usize> {
        self.c.as_ref().map(|c| c.nrows())
    }

    pub fn validate(&self) -> Result<()> {
        linalg::ensure_square(&self.a, "A")?;
        let n = self.n();
        for m in [&self.a, &self.b, &self.w] {
            linalg::ensure_finite(m)?;
        }
        if self.b.nrows() != n || self.b.ncols() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "B must be {n}xm with m ≥ 1, got {}x{}",
                self.b.nrows(),
                self.b.ncols()
            )));
        }
        linalg::ensure_shape(&self.w, n, n, "W")?;
        ensure_pd(&self.w, "W")?;
        match (&self.c, &self.v) {
            (None, None) => {}
            (Some(c), Some(v)) => {
                linalg::ensure_finite(c)?;
                linalg::ensure_finite(v)?;
                if c.ncols() != n || c.nrows() == 0 {
                    return Err(Error::DimensionMismatch(format!(
                        "C must be px{n} with p ≥ 1, got {}x{}",
                        c.nrows(),
                        c.ncols()
                    )));
                }
                linalg::ensure_shape(v, c.nrows(), c.nrows(), "V")?;
                ensure_pd(v, "V")?;
            }
            _ => return Err(Error::DimensionMismatch("C and V must be given together".into())),
        }
        Ok(())
    }

    pub fn closed_loop(&self, k: &Matrix) -> Matrix {
        &self.a + &self.b * k
    }

    /// `X̄(K)`, the stationary state covariance under `u = Kx`.
    pub fn stationary_covariance(&self, k: &Matrix) -> Result<Matrix> {
        linalg::ensure_shape(k, self.m(), self.n(), "K")?;
        linalg::solve_discrete_lyapunov(&self.closed_loop(k), &self.w)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostSpec {
    pub q: Matrix,
    pub r: Matrix,
}

impl CostSpec {
    pub fn new(q: Matrix, r: Matrix) -> Result<Self> {
        let q = ensure_pd(&q, "Q")?;
        let r = ensure_pd(&r, "R")?;
        Ok(Self { q, r })
    }

    pub(crate) fn check(&self, model: &SystemModel) -> Result<()> {
        linalg::ensure_shape(&self.q, model.n(), model.n(), "Q")?;
        linalg::ensure_shape(&self.r, model.m(), model.m(), "R")?;
        ensure_pd(&self.q, "Q")?;
        ensure_pd(&self.r, "R")?;
        Ok(())
    }

    /// `E[xᵀQx + uᵀRu] = Tr(QX̄) + Tr(R K X̄ Kᵀ)`.
    pub fn stationary_cost(&self, k: &Matrix, xbar: &Matrix) -> f64 {
        (&self.q * xbar).trace() + (&self.r * k * xbar * k.transpose()).trace()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    State,
    Input,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintForm {
    Scc,
    Jcc,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Geometry {
    /// `fᵀv ≤ bound` (one-sided) or `|fᵀv| ≤ bound` (two-sided).
    Halfspace { normal: DVector<f64>, bound: f64 },
    /// `vᵀ G⁻¹ v ≤ bound`; `shape_inv` is `G⁻¹` and may be singular.
    Ellipsoid { shape_inv: Matrix, bound: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChanceConstraint {
    pub label: String,
    pub target: Target,
    /// Ignored for joint constraints.
    pub side: Sidedness,
    pub geometry: Geometry,
    pub eps: f64,
    pub class: DisturbanceClass,
}

impl ChanceConstraint {
    pub fn scc(
        label: impl Into<String>,
        target: Target,
        side: Sidedness,
        normal: DVector<f64>,
        bound: f64,
        eps: f64,
        class: DisturbanceClass,
    ) -> Self {
        Self { label: label.into(), target, side, geometry: Geometry::Halfspace { normal, bound }, eps, class }
    }

    pub fn jcc(
        label: impl Into<String>,
        target: Target,
        shape_inv: Matrix,
        bound: f64,
        eps: f64,
        class: DisturbanceClass,
    ) -> Self {
        Self {
            label: label.into(),
            target,
            side: Sidedness::TwoSided,
            geometry: Geometry::Ellipsoid { shape_inv, bound },
            eps,
            class,
        }
    }

    pub fn with_eps(&self, eps: f64) -> Self {
        Self { eps, ..self.clone() }
    }

    pub fn form(&self) -> ConstraintForm {
        match self.geometry {
            Geometry::Halfspace { .. } => ConstraintForm::Scc,
            Geometry::Ellipsoid { .. } => ConstraintForm::Jcc,
        }
    }

    pub fn level_kind(&self) -> LevelKind {
        match self.form() {
            ConstraintForm::Scc => LevelKind::scc(self.side),
            ConstraintForm::Jcc => LevelKind::Jcc,
        }
    }

    /// Dimension of the constrained vector: `n` for state, `m` for input.
    pub fn dimension(&self, model: &SystemModel) -> usize {
        match self.target {
            Target::State => model.n(),
            Target::Input => model.m(),
        }
    }

    pub fn validate(&self, model: &SystemModel) -> Result<()> {
        let dim = self.dimension(model);
        let what = &self.label;
        match &self.geometry {
            Geometry::Halfspace { normal, bound } => {
                if normal.len() != dim {
                    return Err(Error::DimensionMismatch(format!(
                        "constraint '{what}': normal has length {}, expected {dim}",
                        normal.len()
                    )));
                }
                if normal.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite);
                }
                if !(*bound > 0.0 && bound.is_finite()) {
                    return Err(Error::OutOfRange(format!("constraint '{what}': bound must be positive")));
                }
            }
            Geometry::Ellipsoid { shape_inv, bound } => {
                linalg::ensure_shape(shape_inv, dim, dim, "JCC shape")?;
                let s = linalg::checked_symmetric(shape_inv)?;
                let ev = linalg::sym_eigenvalues(&s);
                let max = ev.last().copied().unwrap_or(0.0);
                if !(max > 0.0) || ev[0] < -linalg::EIG_TOL * max {
                    return Err(Error::OutOfRange(format!(
                        "constraint '{what}': shape matrix must be positive semidefinite and nonzero"
                    )));
                }
                if !(*bound > 0.0 && bound.is_finite()) {
                    return Err(Error::OutOfRange(format!("constraint '{what}': bound must be positive")));
                }
            }
        }
        self.factor(model).map(|_| ())
    }

    /// `α`, `β` or `γ` at the constraint's own level.
    pub fn factor(&self, model: &SystemModel) -> Result<f64> {
        probbounds::factor(self.class, self.level_kind(), self.dimension(model) as u32, self.eps)
    }

    /// `G`, the inverse of `G⁻¹` after flooring its eigenvalues at
    /// `JCC_REG·λ_max`.
    pub fn regularized_shape(&self) -> Result<Matrix> {
        let Geometry::Ellipsoid { shape_inv, .. } = &self.geometry else {
            return Err(Error::MalformedProblem(format!("constraint '{}' is not a joint constraint", self.label)));
        };
        let eig = SymmetricEigen::new(linalg::checked_symmetric(shape_inv)?);
        let max = eig.eigenvalues.max();
        let floor = JCC_REG * max;
        let inv = eig.eigenvalues.map(|l| 1.0 / l.max(floor));
        let q = &eig.eigenvectors;
        Ok(linalg::symmetrize(&(q * Matrix::from_diagonal(&inv) * q.transpose())))
    }

    /// Whether the realized vector `v` (state or input) violates the
    /// constraint. Joint constraints use the original `G⁻¹`.
    pub fn is_violated(&self, v: &DVector<f64>) -> bool {
        match &self.geometry {
            Geometry::Halfspace { normal, bound } => {
                let s = normal.dot(v);
                match self.side {
                    Sidedness::OneSided => s > *bound,
                    Sidedness::TwoSided => s.abs() > *bound,
                }
            }
            Geometry::Ellipsoid { shape_inv, bound } => (v.transpose() * shape_inv * v)[(0, 0)] > *bound,
        }
    }
}

/// Which SDP variables play the roles of the state covariance used by state
/// constraints, the covariance used by input constraints, and `Y = K·(that
/// covariance)`. State feedback uses `(X, X, Y)`; output feedback `(X, S, Z)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CspVars {
    pub x_state: VarId,
    pub x_input: VarId,
    pub y: VarId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FactorSpec {
    Fixed(f64),
    /// The factor is the given scalar SDP variable.
    Variable(VarId),
}

/// `N × k` matrix with an identity block starting at row `offset`.
pub(crate) fn embed(rows: usize, offset: usize, k: usize) -> Matrix {
    let mut e = Matrix::zeros(rows, k);
    for i in 0..k {
        e[(offset + i, i)] = 1.0;
    }
    e
}

/// `[X − W, AX + BY; (AX + BY)ᵀ, X] ⪰ 0`.
pub fn build_stationarity_lmi(model: &SystemModel, x: VarId, y: VarId) -> AffineLmi {
    stationarity_lmi("stationarity", &model.a, &model.b, &model.w, x, y)
}

/// `[X − N, AX + BY; (AX + BY)ᵀ, X] ⪰ 0` for a driving-noise covariance `N`.
pub(crate) fn stationarity_lmi(label: &str, a: &Matrix, b: &Matrix, noise: &Matrix, x: VarId, y: VarId) -> AffineLmi {
    let n = a.nrows();
    let (top, bottom) = (embed(2 * n, 0, n), embed(2 * n, n, n));
    let mut constant = Matrix::zeros(2 * n, 2 * n);
    constant.view_mut((0, 0), (n, n)).copy_from(&(-noise));
    AffineLmi::new(label, constant)
        .congruence(x, top.clone())
        .congruence(x, bottom.clone())
        .sandwich(x, &top * a, bottom.transpose())
        .sandwich(y, &top * b, bottom.transpose())
}

/// `[P, R^{1/2}Y; (R^{1/2}Y)ᵀ, X] ⪰ 0`, so `Tr(P) ≥ Tr(R K X Kᵀ)`.
pub fn build_cost_lmi(cost: &CostSpec, p: VarId, x: VarId, y: VarId) -> Result<AffineLmi> {
    let (m, n) = (cost.r.nrows(), cost.q.nrows());
    let r_half = linalg::sqrt_psd(&cost.r)?;
    let (top, bottom) = (embed(m + n, 0, m), embed(m + n, m, n));
    Ok(AffineLmi::new("cost", Matrix::zeros(m + n, m + n))
        .congruence(p, top.clone())
        .congruence(x, bottom.clone())
        .sandwich(y, &top * r_half, bottom.transpose()))
}

/// LMI form of a chance constraint:
///
/// * state SCC: `αh² − gᵀXg ≥ 0`
/// * input SCC: `[βe², fᵀY; Yᵀf, X] ⪰ 0`
/// * state JCC: `γdG − X ⪰ 0`
/// * input JCC: `[γcF, Y; Yᵀ, X] ⪰ 0`
///
/// Returns the LMI and the factor when it is fixed.
pub fn build_constraint_lmi(
    model: &SystemModel,
    con: &ChanceConstraint,
    vars: CspVars,
    factor: FactorSpec,
) -> Result<(AffineLmi, Option<f64>)> {
    let n = model.n();
    let label = format!("constraint '{}'", con.label);
    let fixed = match factor {
        FactorSpec::Fixed(f) => {
            if !(f > 0.0 && f.is_finite()) {
                return Err(Error::OutOfRange(format!("{label}: factor must be positive, got {f}")));
            }
            Some(f)
        }
        FactorSpec::Variable(_) => None,
    };
    // The factor multiplies `scale` in every form.
    let (order, scale, lmi) = match (&con.geometry, con.target) {
        (Geometry::Halfspace { normal, bound }, Target::State) => {
            let gt = Matrix::from_row_slice(1, normal.len(), normal.as_slice());
            let lmi = AffineLmi::new(label, Matrix::zeros(1, 1)).sandwich(vars.x_state, gt.clone() * -0.5, gt.transpose());
            (1, Matrix::from_element(1, 1, bound * bound), lmi)
        }
        (Geometry::Halfspace { normal, bound }, Target::Input) => {
            let (first, rest) = (embed(1 + n, 0, 1), embed(1 + n, 1, n));
            let mut scale = Matrix::zeros(1 + n, 1 + n);
            scale[(0, 0)] = bound * bound;
            let lmi = AffineLmi::new(label, Matrix::zeros(1 + n, 1 + n))
                .sandwich(vars.y, first * normal.transpose(), rest.transpose())
                .congruence(vars.x_input, rest);
            (1 + n, scale, lmi)
        }
        (Geometry::Ellipsoid { bound, .. }, Target::State) => {
            let g = con.regularized_shape()?;
            let lmi = AffineLmi::new(label, Matrix::zeros(n, n)).sandwich(
                vars.x_state,
                Matrix::identity(n, n) * -0.5,
                Matrix::identity(n, n),
            );
            (n, g * *bound, lmi)
        }
        (Geometry::Ellipsoid { bound, .. }, Target::Input) => {
            let m = model.m();
            let f = con.regularized_shape()?;
            let (first, rest) = (embed(m + n, 0, m), embed(m + n, m, n));
            let scale = &first * (f * *bound) * first.transpose();
            let lmi = AffineLmi::new(label, Matrix::zeros(m + n, m + n))
                .sandwich(vars.y, first, rest.transpose())
                .congruence(vars.x_input, rest);
            (m + n, scale, lmi)
        }
    };
    debug_assert_eq!(lmi.order(), order);
    let lmi = match factor {
        FactorSpec::Fixed(f) => AffineLmi { constant: scale * f, ..lmi },
        FactorSpec::Variable(t) => lmi.scale(t, scale),
    };
    Ok((lmi, fixed))
}

/// `K = Y X⁻¹`.
pub fn recover_gain(x: &Matrix, y: &Matrix) -> Result<Matrix> {
    let x = linalg::checked_symmetric(x)?;
    linalg::ensure_finite(y)?;
    if y.ncols() != x.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "Y has {} columns but X has order {}",
            y.ncols(),
            x.nrows()
        )));
    }
    let min_eigenvalue = linalg::min_eigenvalue(&x);
    if min_eigenvalue <= SING_TOL * x.norm() {
        return Err(Error::SingularX { min_eigenvalue });
    }
    let chol = Cholesky::new(x).ok_or(Error::SingularX { min_eigenvalue })?;
    // X symmetric: K = Y X⁻¹ = (X⁻¹ Yᵀ)ᵀ.
    Ok(chol.solve(&y.transpose()).transpose())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthesisSettings {
    pub sdp: SolverSettings,
}

impl Default for SynthesisSettings {
    /// Tighter than the solver defaults: the cost is flat to first order in
    /// `K` at the optimum, so the gain is only resolved to roughly the square
    /// root of the duality gap.
    fn default() -> Self {
        Self { sdp: SolverSettings { feas_tol: 1e-11, gap_tol: 1e-12, ..SolverSettings::default() } }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverStats {
    pub status: SdpStatus,
    pub iterations: usize,
    pub objective: f64,
    pub duality_gap: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
}

impl From<&SdpSolution> for SolverStats {
    fn from(s: &SdpSolution) -> Self {
        Self {
            status: s.status,
            iterations: s.iterations,
            objective: s.objective_value,
            duality_gap: s.duality_gap,
            primal_residual: s.primal_residual,
            dual_residual: s.dual_residual,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintReport {
    pub label: String,
    /// Level the constraint was imposed at.
    pub eps: f64,
    pub factor: f64,
    /// Minimum eigenvalue of the constraint LMI at `(X̄, K X̄)`, relative to
    /// the norm of its constant part.
    pub relative_slack: f64,
    pub active: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisResult {
    pub k: Matrix,
    /// Stationary covariance of the closed loop, from a Lyapunov solve.
    pub xbar: Matrix,
    /// The SDP's `X`, which dominates `xbar`.
    pub x_sdp: Matrix,
    /// `Tr(QX̄) + Tr(R K X̄ Kᵀ)`.
    pub cost: f64,
    pub constraints: Vec<ConstraintReport>,
    pub solver: SolverStats,
}

impl SynthesisResult {
    pub fn active_constraints(&self) -> Vec<&str> {
        self.constraints.iter().filter(|c| c.active).map(|c| c.label.as_str()).collect()
    }
}

/// A solve that breaks down before reaching the tight tolerances is still
/// accepted when its best iterate meets the solver's default tolerances.
fn acceptable(sol: &SdpSolution) -> bool {
    let fallback = SolverSettings::default();
    matches!(sol.status, SdpStatus::NumericalFailure | SdpStatus::MaxIterations)
        && sol.primal_residual <= fallback.feas_tol
        && sol.dual_residual <= fallback.feas_tol
        && sol.duality_gap <= fallback.gap_tol
}

pub(crate) fn check_status(sol: &SdpSolution, what: &str) -> Result<()> {
    match sol.status {
        SdpStatus::Optimal => Ok(()),
        _ if acceptable(sol) => Ok(()),
        SdpStatus::Infeasible => Err(Error::Infeasible(what.to_string())),
        other => Err(Error::NumericalFailure(format!("{what}: solver stopped with {other:?} ({})", sol.message))),
    }
}

fn csp_variables(p: &mut SdpProblem, model: &SystemModel) -> (VarId, VarId) {
    let x = p.add_symmetric(model.n(), "X");
    let y = p.add_matrix(model.m(), model.n(), "Y");
    (x, y)
}

/// Minimum-violation level of a constraint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MinLevel {
    Level(f64),
    /// The infimum is at or below [`LEVEL_FLOOR`].
    BelowFloor,
}

impl MinLevel {
    /// The level as a number, with `BelowFloor` mapped to `LEVEL_FLOOR`.
    pub fn value(self) -> f64 {
        match self {
            MinLevel::Level(v) => v,
            MinLevel::BelowFloor => LEVEL_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MinLevelResult {
    pub level: MinLevel,
    /// Optimal factor `α`, `β` or `γ`.
    pub factor: f64,
    /// `Y X⁻¹` at the optimizer, when `X` is safely invertible.
    pub k_witness: Option<Matrix>,
    pub solver: SolverStats,
}

/// Smallest level at which `con` is attainable by some stabilizing linear
/// feedback, with the constraints in `fixed` imposed at their own levels.
///
/// The SDP minimizes the factor itself and inverts it afterwards, which is
/// exact for both disturbance classes because every factor is monotone in
/// the level.
pub fn min_violation_level(
    model: &SystemModel,
    con: &ChanceConstraint,
    fixed: &[ChanceConstraint],
    settings: &SynthesisSettings,
) -> Result<MinLevelResult> {
    model.validate()?;
    // The level of `con` itself is irrelevant here; only its geometry is used.
    let probe = con.with_eps(0.25);
    probe.validate(model)?;
    for f in fixed {
        f.validate(model)?;
    }
    let mut p = SdpProblem::new();
    let (x, y) = csp_variables(&mut p, model);
    let t = p.add_scalar("factor");
    let vars = CspVars { x_state: x, x_input: x, y };
    p.add_lmi(build_stationarity_lmi(model, x, y));
    for f in fixed {
        let (lmi, _) = build_constraint_lmi(model, f, vars, FactorSpec::Fixed(f.factor(model)?))?;
        p.add_lmi(lmi);
    }
    let (lmi, _) = build_constraint_lmi(model, con, vars, FactorSpec::Variable(t))?;
    p.add_lmi(lmi);
    p.minimize(LinearFunctional::new().term(t, Matrix::from_element(1, 1, 1.0)));

    let sol = sdp::solve(&p, &settings.sdp)?;
    let k_witness = recover_gain(sol.value(x), sol.value(y)).ok();
    let stats = SolverStats::from(&sol);
    if let Err(e) = check_status(&sol, &format!("no stabilizing gain satisfies the constraints fixed before '{}'", con.label)) {
        // When the infimum is not attained the iterates drift off to large
        // gains and the method breaks down; a witness that provably reaches
        // the floor still settles the question.
        if let (Error::NumericalFailure(_), Some(k)) = (&e, &k_witness) {
            if witness_below_floor(model, con, fixed, k) {
                let factor = achieved_factor(model, con, k)?;
                return Ok(MinLevelResult { level: MinLevel::BelowFloor, factor, k_witness, solver: stats });
            }
        }
        return Err(e);
    }
    let factor = sol.scalar(t);
    let level = level_from_min_factor(model, con, factor)?;
    Ok(MinLevelResult { level, factor, k_witness, solver: stats })
}

fn level_from_min_factor(model: &SystemModel, con: &ChanceConstraint, factor: f64) -> Result<MinLevel> {
    if factor <= 0.0 {
        return Ok(MinLevel::BelowFloor);
    }
    let kind = con.level_kind();
    let upper = if kind == LevelKind::SccOneSided { 0.5 } else { 1.0 };
    let raw = probbounds::level_from_factor_raw(con.class, kind, con.dimension(model) as u32, factor)
        .unwrap_or(f64::INFINITY);
    if raw >= upper {
        return Err(Error::Infeasible(format!(
            "constraint '{}' cannot be met at any admissible level (minimum {raw:.6})",
            con.label
        )));
    }
    Ok(if raw <= LEVEL_FLOOR { MinLevel::BelowFloor } else { MinLevel::Level(raw) })
}

fn witness_below_floor(model: &SystemModel, con: &ChanceConstraint, fixed: &[ChanceConstraint], k: &Matrix) -> bool {
    let fixed_ok = fixed.iter().all(|f| match (achieved_factor(model, f, k), f.factor(model)) {
        (Ok(have), Ok(allowed)) => have <= allowed * (1.0 + 1e-9),
        _ => false,
    });
    fixed_ok
        && achieved_factor(model, con, k)
            .and_then(|f| level_from_min_factor(model, con, f))
            .is_ok_and(|l| l == MinLevel::BelowFloor)
}

/// Smallest factor (`α`, `β` or `γ`) for which the constraint's LMI holds at
/// the stationary covariance of the gain `k`.
pub fn achieved_factor(model: &SystemModel, con: &ChanceConstraint, k: &Matrix) -> Result<f64> {
    let xbar = model.stationary_covariance(k)?;
    let cov = match con.target {
        Target::State => xbar,
        Target::Input => linalg::symmetrize(&(k * &xbar * k.transpose())),
    };
    Ok(match &con.geometry {
        Geometry::Halfspace { normal, bound } => (normal.transpose() * &cov * normal)[(0, 0)] / (bound * bound),
        Geometry::Ellipsoid { bound, .. } => {
            // λ_max(G^{-1/2} Σ G^{-1/2}) / bound, with G^{-1/2} from the floored shape.
            let g_inv_half = linalg::sqrt_psd(&linalg::checked_symmetric(
                &con.regularized_shape()?.try_inverse().ok_or(Error::NumericalFailure("singular shape".into()))?,
            )?)?;
            linalg::max_eigenvalue(&linalg::symmetrize(&(&g_inv_half * cov * &g_inv_half))) / bound
        }
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LevelPlan {
    pub label: String,
    pub requested: f64,
    pub min_level: MinLevel,
    /// `requested`, or just above the minimum level when that is higher.
    pub design_eps: f64,
}

impl LevelPlan {
    pub fn raised(&self) -> bool {
        self.design_eps > self.requested
    }
}

/// Levels the constraints one at a time in the given priority order: each
/// constraint's minimum level is computed with all earlier constraints fixed
/// at their design levels, and the constraint is then fixed at
/// `max(requested, minimum)`.
pub fn plan_levels(
    model: &SystemModel,
    constraints: &[ChanceConstraint],
    settings: &SynthesisSettings,
) -> Result<(Vec<LevelPlan>, Vec<ChanceConstraint>)> {
    let mut fixed: Vec<ChanceConstraint> = Vec::with_capacity(constraints.len());
    let mut plans = Vec::with_capacity(constraints.len());
    for con in constraints {
        let min = min_violation_level(model, con, &fixed, settings)?;
        let design_eps = match min.level {
            MinLevel::Level(l) if con.eps <= l * (1.0 + LEVEL_MARGIN) => l * (1.0 + LEVEL_MARGIN),
            _ => con.eps,
        };
        plans.push(LevelPlan { label: con.label.clone(), requested: con.eps, min_level: min.level, design_eps });
        fixed.push(con.with_eps(design_eps));
    }
    Ok((plans, fixed))
}

/// The optimal unconstrained gain (stationary LQR).
/// Relative margins above `ε̄` tried in turn by [`synthesize_leveled`].
pub const LEVEL_MARGINS: [f64; 5] = [LEVEL_MARGIN, 1e-3, 1e-2, 1e-1, 5e-1];

#[derive(Debug, Clone, PartialEq)]
pub struct LeveledSynthesis {
    pub plans: Vec<LevelPlan>,
    /// Relative margin above `ε̄` used for raised constraints.
    pub margin: f64,
    pub result: SynthesisResult,
}

/// Plans levels, then synthesizes with every raised constraint at
/// `ε̄·(1 + margin)`. Close to `ε̄` the optimal covariance can grow without
/// bound (an open-loop unstable plant pushed toward marginal stability), so
/// on numerical failure the margin is widened through [`LEVEL_MARGINS`].
pub fn synthesize_leveled(
    model: &SystemModel,
    cost: &CostSpec,
    constraints: &[ChanceConstraint],
    settings: &SynthesisSettings,
) -> Result<LeveledSynthesis> {
    let (mut plans, _) = plan_levels(model, constraints, settings)?;
    let any_raised = plans.iter().any(LevelPlan::raised);
    let mut failure = None;
    for &margin in &LEVEL_MARGINS {
        // Raising an earlier constraint only loosens the problem seen by
        // later ones, so their planned minima stay valid.
        for p in plans.iter_mut() {
            if let MinLevel::Level(l) = p.min_level {
                if p.requested <= l * (1.0 + margin) {
                    p.design_eps = l * (1.0 + margin);
                }
            }
        }
        let designed: Vec<_> = constraints.iter().zip(&plans).map(|(c, p)| c.with_eps(p.design_eps)).collect();
        match synthesize_constrained(model, cost, &designed, settings) {
            Ok(result) => return Ok(LeveledSynthesis { plans, margin, result }),
            Err(e @ Error::NumericalFailure(_)) if any_raised => failure = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(failure.expect("at least one margin tried"))
}

pub fn synthesize_unconstrained(
    model: &SystemModel,
    cost: &CostSpec,
    settings: &SynthesisSettings,
) -> Result<SynthesisResult> {
    synthesize_constrained(model, cost, &[], settings)
}

/// The optimal gain subject to the chance constraints at their own levels.
pub fn synthesize_constrained(
    model: &SystemModel,
    cost: &CostSpec,
    constraints: &[ChanceConstraint],
    settings: &SynthesisSettings,
) -> Result<SynthesisResult> {
    model.validate()?;
    cost.check(model)?;
    for con in constraints {
        con.validate(model)?;
    }
    let (problem, x, y) = build_csp(model, cost, constraints)?;
    let sol = sdp::solve(&problem, &settings.sdp)?;
    if sol.status == SdpStatus::Infeasible {
        return Err(infeasible_set(constraints, settings, |c| state_feedback_feasibility(model, c)));
    }
    if let Err(e) = check_status(&sol, "controller synthesis") {
        return Err(level_certificate(model, constraints, settings).unwrap_or(e));
    }

    let x_sdp = linalg::symmetrize(sol.value(x));
    let k = recover_gain(&x_sdp, sol.value(y))?;
    let xbar = model.stationary_covariance(&k)?;
    let reports = constraint_reports(model, constraints, &k, &xbar, &xbar)?;
    Ok(SynthesisResult {
        cost: cost.stationary_cost(&k, &xbar),
        k,
        xbar,
        x_sdp,
        constraints: reports,
        solver: SolverStats::from(&sol),
    })
}

fn build_csp(
    model: &SystemModel,
    cost: &CostSpec,
    constraints: &[ChanceConstraint],
) -> Result<(SdpProblem, VarId, VarId)> {
    let mut p = SdpProblem::new();
    let (x, y) = csp_variables(&mut p, model);
    let pv = p.add_symmetric(model.m(), "P");
    let vars = CspVars { x_state: x, x_input: x, y };
    p.add_lmi(build_stationarity_lmi(model, x, y));
    p.add_lmi(build_cost_lmi(cost, pv, x, y)?);
    for con in constraints {
        let (lmi, _) = build_constraint_lmi(model, con, vars, FactorSpec::Fixed(con.factor(model)?))?;
        p.add_lmi(lmi);
    }
    p.minimize(
        LinearFunctional::new().term(x, cost.q.clone()).term(pv, Matrix::identity(model.m(), model.m())),
    );
    Ok((p, x, y))
}

/// Finds the shortest priority prefix of `constraints` that is infeasible.
/// `build` returns the feasibility problem for a given prefix.
pub(crate) fn infeasible_set(
    constraints: &[ChanceConstraint],
    settings: &SynthesisSettings,
    build: impl Fn(&[ChanceConstraint]) -> Result<SdpProblem>,
) -> Error {
    let labels = |k: usize| constraints[..k].iter().map(|c| format!("'{}'", c.label)).collect::<Vec<_>>().join(", ");
    for k in 0..=constraints.len() {
        let p = match build(&constraints[..k]) {
            Ok(p) => p,
            Err(e) => return e,
        };
        if let Ok(sol) = sdp::solve(&p, &settings.sdp) {
            if sol.status == SdpStatus::Infeasible {
                return Error::Infeasible(if k == 0 {
                    "(A, B) is not stabilizable".into()
                } else {
                    format!("constraints {} cannot hold together", labels(k))
                });
            }
        }
    }
    Error::Infeasible(format!("constraints {} cannot hold together", labels(constraints.len())))
}

/// When a constrained solve breaks down, the minimum-level solves (which stay
/// well conditioned near infeasibility) can still certify it: some constraint
/// is requested below its minimum level given the ones before it.
fn level_certificate(model: &SystemModel, constraints: &[ChanceConstraint], settings: &SynthesisSettings) -> Option<Error> {
    for (i, con) in constraints.iter().enumerate() {
        match min_violation_level(model, con, &constraints[..i], settings) {
            Ok(MinLevelResult { level: MinLevel::Level(l), .. }) if con.eps < l => {
                return Some(Error::Infeasible(format!(
                    "constraint '{}' needs eps >= {l:.6} (requested {}) given the constraints before it",
                    con.label, con.eps
                )));
            }
            Err(e @ Error::Infeasible(_)) => return Some(e),
            _ => {}
        }
    }
    None
}

fn state_feedback_feasibility(model: &SystemModel, constraints: &[ChanceConstraint]) -> Result<SdpProblem> {
    let mut p = SdpProblem::new();
    let (x, y) = csp_variables(&mut p, model);
    let vars = CspVars { x_state: x, x_input: x, y };
    p.add_lmi(build_stationarity_lmi(model, x, y));
    for con in constraints {
        p.add_lmi(build_constraint_lmi(model, con, vars, FactorSpec::Fixed(con.factor(model)?))?.0);
    }
    p.minimize(LinearFunctional::new().term(x, Matrix::identity(model.n(), model.n())));
    Ok(p)
}

/// Evaluates every constraint LMI at the achieved covariances: `x_state`
/// for state constraints, `(x_input, K·x_input)` for input constraints.
pub(crate) fn constraint_reports(
    model: &SystemModel,
    constraints: &[ChanceConstraint],
    k: &Matrix,
    x_state: &Matrix,
    x_input: &Matrix,
) -> Result<Vec<ConstraintReport>> {
    let mut p = SdpProblem::new();
    let xs = p.add_symmetric(model.n(), "X");
    let xi = p.add_symmetric(model.n(), "S");
    let y = p.add_matrix(model.m(), model.n(), "Z");
    let vars = CspVars { x_state: xs, x_input: xi, y };
    let values = [x_state.clone(), x_input.clone(), k * x_input];
    let mut out = Vec::with_capacity(constraints.len());
    for con in constraints {
        let factor = con.factor(model)?;
        let (lmi, _) = build_constraint_lmi(model, con, vars, FactorSpec::Fixed(factor))?;
        let slack = linalg::min_eigenvalue(&linalg::symmetrize(&lmi.evaluate(&values))) / lmi.constant.norm();
        if slack < -1e-6 {
            return Err(Error::NumericalFailure(format!(
                "constraint '{}' is violated at the recovered gain (relative slack {slack:.3e})",
                con.label
            )));
        }
        out.push(ConstraintReport {
            label: con.label.clone(),
            eps: con.eps,
            factor,
            relative_slack: slack,
            active: slack <= ACTIVE_TOL,
        });
    }
    Ok(out)
}
