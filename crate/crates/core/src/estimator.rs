//! Kalman filtering and output-feedback synthesis.
//!
//! The estimator is the one-step predictor
//! `x̂⁺ = Ax̂ + Bu + L(y − Cx̂)`, `u = Kx̂`. Its error `e = x − x̂` evolves as
//! `e⁺ = (A − LC)e + w − Lv`, independently of `K`, and the estimate as
//! `x̂⁺ = (A + BK)x̂ + L(Ce + v)`. With the Kalman gain `e` and `x̂` are
//! uncorrelated, so the state covariance splits as `X̄ = S̄ + E`.

use nalgebra::Cholesky;

use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};
use crate::sdp::{self, AffineLmi, LinearFunctional, SdpProblem, SdpStatus, VarId};
use crate::synthesis::{
    self, build_constraint_lmi, build_cost_lmi, check_status, constraint_reports, recover_gain, ChanceConstraint,
    ConstraintReport, CostSpec, CspVars, FactorSpec, SolverStats, SynthesisSettings, SystemModel,
};

/// Relative change between Riccati iterates at which the recursion stops.
pub const KF_TOL: f64 = 1e-11;
pub const KF_MAX_ITER: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorDesign {
    /// Predictor gain, `n × p`.
    pub l: Matrix,
    /// Stationary error covariance.
    pub e: Matrix,
    pub iterations: usize,
}

fn output(model: &SystemModel) -> Result<(&Matrix, &Matrix)> {
    match (&model.c, &model.v) {
        (Some(c), Some(v)) => Ok((c, v)),
        _ => Err(Error::DimensionMismatch("output feedback needs C and V".into())),
    }
}

/// `L = APCᵀ(CPCᵀ + V)⁻¹`.
fn predictor_gain(a: &Matrix, c: &Matrix, v: &Matrix, p: &Matrix) -> Option<Matrix> {
    let innovation = linalg::symmetrize(&(c * p * c.transpose() + v));
    let chol = Cholesky::new(innovation)?;
    // L = (S⁻¹ C P Aᵀ)ᵀ with S symmetric.
    Some(chol.solve(&(c * p * a.transpose())).transpose())
}

/// One step of the predictor Riccati recursion
/// `P ↦ APAᵀ + W − APCᵀ(CPCᵀ + V)⁻¹CPAᵀ`.
pub fn riccati_map(model: &SystemModel, p: &Matrix) -> Result<Matrix> {
    let (c, v) = output(model)?;
    linalg::ensure_shape(p, model.n(), model.n(), "P")?;
    let l = predictor_gain(&model.a, c, v, p).ok_or_else(|| Error::NumericalFailure("innovation covariance is not positive definite".into()))?;
    let a = &model.a;
    Ok(linalg::symmetrize(&(a * p * a.transpose() + &model.w - &l * c * p * a.transpose())))
}

/// Stationary Kalman predictor, from the Riccati recursion started at `W`.
pub fn design_kalman(model: &SystemModel) -> Result<EstimatorDesign> {
    model.validate()?;
    let (c, v) = output(model)?;
    let a = &model.a;
    let mut p = model.w.clone();
    for iteration in 1..=KF_MAX_ITER {
        let l = predictor_gain(a, c, v, &p).ok_or(Error::NotObservable { iterations: iteration })?;
        let next = linalg::symmetrize(&(a * &p * a.transpose() + &model.w - &l * c * &p * a.transpose()));
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::NotObservable { iterations: iteration });
        }
        let change = (&next - &p).norm();
        p = next;
        if change <= KF_TOL * p.norm() {
            let l = predictor_gain(a, c, v, &p).ok_or(Error::NotObservable { iterations: iteration })?;
            if linalg::spectral_radius(&(a - &l * c))? >= 1.0 {
                return Err(Error::NotObservable { iterations: iteration });
            }
            return Ok(EstimatorDesign { l, e: p, iterations: iteration });
        }
    }
    Err(Error::NotObservable { iterations: KF_MAX_ITER })
}

/// Stationary error covariance of the predictor with an arbitrary stable gain:
/// `E = (A − LC)E(A − LC)ᵀ + W + LVLᵀ`.
pub fn error_covariance(model: &SystemModel, l: &Matrix) -> Result<Matrix> {
    let (c, v) = output(model)?;
    linalg::ensure_shape(l, model.n(), c.nrows(), "L")?;
    linalg::solve_discrete_lyapunov(&(&model.a - l * c), &(&model.w + l * v * l.transpose()))
}

/// Covariance of the estimate's driving term `L(Ce + v)`:
/// `(LC)E(LC)ᵀ + LVLᵀ`.
pub fn estimate_noise(model: &SystemModel, design: &EstimatorDesign) -> Result<Matrix> {
    let (c, v) = output(model)?;
    linalg::ensure_shape(&design.l, model.n(), c.nrows(), "L")?;
    linalg::ensure_shape(&design.e, model.n(), model.n(), "E")?;
    let lc = &design.l * c;
    Ok(linalg::symmetrize(&(&lc * &design.e * lc.transpose() + &design.l * v * design.l.transpose())))
}

/// The estimate stationarity LMI in `(S, Z)`,
/// `[S − N, AS + BZ; (AS + BZ)ᵀ, S] ⪰ 0` with `N` from [`estimate_noise`],
/// and the coupling `X − S − E ⪰ 0`.
pub fn build_kf_stationarity_lmi(
    model: &SystemModel,
    design: &EstimatorDesign,
    x: VarId,
    s: VarId,
    z: VarId,
) -> Result<(AffineLmi, AffineLmi)> {
    let noise = estimate_noise(model, design)?;
    let n = model.n();
    let stationarity = synthesis::stationarity_lmi("estimate stationarity", &model.a, &model.b, &noise, s, z);
    let eye = Matrix::identity(n, n);
    let coupling = AffineLmi::new("coupling", -&design.e)
        .congruence(x, eye.clone())
        .sandwich(s, &eye * -0.5, eye);
    Ok((stationarity, coupling))
}

/// `(S̄, X̄)` for the gain `k` with the given estimator.
pub fn kf_stationary_covariances(
    model: &SystemModel,
    k: &Matrix,
    design: &EstimatorDesign,
) -> Result<(Matrix, Matrix)> {
    linalg::ensure_shape(k, model.m(), model.n(), "K")?;
    let sbar = linalg::solve_discrete_lyapunov(&model.closed_loop(k), &estimate_noise(model, design)?)?;
    let xbar = &sbar + &design.e;
    Ok((sbar, xbar))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OutputFeedbackResult {
    pub k: Matrix,
    pub estimator: EstimatorDesign,
    pub sbar: Matrix,
    pub xbar: Matrix,
    /// `Tr(QX̄) + Tr(R K S̄ Kᵀ)`.
    pub cost: f64,
    pub constraints: Vec<ConstraintReport>,
    pub solver: SolverStats,
}

impl OutputFeedbackResult {
    pub fn l(&self) -> &Matrix {
        &self.estimator.l
    }
}

struct OfVars {
    x: VarId,
    s: VarId,
    z: VarId,
}

fn output_feedback_problem(
    model: &SystemModel,
    design: &EstimatorDesign,
    constraints: &[ChanceConstraint],
) -> Result<(SdpProblem, OfVars)> {
    let mut p = SdpProblem::new();
    let x = p.add_symmetric(model.n(), "X");
    let s = p.add_symmetric(model.n(), "S");
    let z = p.add_matrix(model.m(), model.n(), "Z");
    let (stationarity, coupling) = build_kf_stationarity_lmi(model, design, x, s, z)?;
    p.add_lmi(stationarity);
    p.add_lmi(coupling);
    let vars = CspVars { x_state: x, x_input: s, y: z };
    for con in constraints {
        p.add_lmi(build_constraint_lmi(model, con, vars, FactorSpec::Fixed(con.factor(model)?))?.0);
    }
    p.minimize(LinearFunctional::new().term(x, Matrix::identity(model.n(), model.n())));
    Ok((p, OfVars { x, s, z }))
}

/// Optimal output-feedback gain with a Kalman predictor: state constraints act
/// on `X`, input constraints and the input cost on `(S, Z = KS)`.
pub fn synthesize_output_feedback(
    model: &SystemModel,
    cost: &CostSpec,
    constraints: &[ChanceConstraint],
    settings: &SynthesisSettings,
) -> Result<OutputFeedbackResult> {
    model.validate()?;
    cost.check(model)?;
    for con in constraints {
        con.validate(model)?;
    }
    let design = design_kalman(model)?;
    let (mut p, v) = output_feedback_problem(model, &design, constraints)?;
    let pv = p.add_symmetric(model.m(), "P");
    p.add_lmi(build_cost_lmi(cost, pv, v.s, v.z)?);
    p.minimize(
        LinearFunctional::new().term(v.x, cost.q.clone()).term(pv, Matrix::identity(model.m(), model.m())),
    );

    let sol = sdp::solve(&p, &settings.sdp)?;
    if sol.status == SdpStatus::Infeasible {
        return Err(synthesis::infeasible_set(constraints, settings, |c| {
            output_feedback_problem(model, &design, c).map(|(p, _)| p)
        }));
    }
    check_status(&sol, "output-feedback synthesis")?;
    let k = recover_gain(&linalg::symmetrize(sol.value(v.s)), sol.value(v.z))?;
    let (sbar, xbar) = kf_stationary_covariances(model, &k, &design)?;
    let reports = constraint_reports(model, constraints, &k, &xbar, &sbar)?;
    let cost_value = (&cost.q * &xbar).trace() + (&cost.r * &k * &sbar * k.transpose()).trace();
    Ok(OutputFeedbackResult {
        k,
        estimator: design,
        sbar,
        xbar,
        cost: cost_value,
        constraints: reports,
        solver: SolverStats::from(&sol),
    })
}
