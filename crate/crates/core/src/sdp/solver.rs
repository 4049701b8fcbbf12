//! Homogeneous self-dual interior-point method.
//!
//! Conic form: `min cᵀx` s.t. `s = h − Gx ⪰ 0`, `Ax = b`, where each cone
//! block `j` has `hⱼ = F₀ⱼ` and `(Gx)ⱼ = −Σ xₚFₚⱼ`. The embedding adds
//! `τ, κ ≥ 0` so that infeasibility and unboundedness show up as
//! certificates instead of divergence.
//!
//! Each Newton system is reduced to `[H Aᵀ; A 0]` with `H` the Gram matrix
//! of the Nesterov–Todd scaled coefficients. That matrix becomes badly
//! conditioned near the optimum, so every direction is refined against the
//! full linearized system.

use nalgebra::{Cholesky, DVector, LU, SVD};

use super::{Compiled, SdpProblem, SdpSolution, SdpStatus, SolverSettings};
use crate::error::{Error, Result};
use crate::linalg::{self, Matrix};

const REFINEMENT_STEPS: usize = 3;
/// Cap on refinement of the full linearized system; it stops earlier once
/// the residual no longer halves.
const MAX_NEWTON_REFINEMENT: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationInfo {
    pub iteration: usize,
    pub primal_objective: f64,
    pub dual_objective: f64,
    /// Relative primal residual of the normalized iterate.
    pub primal_residual: f64,
    /// Relative dual residual of the normalized iterate.
    pub dual_residual: f64,
    /// Relative duality gap.
    pub gap: f64,
    pub mu: f64,
    /// Step length taken after this iterate was recorded.
    pub step: f64,
}

type Blocks = Vec<Matrix>;

fn inner(a: &[Matrix], b: &[Matrix]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x.dot(y)).sum()
}

fn blocks_norm(a: &[Matrix]) -> f64 {
    a.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt()
}

fn axpy(y: &mut [Matrix], alpha: f64, x: &[Matrix]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi * alpha;
    }
}

fn scaled(a: &[Matrix], alpha: f64) -> Blocks {
    a.iter().map(|m| m * alpha).collect()
}

fn sub(a: &[Matrix], b: &[Matrix]) -> Blocks {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

impl Compiled {
    fn h(&self) -> Blocks {
        self.blocks.iter().map(|b| b.constant.clone()).collect()
    }

    fn g_apply(&self, x: &DVector<f64>) -> Blocks {
        self.blocks
            .iter()
            .map(|b| {
                let n = b.constant.nrows();
                let mut out = Matrix::zeros(n, n);
                for (p, f) in &b.coeffs {
                    out -= f * x[*p];
                }
                out
            })
            .collect()
    }

    fn gt_apply(&self, z: &[Matrix]) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        for (b, zj) in self.blocks.iter().zip(z) {
            for (p, f) in &b.coeffs {
                out[*p] -= f.dot(zj);
            }
        }
        out
    }

    fn orders(&self) -> usize {
        self.blocks.iter().map(|b| b.constant.nrows()).sum()
    }
}

/// Nesterov–Todd scaling point for every block: `rᵀ z r = r⁻¹ s r⁻ᵀ = Λ`.
struct Scaling {
    /// `r⁻ᵀ`
    rti: Blocks,
    lambda: Vec<DVector<f64>>,
}

impl Scaling {
    fn identity(comp: &Compiled) -> Self {
        let rti = comp.blocks.iter().map(|b| Matrix::identity(b.constant.nrows(), b.constant.nrows())).collect();
        let lambda = comp.blocks.iter().map(|b| DVector::from_element(b.constant.nrows(), 1.0)).collect();
        Self { rti, lambda }
    }

    fn nt(s: &[Matrix], z: &[Matrix]) -> Option<Self> {
        let mut sc = Self { rti: Vec::new(), lambda: Vec::new() };
        for (sj, zj) in s.iter().zip(z) {
            let ls = Cholesky::new(linalg::symmetrize(sj))?.unpack();
            let lz = Cholesky::new(linalg::symmetrize(zj))?.unpack();
            let svd = SVD::new(lz.transpose() * &ls, true, false);
            let u = svd.u?;
            let lam = svd.singular_values;
            if lam.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
                return None;
            }
            let isq = Matrix::from_diagonal(&lam.map(|l| 1.0 / l.sqrt()));
            sc.rti.push(&lz * &u * &isq);
            sc.lambda.push(lam);
        }
        Some(sc)
    }

    /// `r⁻¹ v r⁻ᵀ`, the scaled image of a primal-side matrix.
    fn primal(&self, v: &[Matrix]) -> Blocks {
        self.rti.iter().zip(v).map(|(w, vj)| linalg::symmetrize(&(w.transpose() * vj * w))).collect()
    }

    /// Undoes the dual-side scaling `dz ↦ rᵀ dz r`, i.e. `v ↦ r⁻ᵀ v r⁻¹`.
    fn dual_unscale(&self, v: &[Matrix]) -> Blocks {
        self.rti.iter().zip(v).map(|(w, vj)| linalg::symmetrize(&(w * vj * w.transpose()))).collect()
    }
}

/// `λ⁻¹ ⋄ v`: the solution `u` of `λ ∘ u = v` for diagonal `λ`.
fn lambda_solve(lam: &DVector<f64>, v: &Matrix) -> Matrix {
    Matrix::from_fn(v.nrows(), v.ncols(), |a, b| 2.0 * v[(a, b)] / (lam[a] + lam[b]))
}

/// Symmetrized product `(ab + ba)/2`.
fn jordan(a: &Matrix, b: &Matrix) -> Matrix {
    (a * b + b * a) * 0.5
}

/// Largest `α` with `diag(λ) + α d ⪰ 0` (infinite if `d ⪰ 0`).
fn max_step(lam: &DVector<f64>, d: &Matrix) -> f64 {
    let t = Matrix::from_fn(d.nrows(), d.ncols(), |a, b| d[(a, b)] / (lam[a] * lam[b]).sqrt());
    let m = linalg::min_eigenvalue(&t);
    if m < 0.0 {
        -1.0 / m
    } else {
        f64::INFINITY
    }
}

/// Reduced KKT matrix `[H Aᵀ; A 0]`, `H = Gᵀ(WᵀW)⁻¹G`.
struct Kkt {
    exact: Matrix,
    lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    n: usize,
}

impl Kkt {
    fn new(comp: &Compiled, sc: &Scaling) -> Result<Self> {
        let n = comp.n;
        let p = comp.a.nrows();
        let mut k = Matrix::zeros(n + p, n + p);
        for (block, w) in comp.blocks.iter().zip(&sc.rti) {
            let t: Vec<Matrix> = block.coeffs.iter().map(|(_, f)| w.transpose() * f * w).collect();
            for (a, (pa, _)) in block.coeffs.iter().enumerate() {
                for (b, (pb, _)) in block.coeffs.iter().enumerate().skip(a) {
                    let v = t[a].dot(&t[b]);
                    k[(*pa, *pb)] += v;
                    if pa != pb {
                        k[(*pb, *pa)] += v;
                    }
                }
            }
        }
        k.view_mut((n, 0), (p, n)).copy_from(&comp.a);
        k.view_mut((0, n), (n, p)).copy_from(&comp.a.transpose());
        linalg::ensure_finite(&k).map_err(|_| Error::NumericalFailure("non-finite KKT matrix".into()))?;

        // A small quasi-definite shift keeps the factorization well-posed
        // when H is singular; refinement removes its effect.
        let scale = (0..n).map(|i| k[(i, i)].abs()).fold(1.0, f64::max);
        let delta = 1e-13 * scale;
        let mut reg = k.clone();
        for i in 0..n {
            reg[(i, i)] += delta;
        }
        for i in n..n + p {
            reg[(i, i)] -= delta;
        }
        Ok(Self { exact: k, lu: reg.lu(), n })
    }

    fn solve(&self, top: &DVector<f64>, bottom: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let fail = || Error::NumericalFailure("singular KKT system".into());
        let rhs = DVector::from_iterator(self.n + bottom.len(), top.iter().chain(bottom.iter()).copied());
        let mut x = self.lu.solve(&rhs).ok_or_else(fail)?;
        for _ in 0..REFINEMENT_STEPS {
            let r = &rhs - &self.exact * &x;
            x += self.lu.solve(&r).ok_or_else(fail)?;
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(fail());
        }
        Ok((x.rows(0, self.n).into_owned(), x.rows(self.n, bottom.len()).into_owned()))
    }
}

/// Right-hand side of the linearized embedding
///
/// ```text
/// Aᵀdy + Gᵀdz + c dτ      = b1
/// A dx − b dτ             = b2
/// ds + G dx − h dτ        = b3
/// ds̃ + dz̃                = u      (ds̃ = r⁻¹ds r⁻ᵀ, dz̃ = rᵀdz r)
/// dκ + cᵀdx + bᵀdy + hᵀdz = b4
/// κ dτ + τ dκ             = bk
/// ```
struct Rhs {
    b1: DVector<f64>,
    b2: DVector<f64>,
    b3: Blocks,
    u: Blocks,
    b4: f64,
    bk: f64,
}

impl Rhs {
    fn norm(&self) -> f64 {
        (self.b1.norm_squared()
            + self.b2.norm_squared()
            + blocks_norm(&self.b3).powi(2)
            + blocks_norm(&self.u).powi(2)
            + self.b4 * self.b4
            + self.bk * self.bk)
            .sqrt()
    }
}

#[derive(Clone)]
struct Direction {
    dx: DVector<f64>,
    dy: DVector<f64>,
    dz: Blocks,
    ds: Blocks,
    ds_scaled: Blocks,
    dz_scaled: Blocks,
    dtau: f64,
    dkappa: f64,
}

impl Direction {
    fn add(&mut self, o: &Direction) {
        self.dx += &o.dx;
        self.dy += &o.dy;
        axpy(&mut self.dz, 1.0, &o.dz);
        axpy(&mut self.ds, 1.0, &o.ds);
        axpy(&mut self.ds_scaled, 1.0, &o.ds_scaled);
        axpy(&mut self.dz_scaled, 1.0, &o.dz_scaled);
        self.dtau += o.dtau;
        self.dkappa += o.dkappa;
    }
}

struct Newton<'a> {
    comp: &'a Compiled,
    sc: &'a Scaling,
    kkt: Kkt,
    h: &'a [Matrix],
    h_scaled: Blocks,
    tau: f64,
    kappa: f64,
    dx1: DVector<f64>,
    dy1: DVector<f64>,
    dz1_scaled: Blocks,
    denom1: f64,
}

impl<'a> Newton<'a> {
    fn new(comp: &'a Compiled, sc: &'a Scaling, h: &'a [Matrix], tau: f64, kappa: f64) -> Result<Self> {
        let kkt = Kkt::new(comp, sc)?;
        let h_scaled = sc.primal(h);
        // Response to a unit dτ with every other right-hand side zero.
        let top = -&comp.c + comp.gt_apply(&sc.dual_unscale(&h_scaled));
        let (dx1, dy1) = kkt.solve(&top, &comp.b)?;
        let dz1_scaled = sub(&sc.primal(&comp.g_apply(&dx1)), &h_scaled);
        let denom1 = comp.c.dot(&dx1) + comp.b.dot(&dy1) + inner(&h_scaled, &dz1_scaled) - kappa / tau;
        Ok(Self { comp, sc, kkt, h, h_scaled, tau, kappa, dx1, dy1, dz1_scaled, denom1 })
    }

    fn solve_once(&self, rhs: &Rhs) -> Result<Direction> {
        let (comp, sc) = (self.comp, self.sc);
        // ds̃ = r⁻¹(b3 − G dx + h dτ)r⁻ᵀ, dz̃ = u − ds̃.
        let t = sub(&rhs.u, &sc.primal(&rhs.b3));
        let top = &rhs.b1 - comp.gt_apply(&sc.dual_unscale(&t));
        let (dx0, dy0) = self.kkt.solve(&top, &rhs.b2)?;
        let dz0_scaled: Blocks = sc.primal(&comp.g_apply(&dx0)).iter().zip(&t).map(|(g, tj)| g + tj).collect();
        let num = rhs.b4
            - rhs.bk / self.tau
            - (comp.c.dot(&dx0) + comp.b.dot(&dy0) + inner(&self.h_scaled, &dz0_scaled));
        let dtau = num / self.denom1;
        let dx = dx0 + &self.dx1 * dtau;
        let dy = dy0 + &self.dy1 * dtau;
        let mut dz_scaled = dz0_scaled;
        axpy(&mut dz_scaled, dtau, &self.dz1_scaled);
        let gdx = comp.g_apply(&dx);
        let ds: Blocks =
            rhs.b3.iter().zip(gdx.iter().zip(self.h)).map(|(b3, (g, hj))| b3 - g + hj * dtau).collect();
        let ds_scaled = sc.primal(&ds);
        let dz = sc.dual_unscale(&dz_scaled);
        let dkappa = (rhs.bk - self.kappa * dtau) / self.tau;
        Ok(Direction { dx, dy, dz, ds, ds_scaled, dz_scaled, dtau, dkappa })
    }

    fn residual(&self, d: &Direction, rhs: &Rhs) -> Rhs {
        let comp = self.comp;
        let gdx = comp.g_apply(&d.dx);
        Rhs {
            b1: &rhs.b1 - (comp.a.transpose() * &d.dy + comp.gt_apply(&d.dz) + &comp.c * d.dtau),
            b2: &rhs.b2 - (&comp.a * &d.dx - &comp.b * d.dtau),
            b3: rhs
                .b3
                .iter()
                .zip(d.ds.iter().zip(gdx.iter().zip(self.h)))
                .map(|(b3, (ds, (g, hj)))| b3 - (ds + g - hj * d.dtau))
                .collect(),
            u: rhs
                .u
                .iter()
                .zip(d.ds_scaled.iter().zip(&d.dz_scaled))
                .map(|(u, (ds, dz))| u - (ds + dz))
                .collect(),
            b4: rhs.b4 - (d.dkappa + comp.c.dot(&d.dx) + comp.b.dot(&d.dy) + inner(self.h, &d.dz)),
            bk: rhs.bk - (self.kappa * d.dtau + self.tau * d.dkappa),
        }
    }

    fn solve(&self, rhs: &Rhs) -> Result<Direction> {
        let mut d = self.solve_once(rhs)?;
        let mut r = self.residual(&d, rhs);
        let mut norm = r.norm();
        for _ in 0..MAX_NEWTON_REFINEMENT {
            if norm == 0.0 {
                break;
            }
            let mut next = d.clone();
            next.add(&self.solve_once(&r)?);
            let next_r = self.residual(&next, rhs);
            let next_norm = next_r.norm();
            if !(next_norm < norm) {
                break;
            }
            let enough = next_norm > 0.5 * norm;
            (d, r, norm) = (next, next_r, next_norm);
            if enough {
                break;
            }
        }
        Ok(d)
    }
}

/// Shifts every block by `(1 + t)I` when the most negative eigenvalue is `−t`
/// (or the iterate is barely interior).
fn shift_into_cone(v: &mut [Matrix]) {
    let ts = v.iter().map(|m| -linalg::min_eigenvalue(m)).fold(f64::NEG_INFINITY, f64::max);
    let nrm = blocks_norm(v);
    if ts >= -1e-8 * nrm.max(1.0) {
        for m in v.iter_mut() {
            let k = m.nrows();
            *m += Matrix::identity(k, k) * (1.0 + ts);
        }
    }
}

/// Solves the semidefinite program.
///
/// Returns `Err` only for malformed input or settings; numerical trouble
/// during the iterations is reported through [`SdpStatus::NumericalFailure`].
pub fn solve(problem: &SdpProblem, settings: &SolverSettings) -> Result<SdpSolution> {
    let comp = problem.compile()?;
    if !(settings.feas_tol > 0.0 && settings.gap_tol > 0.0) {
        return Err(Error::OutOfRange("solver tolerances must be positive".into()));
    }
    if !(settings.step_fraction > 0.0 && settings.step_fraction < 1.0) {
        return Err(Error::OutOfRange("step fraction must lie in (0, 1)".into()));
    }
    let c = &comp.c;
    let b = &comp.b;
    let h = comp.h();
    let nu = comp.orders() as f64;
    let resx0 = c.norm().max(1.0);
    let resy0 = b.norm().max(1.0);
    let resz0 = blocks_norm(&h).max(1.0);

    // Starting point from the least-squares systems with W = I.
    let (mut x, mut y, mut s, mut z) = {
        let kkt = Kkt::new(&comp, &Scaling::identity(&comp))?;
        // Aᵀy + Gᵀz = 0, Ax = b, Gx − z = h  ⇒  s = −z = h − Gx.
        let (x, _) = kkt.solve(&comp.gt_apply(&h), b)?;
        let s = sub(&h, &comp.g_apply(&x));
        // Aᵀy + Gᵀz = −c, Ax = 0, z = Gx.
        let (xd, y) = kkt.solve(&(-c), &DVector::zeros(b.len()))?;
        let z = comp.g_apply(&xd);
        (x, y, s, z)
    };
    shift_into_cone(&mut s);
    shift_into_cone(&mut z);
    let mut tau = 1.0;
    let mut kappa = 1.0;

    let mut history = Vec::new();
    let mut status = SdpStatus::MaxIterations;
    let mut message = String::from("iteration limit reached");
    let mut last = (f64::NAN, f64::NAN, f64::NAN, f64::NAN, f64::NAN);
    let mut iterations = 0;
    // Best iterate so far, returned when the method breaks down.
    let mut best: Option<(f64, DVector<f64>, Blocks, (f64, f64, f64, f64, f64), usize)> = None;

    for iter in 0..=settings.max_iter {
        iterations = iter;
        let gx = comp.g_apply(&x);
        let rx = comp.a.transpose() * &y + comp.gt_apply(&z) + c * tau;
        let ry = &comp.a * &x - b * tau;
        let rz: Blocks = s.iter().zip(gx.iter().zip(&h)).map(|(sj, (g, hj))| sj + g - hj * tau).collect();
        let cx = c.dot(&x);
        let by = b.dot(&y);
        let hz = inner(&h, &z);
        let rt = kappa + cx + by + hz;

        let sz = inner(&s, &z);
        let mu = (sz + tau * kappa) / (nu + 1.0);
        let pcost = cx / tau;
        let dcost = -(by + hz) / tau;
        let gap = sz / (tau * tau);
        let relgap = gap / pcost.abs().max(dcost.abs()).max(1.0);
        let pres = (ry.norm() / tau / resy0).max(blocks_norm(&rz) / tau / resz0);
        let dres = rx.norm() / tau / resx0;
        last = (pcost, dcost, pres, dres, relgap);
        let merit = (pres / settings.feas_tol).max(dres / settings.feas_tol).max(relgap / settings.gap_tol);
        if merit.is_finite() && best.as_ref().is_none_or(|b| merit < b.0) {
            best = Some((merit, &x / tau, scaled(&z, 1.0 / tau), last, iter));
        }
        history.push(IterationInfo {
            iteration: iter,
            primal_objective: pcost,
            dual_objective: dcost,
            primal_residual: pres,
            dual_residual: dres,
            gap: relgap,
            mu,
            step: 0.0,
        });

        if pres <= settings.feas_tol && dres <= settings.feas_tol && relgap <= settings.gap_tol {
            status = SdpStatus::Optimal;
            message = "optimal".into();
            break;
        }
        if by + hz < 0.0 {
            let pinf = (comp.a.transpose() * &y + comp.gt_apply(&z)).norm() / resx0 / -(by + hz);
            if pinf <= settings.feas_tol {
                status = SdpStatus::Infeasible;
                message = format!("primal infeasibility certificate (residual {pinf:.2e})");
                break;
            }
        }
        if cx < 0.0 {
            let ax = (&comp.a * &x).norm() / resy0;
            let gxs: Blocks = gx.iter().zip(&s).map(|(g, sj)| g + sj).collect();
            let dinf = ax.max(blocks_norm(&gxs) / resz0) / -cx;
            if dinf <= settings.feas_tol {
                status = SdpStatus::Unbounded;
                message = format!("dual infeasibility certificate (residual {dinf:.2e})");
                break;
            }
        }
        if iter == settings.max_iter {
            break;
        }

        let Some(sc) = Scaling::nt(&s, &z) else {
            status = SdpStatus::NumericalFailure;
            message = format!("iterate left the cone at iteration {iter}");
            break;
        };

        let step = (|| -> Result<(Direction, f64)> {
            let newton = Newton::new(&comp, &sc, &h, tau, kappa)?;
            let max_alpha = |d: &Direction| -> f64 {
                let mut a = f64::INFINITY;
                for (l, (ds, dz)) in sc.lambda.iter().zip(d.ds_scaled.iter().zip(&d.dz_scaled)) {
                    a = a.min(max_step(l, ds)).min(max_step(l, dz));
                }
                if d.dtau < 0.0 {
                    a = a.min(-tau / d.dtau);
                }
                if d.dkappa < 0.0 {
                    a = a.min(-kappa / d.dkappa);
                }
                a
            };
            let rhs = |eta: f64, rhs_c: &[Matrix], bk: f64| Rhs {
                b1: -(&rx * eta),
                b2: -(&ry * eta),
                b3: scaled(&rz, -eta),
                u: sc.lambda.iter().zip(rhs_c).map(|(l, v)| lambda_solve(l, v)).collect(),
                b4: -eta * rt,
                bk,
            };

            let lam_sq: Blocks = sc.lambda.iter().map(|l| Matrix::from_diagonal(&l.map(|v| -v * v))).collect();
            let affine = newton.solve(&rhs(1.0, &lam_sq, -tau * kappa))?;
            let alpha_a = max_alpha(&affine).min(1.0);
            let sigma = (1.0 - alpha_a).max(0.0).powf(settings.centering_exponent);

            let rhs_c: Blocks = lam_sq
                .iter()
                .zip(affine.ds_scaled.iter().zip(&affine.dz_scaled))
                .map(|(l2, (ds, dz))| {
                    let k = l2.nrows();
                    l2 + Matrix::identity(k, k) * (sigma * mu) - jordan(ds, dz)
                })
                .collect();
            let bk = -tau * kappa + sigma * mu - affine.dtau * affine.dkappa;
            let corr = newton.solve(&rhs(1.0 - sigma, &rhs_c, bk))?;
            let alpha = (settings.step_fraction * max_alpha(&corr)).min(1.0);
            Ok((corr, alpha))
        })();

        let (d, alpha) = match step {
            Ok(v) => v,
            Err(e) => {
                status = SdpStatus::NumericalFailure;
                message = e.to_string();
                break;
            }
        };
        if !(alpha > 0.0) || !alpha.is_finite() {
            status = SdpStatus::NumericalFailure;
            message = format!("zero step length at iteration {iter}");
            break;
        }
        if let Some(info) = history.last_mut() {
            info.step = alpha;
        }

        x += &d.dx * alpha;
        y += &d.dy * alpha;
        for (j, (sj, zj)) in s.iter_mut().zip(z.iter_mut()).enumerate() {
            *sj = linalg::symmetrize(&(&*sj + &d.ds[j] * alpha));
            *zj = linalg::symmetrize(&(&*zj + &d.dz[j] * alpha));
        }
        tau += alpha * d.dtau;
        kappa += alpha * d.dkappa;
        if !(tau > 0.0 && kappa > 0.0) || x.iter().any(|v| !v.is_finite()) {
            status = SdpStatus::NumericalFailure;
            message = format!("iterate lost positivity at iteration {iter}");
            break;
        }
    }

    if matches!(status, SdpStatus::NumericalFailure | SdpStatus::MaxIterations) {
        if let Some((_, bx, bz, metrics, it)) = best {
            message = format!("{message}; returning iterate {it}");
            let (pcost, dcost, pres, dres, relgap) = metrics;
            return Ok(SdpSolution {
                status,
                values: problem.unflatten(&comp.offsets, &bx),
                duals: bz,
                objective_value: pcost,
                dual_objective: dcost,
                iterations,
                duality_gap: relgap,
                primal_residual: pres,
                dual_residual: dres,
                history,
                message,
            });
        }
    }
    let (pcost, dcost, pres, dres, relgap) = last;
    let (values, duals) = match status {
        SdpStatus::Infeasible => {
            let t = -(b.dot(&y) + inner(&h, &z));
            (problem.unflatten(&comp.offsets, &(&x / tau)), scaled(&z, 1.0 / t))
        }
        SdpStatus::Unbounded => {
            let t = -c.dot(&x);
            (problem.unflatten(&comp.offsets, &(&x / t)), scaled(&z, 1.0 / tau))
        }
        _ => (problem.unflatten(&comp.offsets, &(&x / tau)), scaled(&z, 1.0 / tau)),
    };
    Ok(SdpSolution {
        status,
        values,
        duals,
        objective_value: pcost,
        dual_objective: dcost,
        iterations,
        duality_gap: relgap,
        primal_residual: pres,
        dual_residual: dres,
        history,
        message,
    })
}
