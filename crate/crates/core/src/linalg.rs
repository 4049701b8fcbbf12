//! Dense symmetric-matrix kernel: Lyapunov solves, PSD tests, spectral
//! radius and symmetric square roots.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

/// Relative symmetry tolerance, scaled by the Frobenius norm of the input.
pub const SYM_TOL: f64 = 1e-10;
/// Relative residual bound for Lyapunov solutions, scaled by `‖W‖`.
pub const LYAP_TOL: f64 = 1e-10;
pub const EIG_TOL: f64 = 1e-10;
pub const SQRT_TOL: f64 = 1e-9;
/// A closed loop with spectral radius at or above `1 - STAB_MARGIN` is unstable.
pub const STAB_MARGIN: f64 = 1e-9;
const MAX_CORRECTIONS: usize = 5;

const MAX_DOUBLINGS: usize = 80;

pub fn ensure_finite(m: &Matrix) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite)
    }
}

pub fn ensure_square(m: &Matrix, what: &str) -> Result<()> {
    if m.nrows() == m.ncols() && m.nrows() > 0 {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "{what} must be square and non-empty, got {}x{}",
            m.nrows(),
            m.ncols()
        )))
    }
}

pub fn ensure_shape(m: &Matrix, rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.nrows() == rows && m.ncols() == cols {
        Ok(())
    } else {
        Err(Error::DimensionMismatch(format!(
            "{what} must be {rows}x{cols}, got {}x{}",
            m.nrows(),
            m.ncols()
        )))
    }
}

/// `(M + Mᵀ)/2` without any checks.
pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Verifies `M` is finite, square and symmetric within `SYM_TOL·‖M‖`, then
/// returns its symmetrized copy.
pub fn checked_symmetric(m: &Matrix) -> Result<Matrix> {
    ensure_finite(m)?;
    ensure_square(m, "symmetric matrix")?;
    let asymmetry = (m - m.transpose()).amax();
    let tol = SYM_TOL * m.norm();
    if asymmetry > tol {
        return Err(Error::NotSymmetric { asymmetry, tol });
    }
    Ok(symmetrize(m))
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn sym_eigenvalues(m: &Matrix) -> Vec<f64> {
    let mut ev: Vec<f64> = SymmetricEigen::new(symmetrize(m)).eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    ev
}

pub fn min_eigenvalue(m: &Matrix) -> f64 {
    sym_eigenvalues(m).first().copied().unwrap_or(0.0)
}

pub fn max_eigenvalue(m: &Matrix) -> f64 {
    sym_eigenvalues(m).last().copied().unwrap_or(0.0)
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(m: &Matrix) -> Result<f64> {
    ensure_square(m, "matrix")?;
    ensure_finite(m)?;
    if m.nrows() == 1 {
        return Ok(m[(0, 0)].abs());
    }
    let ev = m.clone().complex_eigenvalues();
    Ok(ev.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// True iff `λ_min(M) ≥ −tol`.
pub fn is_psd(m: &Matrix, tol: f64) -> Result<bool> {
    let m = checked_symmetric(m)?;
    Ok(min_eigenvalue(&m) >= -tol)
}

/// Symmetric PSD square root via the eigendecomposition. Eigenvalues that are
/// negative only through roundoff are clamped to zero.
pub fn sqrt_psd(m: &Matrix) -> Result<Matrix> {
    let m = checked_symmetric(m)?;
    let eig = SymmetricEigen::new(m.clone());
    let floor = -EIG_TOL * m.norm().max(f64::MIN_POSITIVE);
    let min_eigenvalue = eig.eigenvalues.min();
    if min_eigenvalue < floor {
        return Err(Error::NotPsd { min_eigenvalue });
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    let q = &eig.eigenvectors;
    let s = q * Matrix::from_diagonal(&roots) * q.transpose();
    Ok(symmetrize(&s))
}

/// `‖X − Acl X Aclᵀ − W‖_F`, evaluated in double-double arithmetic so that
/// it stays meaningful when `‖X‖ ≫ ‖W‖`.
pub fn lyapunov_residual(acl: &Matrix, x: &Matrix, w: &Matrix) -> f64 {
    accurate_residual(acl, x, w).norm()
}

/// `(s, e)` with `s + e = a + b` exactly.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Double-double accumulator.
#[derive(Clone, Copy, Default)]
struct Dd(f64, f64);

impl Dd {
    fn add(self, v: f64) -> Dd {
        let (s, e) = two_sum(self.0, v);
        Dd(s, e + self.1)
    }

    fn add_prod(self, a: f64, b: f64) -> Dd {
        let p = a * b;
        let e = a.mul_add(b, -p);
        let d = self.add(p);
        Dd(d.0, d.1 + e)
    }

    fn value(self) -> f64 {
        self.0 + self.1
    }
}

/// `W − X + Acl X Aclᵀ` with the products and sums carried in double-double.
fn accurate_residual(acl: &Matrix, x: &Matrix, w: &Matrix) -> Matrix {
    let n = acl.nrows();
    // M = Acl X kept as hi + lo.
    let mut hi = Matrix::zeros(n, n);
    let mut lo = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let d = (0..n).fold(Dd::default(), |d, k| d.add_prod(acl[(i, k)], x[(k, j)]));
            let (h, l) = two_sum(d.0, d.1);
            hi[(i, j)] = h;
            lo[(i, j)] = l;
        }
    }
    symmetrize(&Matrix::from_fn(n, n, |i, j| {
        let mut d = Dd(w[(i, j)], 0.0).add(-x[(i, j)]);
        for l in 0..n {
            d = d.add_prod(hi[(i, l)], acl[(j, l)]).add_prod(lo[(i, l)], acl[(j, l)]);
        }
        d.value()
    }))
}

/// Solves `X − Acl X Aclᵀ − W = 0` for strictly stable `Acl` and PSD `W`.
///
/// Uses the doubling recursion `X ← X + Aₖ X Aₖᵀ, Aₖ ← Aₖ²`, which sums the
/// series `Σ Aclᵏ W (Aclᵏ)ᵀ` in `O(log)` squarings, followed by one
/// correction pass on the residual.
pub fn solve_discrete_lyapunov(acl: &Matrix, w: &Matrix) -> Result<Matrix> {
    ensure_square(acl, "Acl")?;
    ensure_finite(acl)?;
    let w = checked_symmetric(w)?;
    ensure_shape(&w, acl.nrows(), acl.nrows(), "W")?;
    let wnorm = w.norm();
    let min_w = min_eigenvalue(&w);
    if min_w < -EIG_TOL * wnorm.max(f64::MIN_POSITIVE) {
        return Err(Error::NotPsd { min_eigenvalue: min_w });
    }
    let rho = spectral_radius(acl)?;
    if rho >= 1.0 - STAB_MARGIN {
        return Err(Error::NotStable { spectral_radius: rho });
    }
    if wnorm == 0.0 {
        return Ok(Matrix::zeros(w.nrows(), w.ncols()));
    }

    let mut x = doubling_sum(acl, &w)?;
    // Correction passes solve the same equation with the residual on the
    // right-hand side (not necessarily PSD, which is fine for a series sum).
    // Near-marginal loops have ‖X‖ ≫ ‖W‖ and may need more than one.
    let mut best = lyapunov_residual(acl, &x, &w);
    for _ in 0..MAX_CORRECTIONS {
        if best <= f64::EPSILON * wnorm {
            break;
        }
        let residual = accurate_residual(acl, &x, &w);
        let next = symmetrize(&(&x + doubling_sum(acl, &residual)?));
        let r = lyapunov_residual(acl, &next, &w);
        if r >= best {
            break;
        }
        x = next;
        best = r;
    }
    if lyapunov_residual(acl, &x, &w) > LYAP_TOL * wnorm {
        return Err(Error::NumericalFailure(format!(
            "Lyapunov residual {:.3e} exceeds tolerance (spectral radius {rho:.12})",
            lyapunov_residual(acl, &x, &w)
        )));
    }
    Ok(x)
}

fn doubling_sum(acl: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    let mut x = rhs.clone();
    let mut ak = acl.clone();
    for _ in 0..MAX_DOUBLINGS {
        let inc = &ak * &x * ak.transpose();
        x += &inc;
        if inc.norm() <= f64::EPSILON * x.norm() || ak.norm() == 0.0 {
            return Ok(symmetrize(&x));
        }
        ak = &ak * &ak;
        ensure_finite(&ak).map_err(|_| Error::NumericalFailure("doubling overflow".into()))?;
    }
    Err(Error::NumericalFailure("Lyapunov doubling did not converge".into()))
}

/// Block-diagonal concatenation helper used by several LMI builders.
pub fn hstack(blocks: &[&Matrix]) -> Matrix {
    let rows = blocks.first().map_or(0, |b| b.nrows());
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    let mut c = 0;
    for b in blocks {
        out.view_mut((0, c), (rows, b.ncols())).copy_from(b);
        c += b.ncols();
    }
    out
}
