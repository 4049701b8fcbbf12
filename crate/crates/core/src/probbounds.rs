//! Probability-to-LMI scaling factors.
//!
//! A chance constraint on a zero-mean stationary variable with covariance
//! bounded by `X` becomes a deterministic bound `variance ≤ factor · size²`.
//! The factor depends on what is known about the disturbance:
//!
//! | class | constraint        | factor                        |
//! |-------|-------------------|-------------------------------|
//! | WSS   | SCC one-sided     | `2ε`                          |
//! | WSS   | SCC two-sided     | `ε`                           |
//! | NRM   | SCC one-sided     | `Φ⁻¹(1 − ε)⁻²`                |
//! | NRM   | SCC two-sided     | `Φ⁻¹(1 − ε/2)⁻²`              |
//! | WSS   | JCC, dimension n  | `ε / n`                       |
//! | NRM   | JCC, dimension n  | `1 / χ²ₙ⁻¹(1 − ε)`            |
//!
//! The WSS rows come from Chebyshev-type inequalities and hold for any
//! distribution with the given covariance; the NRM rows are exact Gaussian
//! tail quantiles.

use libm::erfc;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{Error, Result};

/// Smallest violation level the toolkit distinguishes from zero.
pub const LEVEL_FLOOR: f64 = 1e-9;
/// Target accuracy of the inverse CDFs, measured on the forward CDF.
pub const CDF_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DisturbanceClass {
    /// Wide-sense stationary: only mean and covariance are known.
    Wss,
    /// Gaussian.
    Nrm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sidedness {
    OneSided,
    TwoSided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LevelKind {
    SccOneSided,
    SccTwoSided,
    Jcc,
}

impl LevelKind {
    pub fn scc(side: Sidedness) -> Self {
        match side {
            Sidedness::OneSided => LevelKind::SccOneSided,
            Sidedness::TwoSided => LevelKind::SccTwoSided,
        }
    }
}

fn check_probability(p: f64, what: &str) -> Result<()> {
    if p > 0.0 && p < 1.0 {
        Ok(())
    } else {
        Err(Error::OutOfRange(format!("{what} = {p} must lie in (0, 1)")))
    }
}

/// Standard normal CDF.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal upper tail `1 − Φ(z)`, accurate for large `z`.
pub fn std_normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Chi-squared CDF with `n` degrees of freedom.
pub fn chi_squared_cdf(n: u32, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        gamma_lr(0.5 * n as f64, 0.5 * x)
    }
}

/// Chi-squared upper tail `1 − F(x)`.
pub fn chi_squared_sf(n: u32, x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        gamma_ur(0.5 * n as f64, 0.5 * x)
    }
}

fn chi_squared_ln_pdf(n: u32, x: f64) -> f64 {
    let k = 0.5 * n as f64;
    (k - 1.0) * x.ln() - 0.5 * x - k * std::f64::consts::LN_2 - ln_gamma(k)
}

/// Finds the root of an increasing function on a bracket `[lo, hi]` with
/// `f(lo) ≤ 0 ≤ f(hi)`. Newton steps are taken when they stay inside the
/// current bracket, otherwise the bracket is bisected.
fn safeguarded_newton(
    mut lo: f64,
    mut hi: f64,
    mut x: f64,
    f: impl Fn(f64) -> (f64, f64),
) -> f64 {
    for _ in 0..200 {
        let (fx, dfx) = f(x);
        if fx == 0.0 {
            return x;
        }
        if fx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let newton = x - fx / dfx;
        let next = if dfx > 0.0 && newton.is_finite() && newton > lo && newton < hi {
            newton
        } else {
            0.5 * (lo + hi)
        };
        if (next - x).abs() <= 4.0 * f64::EPSILON * x.abs().max(1e-300) || hi - lo <= 4.0 * f64::EPSILON * hi.abs() {
            return next;
        }
        x = next;
    }
    x
}

/// Lower-tail quantile `z < 0` with `Φ(z) = p` for `p ≤ 0.5`, solved in
/// log space so that tiny tail probabilities keep full relative accuracy.
fn normal_lower_quantile(p: f64) -> f64 {
    if p == 0.5 {
        return 0.0;
    }
    let target = p.ln();
    // Φ(z) for z ≤ −38.5 underflows in double precision.
    let lo = -38.5;
    let guess = -(-2.0 * p.ln()).sqrt().min(38.0);
    safeguarded_newton(lo, 0.0, guess.max(lo), |z| {
        let cdf = std_normal_cdf(z);
        (cdf.ln() - target, std_normal_pdf(z) / cdf)
    })
}

/// `Φ⁻¹(p)` for `p ∈ (0, 1)`.
pub fn inv_std_normal_cdf(p: f64) -> Result<f64> {
    check_probability(p, "p")?;
    if p <= 0.5 {
        Ok(normal_lower_quantile(p))
    } else {
        Ok(-normal_lower_quantile(1.0 - p))
    }
}

/// `Φ⁻¹(1 − q)` computed from the tail mass `q` directly.
fn normal_upper_quantile(q: f64) -> f64 {
    if q <= 0.5 {
        -normal_lower_quantile(q)
    } else {
        normal_lower_quantile(1.0 - q)
    }
}

/// Quantile of the χ²ₙ distribution, parameterized either by the lower mass
/// `p` or (when `upper` is set) by the upper tail mass.
fn chi_squared_quantile(n: u32, mass: f64, upper: bool) -> f64 {
    let residual = |x: f64| -> (f64, f64) {
        let dens = chi_squared_ln_pdf(n, x).exp();
        if upper {
            let sf = chi_squared_sf(n, x);
            (mass.ln() - sf.ln(), dens / sf)
        } else {
            let cdf = chi_squared_cdf(n, x);
            (cdf.ln() - mass.ln(), dens / cdf)
        }
    };
    let mut hi = (n as f64).max(1.0);
    while residual(hi).0 < 0.0 {
        hi *= 2.0;
    }
    safeguarded_newton(0.0, hi, 0.5 * hi, residual)
}

/// `F⁻¹_{χ²,n}(p)` for `n ≥ 1`, `p ∈ (0, 1)`.
pub fn inv_chi_squared_cdf(n: u32, p: f64) -> Result<f64> {
    check_probability(p, "p")?;
    if n == 0 {
        return Err(Error::OutOfRange("chi-squared degrees of freedom must be ≥ 1".into()));
    }
    if p <= 0.5 {
        Ok(chi_squared_quantile(n, p, false))
    } else {
        Ok(chi_squared_quantile(n, 1.0 - p, true))
    }
}

/// The SCC factor `α` (state) or `β` (input).
pub fn scc_factor(class: DisturbanceClass, side: Sidedness, eps: f64) -> Result<f64> {
    check_probability(eps, "eps")?;
    if side == Sidedness::OneSided && eps >= 0.5 {
        return Err(Error::OutOfRange(format!(
            "one-sided chance constraints need eps < 0.5 to bound a tail, got {eps}"
        )));
    }
    Ok(match (class, side) {
        (DisturbanceClass::Wss, Sidedness::OneSided) => 2.0 * eps,
        (DisturbanceClass::Wss, Sidedness::TwoSided) => eps,
        (DisturbanceClass::Nrm, Sidedness::OneSided) => normal_upper_quantile(eps).powi(-2),
        (DisturbanceClass::Nrm, Sidedness::TwoSided) => normal_upper_quantile(0.5 * eps).powi(-2),
    })
}

/// The JCC factor `γₙ` for an `n`-dimensional ellipsoidal constraint.
pub fn jcc_factor(class: DisturbanceClass, n: u32, eps: f64) -> Result<f64> {
    check_probability(eps, "eps")?;
    if n == 0 {
        return Err(Error::OutOfRange("JCC dimension must be ≥ 1".into()));
    }
    Ok(match class {
        DisturbanceClass::Wss => eps / n as f64,
        DisturbanceClass::Nrm => {
            let q = if eps <= 0.5 {
                chi_squared_quantile(n, eps, true)
            } else {
                chi_squared_quantile(n, 1.0 - eps, false)
            };
            1.0 / q
        }
    })
}

/// Factor for a level, dispatching on the constraint kind.
pub fn factor(class: DisturbanceClass, kind: LevelKind, n: u32, eps: f64) -> Result<f64> {
    match kind {
        LevelKind::SccOneSided => scc_factor(class, Sidedness::OneSided, eps),
        LevelKind::SccTwoSided => scc_factor(class, Sidedness::TwoSided, eps),
        LevelKind::Jcc => jcc_factor(class, n, eps),
    }
}

/// Inverse of [`factor`] without clamping. The result may be ≥ 1 (or ≥ 0.5
/// for one-sided WSS) when the factor is too large to correspond to any
/// admissible level.
pub fn level_from_factor_raw(class: DisturbanceClass, kind: LevelKind, n: u32, factor: f64) -> Result<f64> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::OutOfRange(format!("factor must be positive and finite, got {factor}")));
    }
    if kind == LevelKind::Jcc && n == 0 {
        return Err(Error::OutOfRange("JCC dimension must be ≥ 1".into()));
    }
    Ok(match (class, kind) {
        (DisturbanceClass::Wss, LevelKind::SccOneSided) => 0.5 * factor,
        (DisturbanceClass::Wss, LevelKind::SccTwoSided) => factor,
        (DisturbanceClass::Wss, LevelKind::Jcc) => n as f64 * factor,
        (DisturbanceClass::Nrm, LevelKind::SccOneSided) => std_normal_sf(factor.powf(-0.5)),
        (DisturbanceClass::Nrm, LevelKind::SccTwoSided) => 2.0 * std_normal_sf(factor.powf(-0.5)),
        (DisturbanceClass::Nrm, LevelKind::Jcc) => chi_squared_sf(n, 1.0 / factor),
    })
}

/// The level `ε` whose factor equals `factor`, clamped to
/// `[LEVEL_FLOOR, 1 − LEVEL_FLOOR]`.
pub fn level_from_factor(class: DisturbanceClass, kind: LevelKind, n: u32, factor: f64) -> Result<f64> {
    let eps = level_from_factor_raw(class, kind, n, factor)?;
    Ok(eps.clamp(LEVEL_FLOOR, 1.0 - LEVEL_FLOOR))
}

/// Which factor curve to tabulate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveKind {
    Scc(Sidedness),
    Jcc { n: u32 },
}

/// `count` evenly spaced points `a, a + step, …` up to and including `b`
/// (within rounding). Every point must lie in `(0, 1)`.
pub fn uniform_grid(a: f64, b: f64, step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) || !(a <= b) || !a.is_finite() || !b.is_finite() {
        return Err(Error::OutOfRange(format!("bad grid {a}:{b}:{step}")));
    }
    let count = ((b - a) / step + 1e-9).floor() as usize + 1;
    let grid: Vec<f64> = (0..count).map(|i| a + i as f64 * step).collect();
    if grid.iter().any(|&e| !(e > 0.0 && e < 1.0)) {
        return Err(Error::OutOfRange(format!("grid {a}:{b}:{step} leaves (0, 1)")));
    }
    Ok(grid)
}

/// `(eps, factor)` rows for one curve over `grid`.
pub fn factor_curve(kind: CurveKind, class: DisturbanceClass, grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    grid.iter()
        .map(|&eps| {
            let f = match kind {
                CurveKind::Scc(side) => scc_factor(class, side, eps)?,
                CurveKind::Jcc { n } => jcc_factor(class, n, eps)?,
            };
            Ok((eps, f))
        })
        .collect()
}
