//! Special functions and symmetric-matrix utilities shared by the
//! statistical modules.
//!
//! The chi-square survival function is computed through the regularized
//! incomplete gamma function with the classical split: a power series
//! for small arguments and a Lentz continued fraction otherwise, with a
//! 1e-10 relative accuracy target. Satterthwaite p-values need
//! non-integer degrees of freedom, so a table lookup is not an option.

use crate::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use statrs::function::gamma::ln_gamma;

// Satterthwaite degrees of freedom can reach the millions when the
// variance is small relative to the mean; the series then needs on the
// order of 10*sqrt(a) terms, so the cap must be generous.
const GAMMAINC_MAX_ITER: usize = 200_000;
const GAMMAINC_EPS: f64 = 1e-14;

/// Diagnostics from an SPD solve: how much diagonal jitter was needed
/// and a cheap condition-number estimate from the Cholesky diagonal.
#[derive(Debug, Clone, Copy)]
pub struct SpdSolveReport {
    pub jitter_used: f64,
    pub condition_estimate: f64,
}

/// Survival function of the chi-square distribution with `df` degrees
/// of freedom: Q(df/2, x/2), the regularized upper incomplete gamma.
///
/// Monotone decreasing in `x`; `sf(0, df) = 1`.
pub fn chi_square_sf(x: f64, df: f64) -> Result<f64> {
    let (_, q) = chi_square_tails(x, df)?;
    Ok(q)
}

/// Lower-tail counterpart of [`chi_square_sf`]: P(df/2, x/2).
pub fn chi_square_cdf(x: f64, df: f64) -> Result<f64> {
    let (p, _) = chi_square_tails(x, df)?;
    Ok(p)
}

/// Both tails at once; they sum to 1 up to rounding because only one is
/// computed directly and the other is its complement.
pub fn chi_square_tails(x: f64, df: f64) -> Result<(f64, f64)> {
    if !x.is_finite() || !df.is_finite() {
        return Err(Error::Invalid(format!(
            "chi_square_sf requires finite arguments, got x={x}, df={df}"
        )));
    }
    if x < 0.0 {
        return Err(Error::Invalid(format!("chi_square_sf requires x >= 0, got {x}")));
    }
    if df <= 0.0 {
        return Err(Error::Invalid(format!("chi_square_sf requires df > 0, got {df}")));
    }
    let a = 0.5 * df;
    let z = 0.5 * x;
    if z == 0.0 {
        return Ok((0.0, 1.0));
    }
    // Series converges quickly for z < a + 1, the continued fraction
    // elsewhere; each returns the tail it computes most accurately.
    if z < a + 1.0 {
        let p = gammainc_lower_series(a, z)?;
        Ok((p, 1.0 - p))
    } else {
        let q = gammainc_upper_contfrac(a, z)?;
        Ok((1.0 - q, q))
    }
}

/// log of the shared prefactor z^a e^-z / Gamma(a).
///
/// The direct form loses ~9 digits to cancellation when a is around
/// 1e6 (three O(a ln a) terms nearly cancel), so for large a it is
/// rearranged as a*(ln1p(d) - d) with d = (z-a)/a plus the Stirling
/// remainder, which keeps absolute error near 1e-13.
fn gammainc_ln_prefactor(a: f64, z: f64) -> f64 {
    if a < 1e5 {
        return a * z.ln() - z - ln_gamma(a);
    }
    let d = (z - a) / a;
    let half_ln_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    a * (d.ln_1p() - d) + 0.5 * a.ln() - half_ln_2pi - 1.0 / (12.0 * a)
        + 1.0 / (360.0 * a * a * a)
}

/// Regularized lower incomplete gamma P(a, z) by power series,
/// valid for z < a + 1.
fn gammainc_lower_series(a: f64, z: f64) -> Result<f64> {
    let mut term = 1.0 / a;
    let mut sum = term;
    let mut ap = a;
    for _ in 0..GAMMAINC_MAX_ITER {
        ap += 1.0;
        term *= z / ap;
        sum += term;
        if term.abs() < sum.abs() * GAMMAINC_EPS {
            let ln_pref = gammainc_ln_prefactor(a, z);
            return Ok((sum * ln_pref.exp()).clamp(0.0, 1.0));
        }
    }
    Err(Error::Numerical(format!(
        "incomplete gamma series did not converge for a={a}, z={z}"
    )))
}

/// Regularized upper incomplete gamma Q(a, z) by modified Lentz
/// continued fraction, valid for z >= a + 1.
fn gammainc_upper_contfrac(a: f64, z: f64) -> Result<f64> {
    const TINY: f64 = 1e-300;
    let mut b = z + 1.0 - a;
    let mut c = 1.0 / TINY;
    let mut d = 1.0 / b;
    let mut h = d;
    for i in 1..=GAMMAINC_MAX_ITER {
        let an = -(i as f64) * (i as f64 - a);
        b += 2.0;
        d = an * d + b;
        if d.abs() < TINY {
            d = TINY;
        }
        c = b + an / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let delta = d * c;
        h *= delta;
        if (delta - 1.0).abs() < GAMMAINC_EPS {
            let ln_pref = gammainc_ln_prefactor(a, z);
            return Ok((h * ln_pref.exp()).clamp(0.0, 1.0));
        }
    }
    Err(Error::Numerical(format!(
        "incomplete gamma continued fraction did not converge for a={a}, z={z}"
    )))
}

/// Cholesky factorization of a symmetric matrix with escalating
/// diagonal jitter.
///
/// On factorization failure retries with `A + delta*I`, `delta` running
/// 1e-10 -> 1e-4 by factors of 10. Carries the factor plus the solve
/// report so callers can reuse one factorization for several solves and
/// for the log-determinant.
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
    pub report: SpdSolveReport,
}

impl SpdFactor {
    /// `A Z = B` for matrix right-hand side.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// `A z = b` for a single right-hand side.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    /// ln det A from the Cholesky diagonal.
    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// Dense inverse; use sparingly (needed where the full projector
    /// matrix W is formed).
    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

/// Factor a symmetric positive (semi)definite matrix, retrying with
/// jitter as documented on [`SpdFactor`].
pub fn factor_spd(a: &DMatrix<f64>) -> Result<SpdFactor> {
    if a.nrows() != a.ncols() {
        return Err(Error::Invalid(format!(
            "factor_spd requires a square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    let mut jitter = 0.0f64;
    loop {
        let candidate = if jitter == 0.0 {
            a.clone()
        } else {
            let mut m = a.clone();
            for i in 0..m.nrows() {
                m[(i, i)] += jitter;
            }
            m
        };
        if let Some(chol) = Cholesky::new(candidate) {
            let diag = chol.l_dirty().diagonal();
            let dmax = diag.iter().cloned().fold(f64::MIN, f64::max);
            let dmin = diag.iter().cloned().fold(f64::MAX, f64::min);
            let condition_estimate = if dmin > 0.0 { (dmax / dmin).powi(2) } else { f64::INFINITY };
            return Ok(SpdFactor {
                chol,
                report: SpdSolveReport { jitter_used: jitter, condition_estimate },
            });
        }
        jitter = if jitter == 0.0 { 1e-10 } else { jitter * 10.0 };
        if jitter > 1e-4 {
            return Err(Error::Numerical(
                "symmetric factorization failed at maximum jitter 1e-4".into(),
            ));
        }
    }
}

/// Solve `A Z = B` for symmetric positive (semi)definite `A`, with the
/// jitter policy of [`factor_spd`].
pub fn solve_spd(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(DMatrix<f64>, SpdSolveReport)> {
    if a.nrows() != b.nrows() {
        return Err(Error::Invalid(format!(
            "solve_spd dimension mismatch: A is {}x{}, B has {} rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    let f = factor_spd(a)?;
    Ok((f.solve_mat(b), f.report))
}

/// tr(A B) for square matrices of equal size (no symmetry assumed).
pub fn trace_prod(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            sum += a[(i, j)] * b[(j, i)];
        }
    }
    sum
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn sym_eig_min(a: &DMatrix<f64>) -> f64 {
    let sym = nalgebra::SymmetricEigen::new(a.clone());
    sym.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Survival function of Student's t distribution (upper tail).
pub fn student_t_sf(t: f64, df: f64) -> Result<f64> {
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::Invalid(format!("invalid t distribution df={df}: {e}")))?;
    Ok(dist.sf(t))
}

/// Survival function of the F distribution with (d1, d2) degrees of
/// freedom.
pub fn f_sf(x: f64, d1: f64, d2: f64) -> Result<f64> {
    use statrs::distribution::{ContinuousCDF, FisherSnedecor};
    let dist = FisherSnedecor::new(d1, d2)
        .map_err(|e| Error::Invalid(format!("invalid F distribution ({d1}, {d2}): {e}")))?;
    Ok(dist.sf(x))
}
