//! Score tests on the kernel variance components.
//!
//! The overall test asks whether any of the seven kernel components
//! contributes to the phenotype, using the plain linear model as the
//! null; the higher-order-interaction (HOI) test asks whether the
//! three-way product kernel contributes beyond the six main and
//! pairwise kernels, using the 6-kernel mixed model as the null.
//! Both are one-sided variance-component score tests whose statistic is
//! referred to a Satterthwaite scaled chi-square: S/γ̂ ~ χ²(ν̂) with
//! γ̂ = Var[S]/(2E[S]) and ν̂ = 2E[S]²/Var[S], and the variance carries
//! the efficient-information correction for the estimated null
//! parameters.

use crate::mixed_model::{fit_reml, ReMLFit, ReMLOptions, VarianceComponents};
use crate::numerics::{chi_square_sf, factor_spd, trace_prod};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Which test a [`TestResult`] came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestKind {
    Overall,
    Hoi,
    BaselinePpcar,
    BaselineFpcar,
    BaselineSkat,
}

impl std::fmt::Display for TestKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TestKind::Overall => "overall",
            TestKind::Hoi => "hoi",
            TestKind::BaselinePpcar => "ppcar",
            TestKind::BaselineFpcar => "fpcar",
            TestKind::BaselineSkat => "skat",
        };
        f.write_str(s)
    }
}

/// Outcome of one score test (or baseline test).
#[derive(Debug, Clone)]
pub struct TestResult {
    pub kind: TestKind,
    pub statistic: f64,
    /// Satterthwaite scale; NaN when the test is degenerate.
    pub gamma_hat: f64,
    /// Satterthwaite degrees of freedom; NaN when degenerate.
    pub nu_hat: f64,
    pub p_value: f64,
    /// E[S] under the null.
    pub e_s: f64,
    /// Var[S] under the null (efficient-information corrected).
    pub var_s: f64,
    /// Var[S] ≤ 0 or E[S] ≤ 0: the scaled-chi-square approximation is
    /// unavailable and the p-value is reported as 1.
    pub degenerate: bool,
    /// The fitted null model (None for the overall test's closed-form
    /// linear-model null is still provided, with empty tau).
    pub null_fit: Option<ReMLFit>,
}

/// Match the first two moments of a scaled chi-square:
/// γ̂ = Var/(2E), ν̂ = 2E²/Var.
pub fn satterthwaite(e: f64, var: f64) -> Result<(f64, f64)> {
    if !(e > 0.0) || !(var > 0.0) {
        return Err(Error::Invalid(format!(
            "satterthwaite needs E > 0 and Var > 0, got E={e}, Var={var}"
        )));
    }
    Ok((var / (2.0 * e), 2.0 * e * e / var))
}

fn finish(
    kind: TestKind,
    statistic: f64,
    e: f64,
    var: f64,
    null_fit: Option<ReMLFit>,
) -> Result<TestResult> {
    if e > 0.0 && var > 0.0 {
        let (gamma, nu) = satterthwaite(e, var)?;
        let p = chi_square_sf(statistic / gamma, nu)?;
        Ok(TestResult {
            kind,
            statistic,
            gamma_hat: gamma,
            nu_hat: nu,
            p_value: p,
            e_s: e,
            var_s: var,
            degenerate: false,
            null_fit,
        })
    } else {
        Ok(TestResult {
            kind,
            statistic,
            gamma_hat: f64::NAN,
            nu_hat: f64::NAN,
            p_value: 1.0,
            e_s: e,
            var_s: var,
            degenerate: true,
            null_fit,
        })
    }
}

/// Moments of the overall statistic: E[S], Var[S] with the residual
/// projector W0 = I - X (X'X)^-1 X' and the efficient-information
/// correction for the estimated sigma0^2. All traces avoid forming W0:
/// W0 K = K - X [(X'X)^-1 (X'K)].
fn overall_moments(x: &DMatrix<f64>, kernels: &[&DMatrix<f64>]) -> Result<(f64, f64)> {
    let n = x.nrows();
    let q = x.ncols();
    let xtx = factor_spd(&(x.transpose() * x))?;
    // B_i = W0 K_i
    let b: Vec<DMatrix<f64>> = kernels
        .iter()
        .map(|k| {
            let xtk = x.transpose() * *k;
            *k - x * xtx.solve_mat(&xtk)
        })
        .collect();
    let k_count = kernels.len();
    let tr_b: Vec<f64> = b.iter().map(|m| m.trace()).collect();
    let e = 0.5 * tr_b.iter().sum::<f64>();
    // efficient information: I_tt[i,j] - I_ts[i] I_ts[j] / I_ss
    let i_ss = 0.5 * (n - q) as f64;
    let mut var = 0.0;
    for i in 0..k_count {
        for j in 0..k_count {
            let i_tt = 0.5 * trace_prod(&b[i], &b[j]);
            let i_ts_i = 0.5 * tr_b[i];
            let i_ts_j = 0.5 * tr_b[j];
            var += i_tt - i_ts_i * i_ts_j / i_ss;
        }
    }
    Ok((e, var))
}

/// Overall-effect score test: null model y = X beta + eps, statistic
/// S = (y - X beta_hat)' K (y - X beta_hat) / (2 sigma0_hat^2) with
/// K the sum of all supplied kernels and sigma0_hat^2 = RSS/(n - q).
pub fn overall_test(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    kernels: &[&DMatrix<f64>],
) -> Result<TestResult> {
    let n = y.len();
    let q = x.ncols();
    if n <= q {
        return Err(Error::Invalid(format!("need n > q (n={n}, q={q})")));
    }
    if kernels.is_empty() {
        return Err(Error::Invalid("overall test needs at least one kernel".into()));
    }
    for k in kernels {
        if k.nrows() != n || k.ncols() != n {
            return Err(Error::Invalid(format!(
                "kernel is {}x{} but n={n}",
                k.nrows(),
                k.ncols()
            )));
        }
    }
    // OLS null fit
    let null_fit = fit_reml(y, x, &[], &ReMLOptions::default())?;
    let resid = y - x * &null_fit.beta;
    let sigma02 = null_fit.theta.sigma2;
    // residual at rounding level means y lies in the column space of X:
    // the statistic is 0 by definition rather than a 0/0 artifact
    let exact_fit = resid.norm_squared() <= 1e-24 * y.norm_squared();
    let mut quad = 0.0;
    for k in kernels {
        quad += resid.dot(&(*k * &resid));
    }
    let statistic = if exact_fit || sigma02 == 0.0 { 0.0 } else { quad / (2.0 * sigma02) };
    let (e, var) = overall_moments(x, kernels)?;
    finish(TestKind::Overall, statistic, e, var, Some(null_fit))
}

/// W01 = Sigma^-1 - Sigma^-1 X (X' Sigma^-1 X)^-1 X' Sigma^-1 at the
/// covariance implied by theta over `null_kernels`.
fn null_projector(
    theta: &VarianceComponents,
    x: &DMatrix<f64>,
    null_kernels: &[&DMatrix<f64>],
) -> Result<DMatrix<f64>> {
    let n = x.nrows();
    let sigma = theta.covariance(n, null_kernels);
    let fac = factor_spd(&sigma)?;
    let siginv_x = fac.solve_mat(x);
    let small = factor_spd(&(x.transpose() * &siginv_x))?;
    let mut w = fac.inverse();
    w -= &siginv_x * small.solve_mat(&siginv_x.transpose());
    let wt = w.transpose();
    Ok((w + wt).scale(0.5))
}

/// Statistic and moments of the HOI test at a given null covariance:
/// S_I = 1/2 y' W01 K123 W01 y, E = 1/2 tr(W01 K123), and the variance
/// subtracts the efficient-information correction over the 7 null
/// parameters (sigma^2 with G = I, then the six taus).
fn hoi_at_null(
    theta: &VarianceComponents,
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    null_kernels: &[&DMatrix<f64>],
    k123: &DMatrix<f64>,
) -> Result<(f64, f64, f64)> {
    let w01 = null_projector(theta, x, null_kernels)?;
    let w01y = &w01 * y;
    let statistic = 0.5 * w01y.dot(&(k123 * &w01y));
    // B matrices: product kernel first separate, then I and the nulls
    let b123 = &w01 * k123;
    let e = 0.5 * b123.trace();
    let mut bs: Vec<DMatrix<f64>> = Vec::with_capacity(1 + null_kernels.len());
    bs.push(w01.clone());
    for k in null_kernels {
        bs.push(&w01 * *k);
    }
    let m = bs.len();
    let mut delta = DVector::<f64>::zeros(m);
    for j in 0..m {
        delta[j] = trace_prod(&b123, &bs[j]);
    }
    let mut xi = DMatrix::<f64>::zeros(m, m);
    for j in 0..m {
        for k in j..m {
            let v = trace_prod(&bs[j], &bs[k]);
            xi[(j, k)] = v;
            xi[(k, j)] = v;
        }
    }
    let correction = match factor_spd(&xi) {
        Ok(fac) => delta.dot(&fac.solve_vec(&delta)),
        // xi singular beyond jitter: no stable correction; fall back to
        // the uncorrected variance rather than abort
        Err(_) => 0.0,
    };
    let var = 0.5 * trace_prod(&b123, &b123) - 0.5 * correction;
    Ok((statistic, e, var))
}

/// Higher-order-interaction score test.
///
/// `kernels` holds the seven Gram matrices in build order
/// [K1, K2, K3, K12, K13, K23, K123]; the null mixed model uses the
/// first six and the test targets the seventh.
pub fn hoi_test(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    kernels: &[&DMatrix<f64>],
    options: &ReMLOptions,
) -> Result<TestResult> {
    if kernels.len() != 7 {
        return Err(Error::Invalid(format!(
            "HOI test needs the seven-kernel set, got {}",
            kernels.len()
        )));
    }
    let null_kernels = &kernels[..6];
    let k123 = kernels[6];
    let null_fit = fit_reml(y, x, null_kernels, options)?;
    let (statistic, e, var) = hoi_at_null(&null_fit.theta, y, x, null_kernels, k123)?;
    finish(TestKind::Hoi, statistic, e, var, Some(null_fit))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;
    use rand_distr::StandardNormal;

    fn randn(rng: &mut ChaCha12Rng) -> f64 {
        rng.sample(StandardNormal)
    }

    fn gauss_kernel(n: usize, cols: usize, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
        let feats = DMatrix::<f64>::from_fn(n, cols, |_, _| randn(rng));
        crate::kernels::gram(&feats, &crate::kernels::KernelSpec::Gaussian { bandwidth: None })
            .unwrap()
            .values
    }

    fn seven_kernels(n: usize, rng: &mut ChaCha12Rng) -> Vec<DMatrix<f64>> {
        let k1 = gauss_kernel(n, 3, rng);
        let k2 = gauss_kernel(n, 3, rng);
        let k3 = gauss_kernel(n, 3, rng);
        let k12 = k1.component_mul(&k2);
        let k13 = k1.component_mul(&k3);
        let k23 = k2.component_mul(&k3);
        let k123 = k12.component_mul(&k3);
        vec![k1, k2, k3, k12, k13, k23, k123]
    }

    fn design(n: usize, rng: &mut ChaCha12Rng) -> DMatrix<f64> {
        DMatrix::<f64>::from_fn(n, 2, |_i, j| if j == 0 { 1.0 } else { randn(rng) })
    }

    #[test]
    fn satterthwaite_examples() {
        assert_eq!(satterthwaite(1.0, 2.0).unwrap(), (1.0, 1.0));
        assert_eq!(satterthwaite(5.0, 10.0).unwrap(), (1.0, 5.0));
        assert_eq!(satterthwaite(2.0, 16.0).unwrap(), (4.0, 0.5));
        assert!(satterthwaite(0.0, 1.0).is_err());
        assert!(satterthwaite(1.0, 0.0).is_err());
        assert!(satterthwaite(-2.0, 4.0).is_err());
    }

    #[test]
    fn overall_zero_residual_gives_p_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let n = 15;
        let x = design(n, &mut rng);
        let beta = DVector::from_vec(vec![1.0, -0.5]);
        let y = &x * beta; // exact fit, zero residual
        let kernels = seven_kernels(n, &mut rng);
        let refs: Vec<&DMatrix<f64>> = kernels.iter().collect();
        let res = overall_test(&y, &x, &refs).unwrap();
        assert_eq!(res.statistic, 0.0);
        assert_eq!(res.p_value, 1.0);
        assert!(!res.degenerate);
    }

    #[test]
    fn overall_invariant_to_column_space_shifts() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let n = 20;
        let x = design(n, &mut rng);
        let y = DVector::<f64>::from_fn(n, |_, _| randn(&mut rng));
        let kernels = seven_kernels(n, &mut rng);
        let refs: Vec<&DMatrix<f64>> = kernels.iter().collect();
        let base = overall_test(&y, &x, &refs).unwrap();
        let c = DVector::from_vec(vec![3.7, -1.2]);
        let shifted = overall_test(&(&y + &x * c), &x, &refs).unwrap();
        assert_abs_diff_eq!(
            base.statistic,
            shifted.statistic,
            epsilon = 1e-8 * base.statistic.abs()
        );
        assert_abs_diff_eq!(base.p_value, shifted.p_value, epsilon = 1e-8);
    }

    #[test]
    fn overall_sum_variance_matches_single_kernel_formula() {
        // bilinearity: the SUM over the 7x7 efficient-information block
        // equals the scalar efficient information of the summed kernel
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let n = 18;
        let x = design(n, &mut rng);
        let kernels = seven_kernels(n, &mut rng);
        let refs: Vec<&DMatrix<f64>> = kernels.iter().collect();
        let (e7, v7) = overall_moments(&x, &refs).unwrap();
        let total = kernels.iter().fold(DMatrix::<f64>::zeros(n, n), |acc, k| acc + k);
        let (e1, v1) = overall_moments(&x, &[&total]).unwrap();
        assert_abs_diff_eq!(e7, e1, epsilon = 1e-10 * e1.abs());
        assert_abs_diff_eq!(v7, v1, epsilon = 1e-10 * v1.abs());
    }

    #[test]
    fn overall_moments_match_dense_projector() {
        // independent dense reimplementation with explicit W0
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let n = 14;
        let x = design(n, &mut rng);
        let kernels = seven_kernels(n, &mut rng);
        let refs: Vec<&DMatrix<f64>> = kernels.iter().collect();
        let (e, var) = overall_moments(&x, &refs).unwrap();
        let xtx_inv = (x.transpose() * &x).try_inverse().unwrap();
        let w0 = DMatrix::<f64>::identity(n, n) - &x * xtx_inv * x.transpose();
        let total = kernels.iter().fold(DMatrix::<f64>::zeros(n, n), |acc, k| acc + k);
        let w0k = &w0 * &total;
        let e_direct = 0.5 * w0k.trace();
        let i_tt = 0.5 * (&w0k * &w0k).trace();
        let i_ts = 0.5 * w0k.trace();
        let i_ss = 0.5 * (n as f64 - 2.0);
        let var_direct = i_tt - i_ts * i_ts / i_ss;
        assert_abs_diff_eq!(e, e_direct, epsilon = 1e-9 * e_direct.abs());
        assert_abs_diff_eq!(var, var_direct, epsilon = 1e-9 * var_direct.abs());
    }

    #[test]
    fn satterthwaite_identities_hold_on_results() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let n = 20;
        let x = design(n, &mut rng);
        let y = DVector::<f64>::from_fn(n, |_, _| randn(&mut rng));
        let kernels = seven_kernels(n, &mut rng);
        let refs: Vec<&DMatrix<f64>> = kernels.iter().collect();
        for res in [
            overall_test(&y, &x, &refs).unwrap(),
            hoi_test(&y, &x, &refs, &ReMLOptions::default()).unwrap(),
        ] {
            assert!(!res.degenerate);
            assert_abs_diff_eq!(
                res.gamma_hat * res.nu_hat,
                res.e_s,
                epsilon = 1e-10 * res.e_s.abs()
            );
            assert_abs_diff_eq!(
                2.0 * res.gamma_hat * res.gamma_hat * res.nu_hat,
                res.var_s,
                epsilon = 1e-10 * res.var_s.abs()
            );
            let p = chi_square_sf(res.statistic / res.gamma_hat, res.nu_hat).unwrap();
            assert_eq!(res.p_value, p);
        }
    }

    #[test]
    fn hoi_zero_product_kernel_gives_p_one() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let n = 16;
        let x = design(n, &mut rng);
        let y = DVector::<f64>::from_fn(n, |_, _| randn(&mut rng));
        let mut kernels = seven_kernels(n, &mut rng);
        kernels[6] = DMatrix::zeros(n, n);
        let refs: Vec<&DMatrix<f64>> = kernels.iter().collect();
        let res = hoi_test(&y, &x, &refs, &ReMLOptions::default()).unwrap();
        assert_eq!(res.statistic, 0.0);
        assert_eq!(res.p_value, 1.0);
        assert!(res.degenerate);
    }

    #[test]
    fn hoi_invariant_to_column_space_shifts_at_fixed_null() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let n = 18;
        let x = design(n, &mut rng);
        let y = DVector::<f64>::from_fn(n, |_, _| randn(&mut rng));
        let kernels = seven_kernels(n, &mut rng);
        let refs: Vec<&DMatrix<f64>> = kernels.iter().collect();
        let theta = VarianceComponents::new(0.8, vec![0.1, 0.05, 0.2, 0.02, 0.0, 0.15]);
        let (s0, e0, v0) = hoi_at_null(&theta, &y, &x, &refs[..6], refs[6]).unwrap();
        let c = DVector::from_vec(vec![-2.0, 0.9]);
        let (s1, e1, v1) = hoi_at_null(&theta, &(&y + &x * c), &x, &refs[..6], refs[6]).unwrap();
        assert_abs_diff_eq!(s0, s1, epsilon = 1e-8 * s0.abs());
        assert_eq!(e0, e1);
        assert_eq!(v0, v1);
    }

    #[test]
    fn hoi_expectation_matches_projector_identity() {
        // W01 Sigma W01 = W01 implies E[S_I] = 1/2 tr(W01 K123) equals
        // 1/2 tr(W01 K123 W01 Sigma); check numerically.
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let n = 12;
        let x = design(n, &mut rng);
        let kernels = seven_kernels(n, &mut rng);
        let refs: Vec<&DMatrix<f64>> = kernels.iter().collect();
        let theta = VarianceComponents::new(0.6, vec![0.1, 0.3, 0.05, 0.0, 0.2, 0.01]);
        let w01 = null_projector(&theta, &x, &refs[..6]).unwrap();
        let sigma = theta.covariance(n, &refs[..6]);
        let lhs = 0.5 * (&w01 * refs[6]).trace();
        let rhs = 0.5 * (&w01 * refs[6] * &w01 * sigma).trace();
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-8 * lhs.abs());
    }

    #[test]
    fn p_values_monotone_in_statistic() {
        let (gamma, nu) = satterthwaite(3.0, 4.5).unwrap();
        let mut last = 1.0;
        for s in [0.0, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0] {
            let p = chi_square_sf(s / gamma, nu).unwrap();
            assert!(p <= last);
            last = p;
        }
    }
}
