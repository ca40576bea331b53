//! Linear mixed model with one variance component per kernel:
//! y = X beta + sum_i h_i + eps, h_i ~ N(0, tau_i K_i), eps ~ N(0, sigma^2 I).
//!
//! Variance components are estimated by restricted maximum likelihood
//! with an EM warm-up followed by Fisher scoring, run from a grid of
//! starting values and keeping the best converged fit. The restricted
//! log-likelihood, its score, and the expected information are exposed
//! directly so the score tests can reuse them, and the penalized
//! first-order block system is provided as an independent route to the
//! same effect estimates (BLUPs).

use crate::numerics::{factor_spd, trace_prod, SpdFactor};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// Default multi-start grid for every tau (sigma^2 always starts at
/// the sample variance of y).
pub const DEFAULT_START_GRID: [f64; 7] = [0.0, 1e-5, 1e-4, 1e-3, 1e-2, 0.1, 1.0];

/// Variance components ordered as (sigma^2, tau aligned with the
/// kernel list).
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceComponents {
    pub sigma2: f64,
    pub tau: Vec<f64>,
}

impl VarianceComponents {
    pub fn new(sigma2: f64, tau: Vec<f64>) -> Self {
        Self { sigma2, tau }
    }

    /// Number of parameters including sigma^2.
    pub fn n_params(&self) -> usize {
        1 + self.tau.len()
    }

    /// Covariance matrix Theta = sigma^2 I + sum tau_i K_i for a known
    /// sample count n (needed because the kernel list may be empty).
    pub fn covariance(&self, n: usize, kernels: &[&DMatrix<f64>]) -> DMatrix<f64> {
        let mut theta = DMatrix::<f64>::identity(n, n) * self.sigma2;
        for (t, k) in self.tau.iter().zip(kernels) {
            if *t != 0.0 {
                theta += k.scale(*t);
            }
        }
        theta
    }
}

/// Options for the ReML fitter; CLI flags map onto these.
#[derive(Debug, Clone)]
pub struct ReMLOptions {
    /// Convergence tolerance on the restricted log-likelihood change.
    pub tol: f64,
    /// Maximum Fisher-scoring iterations per start.
    pub max_iter: usize,
    /// EM warm-up iterations per start.
    pub em_steps: usize,
    /// How many values of the default start grid to use (1..=7).
    pub starts: usize,
}

impl Default for ReMLOptions {
    fn default() -> Self {
        Self { tol: 1e-5, max_iter: 50, em_steps: 5, starts: DEFAULT_START_GRID.len() }
    }
}

/// Result of a restricted-maximum-likelihood fit.
#[derive(Debug, Clone)]
pub struct ReMLFit {
    pub theta: VarianceComponents,
    pub beta: DVector<f64>,
    pub restricted_loglik: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Which multi-start won (index into the start grid).
    pub start_index: usize,
}

/// BLUP random-effect vectors, aligned with the kernel list, plus the
/// residual; `y = X beta + sum(components) + residual` holds exactly.
#[derive(Debug, Clone)]
pub struct BlupEffects {
    pub components: Vec<DVector<f64>>,
    pub residual: DVector<f64>,
}

/// Everything the score/information formulas need at one theta.
struct ModelState {
    beta: DVector<f64>,

    loglik: f64,
    /// W = Theta^-1 - Theta^-1 X (X' Theta^-1 X)^-1 X' Theta^-1
    w: Option<DMatrix<f64>>,
    /// W y (equals Theta^-1 (y - X beta))
    wy: DVector<f64>,
    factor: SpdFactor,
}

fn check_shapes(y: &DVector<f64>, x: &DMatrix<f64>, kernels: &[&DMatrix<f64>]) -> Result<()> {
    let n = y.len();
    if x.nrows() != n {
        return Err(Error::Invalid(format!(
            "X has {} rows but y has {} entries",
            x.nrows(),
            n
        )));
    }
    if x.ncols() >= n {
        return Err(Error::Invalid(format!(
            "need n > q (got n={}, q={})",
            n,
            x.ncols()
        )));
    }
    for (i, k) in kernels.iter().enumerate() {
        if k.nrows() != n || k.ncols() != n {
            return Err(Error::Invalid(format!(
                "kernel {} is {}x{} but n={}",
                i,
                k.nrows(),
                k.ncols(),
                n
            )));
        }
    }
    Ok(())
}

fn eval_state(
    theta: &VarianceComponents,
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    kernels: &[&DMatrix<f64>],
    with_w: bool,
) -> Result<ModelState> {
    let n = y.len();
    let cov = theta.covariance(n, kernels);
    let factor = factor_spd(&cov)?;
    let cov_inv_x = factor.solve_mat(x);
    let xt_cov_inv_x = x.transpose() * &cov_inv_x;
    let small = factor_spd(&xt_cov_inv_x)?;
    let beta = small.solve_vec(&(cov_inv_x.transpose() * y));
    let resid = y - x * &beta;
    let wy = factor.solve_vec(&resid);
    let quad = resid.dot(&wy);
    let loglik = -0.5 * factor.log_det() - 0.5 * small.log_det() - 0.5 * quad;
    let mut state = ModelState { beta, loglik, w: None, wy, factor };
    if with_w {
        add_w(&mut state, x);
    }
    Ok(state)
}

/// Fill in W = Theta^-1 - A S^-1 A' (A = Theta^-1 X) from the stored
/// factorization. Split out of [`eval_state`] so line-search candidates
/// pay only a Cholesky; the O(n^3) inverse is computed once per
/// accepted step.
fn add_w(state: &mut ModelState, x: &DMatrix<f64>) {
    if state.w.is_some() {
        return;
    }
    let cov_inv_x = state.factor.solve_mat(x);
    let xt_cov_inv_x = x.transpose() * &cov_inv_x;
    // same matrix eval_state already factored successfully
    let small = factor_spd(&xt_cov_inv_x).expect("X' Theta^-1 X factorization");
    let s_inv_at = small.solve_mat(&cov_inv_x.transpose());
    let mut w = state.factor.inverse();
    w -= &cov_inv_x * &s_inv_at;
    // mirror to remove rounding asymmetry
    let wt = w.transpose();
    w = (w + wt).scale(0.5);
    state.w = Some(w);
}


/// Restricted log-likelihood of Eq.-style form:
/// -1/2 ln|Theta| - 1/2 ln|X' Theta^-1 X| - 1/2 (y-Xb)' Theta^-1 (y-Xb)
/// with b the GLS estimate (constants omitted).
pub fn restricted_loglik(
    theta: &VarianceComponents,
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    kernels: &[&DMatrix<f64>],
) -> Result<f64> {
    check_shapes(y, x, kernels)?;
    if theta.tau.len() != kernels.len() {
        return Err(Error::Invalid(format!(
            "theta has {} tau entries for {} kernels",
            theta.tau.len(),
            kernels.len()
        )));
    }
    Ok(eval_state(theta, y, x, kernels, false)?.loglik)
}

/// Score vector of the restricted log-likelihood, ordered
/// (sigma^2, tau_1, ..., tau_k):
/// dl/d theta_i = -1/2 tr(W G_i) + 1/2 y' W G_i W y, G in {I, K_1, ...}.
pub fn reml_score(
    theta: &VarianceComponents,
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    kernels: &[&DMatrix<f64>],
) -> Result<DVector<f64>> {
    check_shapes(y, x, kernels)?;
    let state = eval_state(theta, y, x, kernels, true)?;
    let w = state.w.as_ref().unwrap();
    let wy = &state.wy;
    let mut g = DVector::<f64>::zeros(1 + kernels.len());
    g[0] = -0.5 * w.trace() + 0.5 * wy.dot(wy);
    for (i, k) in kernels.iter().enumerate() {
        // tr(W K) is the Frobenius inner product for symmetric factors
        let tr_wk = w.dot(k);
        let quad = wy.dot(&(*k * wy));
        g[i + 1] = -0.5 * tr_wk + 0.5 * quad;
    }
    Ok(g)
}

/// Expected information with entries 1/2 tr(W G_i W G_j), in the same
/// (sigma^2, tau...) order as [`reml_score`].
pub fn expected_information(
    theta: &VarianceComponents,
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    kernels: &[&DMatrix<f64>],
) -> Result<DMatrix<f64>> {
    check_shapes(y, x, kernels)?;
    let state = eval_state(theta, y, x, kernels, true)?;
    let w = state.w.as_ref().unwrap();
    Ok(information_from_w(w, kernels))
}

/// Expected information given a precomputed W.
fn information_from_w(w: &DMatrix<f64>, kernels: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let k = kernels.len();
    let b: Vec<DMatrix<f64>> = kernels.iter().map(|kk| w * *kk).collect();
    let mut info = DMatrix::<f64>::zeros(k + 1, k + 1);
    info[(0, 0)] = 0.5 * w.dot(w);
    for i in 0..k {
        // tr(W W K_i) = <W, B_i> elementwise (W symmetric)
        let v = 0.5 * w.dot(&b[i]);
        info[(0, i + 1)] = v;
        info[(i + 1, 0)] = v;
    }
    for i in 0..k {
        for j in i..k {
            let v = 0.5 * trace_prod(&b[i], &b[j]);
            info[(i + 1, j + 1)] = v;
            info[(j + 1, i + 1)] = v;
        }
    }
    info
}

/// One multi-start ReML optimization: EM warm-up then Fisher scoring
/// with step halving, non-negativity projection, and freezing of
/// parameters pinned at zero.
fn run_start(
    start_tau: f64,
    start_index: usize,
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    kernels: &[&DMatrix<f64>],
    options: &ReMLOptions,
) -> Result<ReMLFit> {
    let n = y.len() as f64;
    let npar = 1 + kernels.len();
    let var_y = {
        let mean = y.mean();
        y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (y.len() as f64 - 1.0)
    };
    let mut theta = VarianceComponents::new(var_y.max(1e-12), vec![start_tau; kernels.len()]);
    let mut state = eval_state(&theta, y, x, kernels, true)?;
    let mut iterations = 0usize;

    // EM warm-up: theta_i += theta_i^2 (y'W G_i W y - tr(W G_i)) / n.
    // Exact EM for this model, so the restricted likelihood is monotone.
    for _ in 0..options.em_steps {
        let w = state.w.as_ref().unwrap();
        let wy = &state.wy;
        let mut next = theta.clone();
        let g_sigma = wy.dot(wy) - w.trace();
        next.sigma2 = (theta.sigma2 + theta.sigma2.powi(2) * g_sigma / n).max(0.0);
        for (i, k) in kernels.iter().enumerate() {
            let g_tau = wy.dot(&(*k * wy)) - w.dot(k);
            next.tau[i] = (theta.tau[i] + theta.tau[i].powi(2) * g_tau / n).max(0.0);
        }
        match eval_state(&next, y, x, kernels, true) {
            Ok(s) => {
                theta = next;
                state = s;
            }
            Err(_) => break,
        }
        iterations += 1;
    }

    // Fisher scoring on the free parameters, with a damping cascade:
    // the pure expected-information direction is tried first, then
    // diagonally damped (Levenberg-Marquardt) directions, then a plain
    // EM step. Convergence is declared only when none of them can
    // improve the restricted likelihood by tol, so a near-singular
    // information matrix (collinear kernels) cannot fake convergence
    // at a non-stationary point.
    let mut pinned = vec![0usize; npar];
    let mut frozen = vec![false; npar];
    let mut converged = false;
    while iterations < options.em_steps + options.max_iter {
        let w = state.w.as_ref().unwrap();
        let wy = &state.wy;
        let free: Vec<usize> = (0..npar).filter(|&i| !frozen[i]).collect();
        if free.is_empty() {
            converged = true;
            break;
        }
        // gradient on free coordinates
        let mut grad = DVector::<f64>::zeros(free.len());
        for (fi, &i) in free.iter().enumerate() {
            grad[fi] = if i == 0 {
                -0.5 * w.trace() + 0.5 * wy.dot(wy)
            } else {
                let k = kernels[i - 1];
                -0.5 * w.dot(k) + 0.5 * wy.dot(&(k * wy))
            };
        }
        // expected information restricted to free coordinates
        let full_info = information_from_w(w, kernels);
        let mut info = DMatrix::<f64>::zeros(free.len(), free.len());
        for (fi, &i) in free.iter().enumerate() {
            for (fj, &j) in free.iter().enumerate() {
                info[(fi, fj)] = full_info[(i, j)];
            }
        }
        let diag_max = (0..free.len()).map(|i| info[(i, i)]).fold(1e-300, f64::max);
        let scale = theta.sigma2 + theta.tau.iter().sum::<f64>() + var_y;

        // best sub-tol move seen this iteration (kept only as a last
        // resort so the iteration still makes monotone progress)
        let mut fallback: Option<(VarianceComponents, ModelState)> = None;
        let mut advanced: Option<(VarianceComponents, ModelState)> = None;
        'cascade: for damping in [0.0, 1e-6, 1e-2, 1e2] {
            let mut damped = info.clone();
            for i in 0..free.len() {
                damped[(i, i)] += damping * diag_max;
            }
            let Ok(fac) = factor_spd(&damped) else { continue };
            let mut dir = fac.solve_vec(&grad);
            // trust cap so step halving operates at a meaningful
            // resolution even when the solve blows the direction up
            let dmax = dir.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if dmax > 100.0 * scale {
                dir.scale_mut(100.0 * scale / dmax);
            }
            let mut step = 1.0;
            for _ in 0..=12 {
                let mut cand = theta.clone();
                for (fi, &i) in free.iter().enumerate() {
                    let v =
                        (if i == 0 { theta.sigma2 } else { theta.tau[i - 1] }) + step * dir[fi];
                    let v = v.max(0.0);
                    if i == 0 {
                        cand.sigma2 = v;
                    } else {
                        cand.tau[i - 1] = v;
                    }
                }
                if let Ok(s) = eval_state(&cand, y, x, kernels, false) {
                    if s.loglik - state.loglik >= options.tol {
                        advanced = Some((cand, s));
                        break 'cascade;
                    }
                    if s.loglik >= state.loglik
                        && fallback.as_ref().is_none_or(|(_, b)| s.loglik > b.loglik)
                    {
                        fallback = Some((cand, s));
                    }
                }
                step *= 0.5;
            }
        }
        if advanced.is_none() {
            // EM fallback: monotone and always well-defined
            let mut next = theta.clone();
            let g_sigma = wy.dot(wy) - w.trace();
            next.sigma2 = (theta.sigma2 + theta.sigma2.powi(2) * g_sigma / n).max(0.0);
            for (i, k) in kernels.iter().enumerate() {
                let g_tau = wy.dot(&(*k * wy)) - w.dot(k);
                next.tau[i] = (theta.tau[i] + theta.tau[i].powi(2) * g_tau / n).max(0.0);
            }
            if let Ok(s) = eval_state(&next, y, x, kernels, false) {
                if s.loglik - state.loglik >= options.tol {
                    advanced = Some((next, s));
                } else if s.loglik >= state.loglik
                    && fallback.as_ref().is_none_or(|(_, b)| s.loglik > b.loglik)
                {
                    fallback = Some((next, s));
                }
            }
        }
        iterations += 1;
        match advanced.or(fallback) {
            Some((cand, mut s)) => {
                let delta = s.loglik - state.loglik;
                let done = delta.abs() < options.tol;
                if !done {
                    // the next iteration's gradient needs W; skip the
                    // O(n^3) fill when this step already converged
                    add_w(&mut s, x);
                }
                theta = cand;
                state = s;
                // freeze parameters that keep hitting the zero boundary
                for i in 0..npar {
                    let v = if i == 0 { theta.sigma2 } else { theta.tau[i - 1] };
                    if v == 0.0 {
                        pinned[i] += 1;
                        if pinned[i] >= 3 {
                            frozen[i] = true;
                        }
                    } else {
                        pinned[i] = 0;
                    }
                }
                if done {
                    converged = true;
                    break;
                }
            }
            None => {
                // neither a damped Fisher step nor EM could improve the
                // likelihood at all: stationary at numerical resolution
                converged = true;
                break;
            }
        }
    }

    // Boundary cleanup: the likelihood is flat (to within tol) in a tau
    // whose variance contribution is negligible, so the optimum is a
    // set rather than a point; report its boundary representative.
    // Each near-zero tau is tried at exactly 0 (as is, and with its
    // trace moved into sigma^2) and the change is kept only when the
    // restricted likelihood gives up no more than tol.
    let traces: Vec<f64> = kernels.iter().map(|k| k.trace()).collect();
    let floor = state.loglik - options.tol;
    let mut order: Vec<usize> = (0..kernels.len()).filter(|&i| theta.tau[i] > 0.0).collect();
    order.sort_by(|&a, &b| {
        (theta.tau[a] * traces[a]).partial_cmp(&(theta.tau[b] * traces[b])).unwrap()
    });
    for i in order {
        let mut plain = theta.clone();
        plain.tau[i] = 0.0;
        let mut moved = plain.clone();
        moved.sigma2 += theta.tau[i] * traces[i] / n;
        let mut best: Option<(VarianceComponents, ModelState)> = None;
        for cand in [plain, moved] {
            if let Ok(s) = eval_state(&cand, y, x, kernels, false) {
                if s.loglik >= floor
                    && best.as_ref().is_none_or(|(_, b)| s.loglik > b.loglik)
                {
                    best = Some((cand, s));
                }
            }
        }
        if let Some((cand, s)) = best {
            theta = cand;
            state = s;
        }
    }

    Ok(ReMLFit {
        beta: state.beta,
        restricted_loglik: state.loglik,
        theta,
        iterations,
        converged,
        start_index,
    })
}

/// Fit the mixed model by ReML.
///
/// Multi-start: every tau starts at each grid value in turn (sigma^2
/// at the sample variance of y); the best converged fit by restricted
/// log-likelihood wins. If no start converges the best fit is returned
/// with `converged = false` so large scans can flag rather than abort;
/// an `Err` means not even one start could be evaluated.
///
/// An empty kernel list is the plain linear model, solved in closed
/// form: beta = OLS, sigma^2 = RSS/(n-q).
pub fn fit_reml(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    kernels: &[&DMatrix<f64>],
    options: &ReMLOptions,
) -> Result<ReMLFit> {
    check_shapes(y, x, kernels)?;
    if kernels.is_empty() {
        let xtx = factor_spd(&(x.transpose() * x))?;
        let beta = xtx.solve_vec(&(x.transpose() * y));
        let resid = y - x * &beta;
        let sigma2 = resid.norm_squared() / (y.len() - x.ncols()) as f64;
        let theta = VarianceComponents::new(sigma2, vec![]);
        let loglik = restricted_loglik(&theta, y, x, kernels)?;
        return Ok(ReMLFit {
            theta,
            beta,
            restricted_loglik: loglik,
            iterations: 0,
            converged: true,
            start_index: 0,
        });
    }
    let n_starts = options.starts.clamp(1, DEFAULT_START_GRID.len());
    let results: Vec<Result<ReMLFit>> = DEFAULT_START_GRID[..n_starts]
        .par_iter()
        .enumerate()
        .map(|(idx, &s)| run_start(s, idx, y, x, kernels, options))
        .collect();
    let mut best: Option<ReMLFit> = None;
    let mut first_err: Option<Error> = None;
    for r in results {
        match r {
            Ok(fit) => {
                let better = match &best {
                    None => true,
                    Some(b) => {
                        (fit.converged && !b.converged)
                            || (fit.converged == b.converged
                                && fit.restricted_loglik > b.restricted_loglik)
                    }
                };
                if better {
                    best = Some(fit);
                }
            }
            Err(e) => {
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    match best {
        Some(fit) => Ok(fit),
        None => Err(first_err.unwrap_or_else(|| Error::Numerical("no ReML start could be evaluated".into()))),
    }
}

/// BLUP random effects at a fitted theta:
/// h_i = tau_i K_i Theta^-1 (y - X beta), residual = sigma^2 Theta^-1 (y - X beta).
///
/// The identity y = X beta + sum(h_i) + residual holds exactly because
/// (sum tau_i K_i + sigma^2 I) Theta^-1 r = r.
pub fn blup_effects(
    fit: &ReMLFit,
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    kernels: &[&DMatrix<f64>],
) -> Result<BlupEffects> {
    check_shapes(y, x, kernels)?;
    if fit.theta.tau.len() != kernels.len() {
        return Err(Error::Invalid(format!(
            "fit has {} tau entries for {} kernels",
            fit.theta.tau.len(),
            kernels.len()
        )));
    }
    let state = eval_state(&fit.theta, y, x, kernels, false)?;
    let resid = y - x * &fit.beta;
    let t = state.factor.solve_vec(&resid);
    let components: Vec<DVector<f64>> = fit
        .theta
        .tau
        .iter()
        .zip(kernels)
        .map(|(tau, k)| if *tau == 0.0 { DVector::zeros(y.len()) } else { (*k * &t).scale(*tau) })
        .collect();
    let mut residual = resid.clone();
    for c in &components {
        residual -= c;
    }
    Ok(BlupEffects { components, residual })
}

/// Solve the penalized first-order block system
///
/// ```text
/// [ X'X    X'K_1          ...  X'K_k        ] [beta ]   [X'y ]
/// [ K_1 X  K_1 K_1 + l_1 K_1   K_1 K_k      ] [a_1  ] = [K_1 y]
/// [ ...                                     ] [...  ]   [... ]
/// [ K_k X  K_k K_1        ...  K_kK_k+l_kK_k] [a_k  ]   [K_k y]
/// ```
///
/// returning (beta, alpha list). With lambda_i = sigma^2 / tau_i the
/// fitted functions K_i alpha_i equal the BLUPs of [`blup_effects`].
pub fn solve_first_order_system(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    kernels: &[&DMatrix<f64>],
    lambdas: &[f64],
) -> Result<(DVector<f64>, Vec<DVector<f64>>)> {
    check_shapes(y, x, kernels)?;
    if lambdas.len() != kernels.len() {
        return Err(Error::Invalid(format!(
            "{} lambdas for {} kernels",
            lambdas.len(),
            kernels.len()
        )));
    }
    let n = y.len();
    let q = x.ncols();
    let k = kernels.len();
    let dim = q + k * n;
    let mut m = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);

    m.view_mut((0, 0), (q, q)).copy_from(&(x.transpose() * x));
    rhs.rows_mut(0, q).copy_from(&(x.transpose() * y));
    for i in 0..k {
        let row = q + i * n;
        let xtk = x.transpose() * kernels[i];
        m.view_mut((0, row), (q, n)).copy_from(&xtk);
        m.view_mut((row, 0), (n, q)).copy_from(&xtk.transpose());
        rhs.rows_mut(row, n).copy_from(&(kernels[i] * y));
        for j in 0..k {
            let col = q + j * n;
            let mut block = kernels[i] * kernels[j];
            if i == j {
                block += kernels[i].scale(lambdas[i]);
            }
            m.view_mut((row, col), (n, n)).copy_from(&block);
        }
    }
    let sol = factor_spd(&m)?.solve_vec(&rhs);
    let beta = DVector::from(sol.rows(0, q));
    let alphas: Vec<DVector<f64>> =
        (0..k).map(|i| DVector::from(sol.rows(q + i * n, n))).collect();
    Ok((beta, alphas))
}
