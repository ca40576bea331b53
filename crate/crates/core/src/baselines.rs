//! Comparison methods: principal-component interaction regressions
//! (pPCAR and fPCAR) and a SKAT-style variance-component test on the
//! PC triple-product features.
//!
//! pPCAR keeps the raw unit columns as main effects and adds the single
//! product of first principal components, t-testing its coefficient.
//! fPCAR replaces main effects by the first principal components of
//! each unit (enough to explain a target variance fraction) and F-tests
//! the whole block of triple-product columns. The SKAT-style test
//! treats that block as random effects and score-tests its variance
//! component against the null containing covariates and PC main
//! effects.

use crate::numerics::{chi_square_sf, f_sf, factor_spd, student_t_sf};
use crate::score_tests::{satterthwaite, TestKind};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Default explained-variance target for choosing the PC count.
pub const DEFAULT_VARIANCE_TARGET: f64 = 0.85;

/// How many principal components to keep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PcaTarget {
    /// Smallest count whose cumulative explained fraction reaches the
    /// target.
    Fraction(f64),
    /// Fixed count (clamped to the number of positive-variance
    /// components).
    Fixed(usize),
}

impl Default for PcaTarget {
    fn default() -> Self {
        PcaTarget::Fraction(DEFAULT_VARIANCE_TARGET)
    }
}

/// Principal-component scores of one view slice.
#[derive(Debug, Clone)]
pub struct PcaBasis {
    /// n x l component scores (centered data projected on loadings).
    pub scores: DMatrix<f64>,
    /// Explained-variance fraction of each retained component.
    pub explained: Vec<f64>,
    /// Cumulative explained fractions (last entry ≤ 1 + 1e-12).
    pub cumulative: Vec<f64>,
}

/// Reference distribution a baseline p-value was computed from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RefDist {
    StudentT { df: f64 },
    FisherF { df1: f64, df2: f64 },
    ScaledChiSquare { gamma: f64, nu: f64 },
}

/// Outcome of one baseline test.
#[derive(Debug, Clone)]
pub struct RegressionTest {
    pub method: TestKind,
    /// Coefficient estimate for single-coefficient tests (pPCAR).
    pub estimate: Option<f64>,
    pub statistic: f64,
    pub dist: RefDist,
    pub p_value: f64,
    /// Collinear design columns were dropped by pivoted selection.
    pub rank_deficient: bool,
    /// The tested coefficient(s) were not estimable (or the variance
    /// was non-positive); p-value reported as 1.
    pub degenerate: bool,
}

/// Principal components of a centered view slice.
///
/// Scores carry the sign convention that each component's
/// largest-magnitude loading is positive, so outputs are reproducible
/// across runs and platforms.
pub fn pca(slice: &DMatrix<f64>, target: PcaTarget) -> Result<PcaBasis> {
    let n = slice.nrows();
    if n < 2 {
        return Err(Error::Invalid(format!("PCA needs n >= 2, got n={n}")));
    }
    let p = slice.ncols();
    let mut centered = slice.clone();
    for j in 0..p {
        let mean = centered.column(j).mean();
        for i in 0..n {
            centered[(i, j)] -= mean;
        }
    }
    let svd = centered.clone().svd(true, true);
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let total: f64 = svd.singular_values.iter().map(|s| s * s).sum();
    // relative to the raw scale so constant columns whose centering
    // leaves float residue still count as zero variance
    let raw_scale: f64 = slice.iter().map(|v| v * v).sum();
    if total <= 1e-24 * raw_scale || total == 0.0 {
        return Err(Error::Invalid("PCA input has zero variance".into()));
    }
    let nonzero = svd
        .singular_values
        .iter()
        .filter(|&&s| s * s > 1e-24 * total)
        .count();
    let l = match target {
        PcaTarget::Fixed(l) => l.clamp(1, nonzero),
        PcaTarget::Fraction(f) => {
            if !(0.0 < f && f <= 1.0) {
                return Err(Error::Invalid(format!(
                    "variance target must be in (0, 1], got {f}"
                )));
            }
            let mut acc = 0.0;
            let mut l = nonzero;
            for (j, s) in svd.singular_values.iter().take(nonzero).enumerate() {
                acc += s * s / total;
                if acc >= f {
                    l = j + 1;
                    break;
                }
            }
            l
        }
    };
    let mut scores = DMatrix::<f64>::zeros(n, l);
    let mut explained = Vec::with_capacity(l);
    let mut cumulative = Vec::with_capacity(l);
    let mut acc = 0.0;
    for j in 0..l {
        let s = svd.singular_values[j];
        // sign: largest-magnitude loading (row of vt) positive
        let mut sign = 1.0;
        let mut best = 0.0;
        for c in 0..p {
            let v = vt[(j, c)];
            if v.abs() > best {
                best = v.abs();
                sign = if v < 0.0 { -1.0 } else { 1.0 };
            }
        }
        for i in 0..n {
            scores[(i, j)] = sign * u[(i, j)] * s;
        }
        let frac = s * s / total;
        explained.push(frac);
        acc += frac;
        cumulative.push(acc);
    }
    Ok(PcaBasis { scores, explained, cumulative })
}

/// Greedy sequential column selection (modified Gram-Schmidt pivoting):
/// keeps a column when its residual against the already-kept columns
/// exceeds `tol_rel` times its own norm. Earlier columns win ties, so
/// the intercept and covariates are preferred over later main effects.
fn independent_columns(d: &DMatrix<f64>, tol_rel: f64) -> Vec<usize> {
    let n = d.nrows();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut kept = Vec::new();
    for j in 0..d.ncols() {
        let col = DVector::from(d.column(j));
        let orig = col.norm();
        if orig == 0.0 {
            continue;
        }
        let mut resid = col;
        for b in &basis {
            let proj = b.dot(&resid);
            resid -= b * proj;
        }
        // re-orthogonalize once for numerical safety
        for b in &basis {
            let proj = b.dot(&resid);
            resid -= b * proj;
        }
        let rn = resid.norm();
        if rn > tol_rel * orig && rn > 1e-300 * n as f64 {
            basis.push(resid / rn);
            kept.push(j);
        }
    }
    kept
}

const RANK_TOL: f64 = 1e-10;

fn select_columns(d: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(d.nrows(), idx.len(), |i, j| d[(i, idx[j])])
}

/// OLS fit: returns (beta, rss).
fn ols(y: &DVector<f64>, d: &DMatrix<f64>) -> Result<(DVector<f64>, f64, crate::numerics::SpdFactor)> {
    let fac = factor_spd(&(d.transpose() * d))?;
    let beta = fac.solve_vec(&(d.transpose() * y));
    let resid = y - d * &beta;
    Ok((beta, resid.norm_squared(), fac))
}

fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n = blocks[0].nrows();
    let p: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::<f64>::zeros(n, p);
    let mut c = 0;
    for b in blocks {
        out.view_mut((0, c), (n, b.ncols())).copy_from(*b);
        c += b.ncols();
    }
    out
}

/// Elementwise product of score columns a, b, c.
fn product_column(a: &DVector<f64>, b: &DVector<f64>, c: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(a.len(), |i, _| a[i] * b[i] * c[i])
}

/// All triple products of PC columns, (a, b, c) lexicographic.
fn product_block(p1: &DMatrix<f64>, p2: &DMatrix<f64>, p3: &DMatrix<f64>) -> DMatrix<f64> {
    let n = p1.nrows();
    let m = p1.ncols() * p2.ncols() * p3.ncols();
    let mut out = DMatrix::<f64>::zeros(n, m);
    let mut c = 0;
    for a in 0..p1.ncols() {
        for b in 0..p2.ncols() {
            for d in 0..p3.ncols() {
                for i in 0..n {
                    out[(i, c)] = p1[(i, a)] * p2[(i, b)] * p3[(i, d)];
                }
                c += 1;
            }
        }
    }
    out
}

/// The single interaction regressor of the full-PC model: one shared
/// coefficient multiplies the sum of all triple products, which
/// factors as the elementwise product of the per-view PC sums.
fn summed_product_column(p1: &DMatrix<f64>, p2: &DMatrix<f64>, p3: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_fn(p1.nrows(), |i, _| {
        p1.row(i).sum() * p2.row(i).sum() * p3.row(i).sum()
    })
}

fn degenerate(method: TestKind, dist: RefDist, rank_deficient: bool) -> RegressionTest {
    RegressionTest {
        method,
        estimate: None,
        statistic: 0.0,
        dist,
        p_value: 1.0,
        rank_deficient,
        degenerate: true,
    }
}

/// Partial PCA regression: y on [X | raw unit columns of all views |
/// U1(1)*U1(2)*U1(3)], two-sided t-test of the product coefficient.
pub fn ppcar_test(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    views: [&DMatrix<f64>; 3],
) -> Result<RegressionTest> {
    let n = y.len();
    let pcs: Vec<PcaBasis> =
        views.iter().map(|v| pca(v, PcaTarget::Fixed(1))).collect::<Result<_>>()?;
    let prod = product_column(
        &DVector::from(pcs[0].scores.column(0)),
        &DVector::from(pcs[1].scores.column(0)),
        &DVector::from(pcs[2].scores.column(0)),
    );
    let mains = hstack(&[x, views[0], views[1], views[2]]);
    let kept_mains = independent_columns(&mains, RANK_TOL);
    let rank_deficient = kept_mains.len() < mains.ncols();
    let mut d = select_columns(&mains, &kept_mains);
    let p0 = d.ncols();
    let full = hstack(&[&d, &DMatrix::from_column_slice(n, 1, prod.as_slice())]);
    let kept_full = independent_columns(&full, RANK_TOL);
    if kept_full.len() != p0 + 1 || n <= p0 + 1 {
        // the product column is collinear with the mains (or no df
        // left): the coefficient is not estimable
        return Ok(degenerate(
            TestKind::BaselinePpcar,
            RefDist::StudentT { df: (n.saturating_sub(p0 + 1)) as f64 },
            true,
        ));
    }
    d = full;
    let p = d.ncols();
    let (beta, rss, fac) = ols(y, &d)?;
    let df = (n - p) as f64;
    let sigma2 = rss / df;
    let cov_last = fac.inverse()[(p - 1, p - 1)];
    let se = (sigma2 * cov_last).sqrt();
    let eta = beta[p - 1];
    if !(se > 0.0) {
        return Ok(degenerate(TestKind::BaselinePpcar, RefDist::StudentT { df }, rank_deficient));
    }
    let t = eta / se;
    let p_value = (2.0 * student_t_sf(t.abs(), df)?).min(1.0);
    Ok(RegressionTest {
        method: TestKind::BaselinePpcar,
        estimate: Some(eta),
        statistic: t,
        dist: RefDist::StudentT { df },
        p_value,
        rank_deficient,
        degenerate: false,
    })
}

/// PC scores per view at the given target.
fn view_pcs(views: [&DMatrix<f64>; 3], target: PcaTarget) -> Result<Vec<PcaBasis>> {
    views.iter().map(|v| pca(v, target)).collect()
}

/// Full PCA regression: y on [X | PC mains | sum of all PC triple
/// products], F-test of the single shared interaction coefficient
/// against the nested mains-only model. The interaction block carries
/// one coefficient (the per-(a,b,c) products share it), so the test
/// has one numerator degree of freedom and equals the squared t-test
/// of that coefficient.
pub fn fpcar_test(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    views: [&DMatrix<f64>; 3],
    target: PcaTarget,
) -> Result<RegressionTest> {
    let n = y.len();
    let pcs = view_pcs(views, target)?;
    let interaction = summed_product_column(&pcs[0].scores, &pcs[1].scores, &pcs[2].scores);
    let mains = hstack(&[x, &pcs[0].scores, &pcs[1].scores, &pcs[2].scores]);
    let kept_mains = independent_columns(&mains, RANK_TOL);
    let mut rank_deficient = kept_mains.len() < mains.ncols();
    let d0 = select_columns(&mains, &kept_mains);
    let p0 = d0.ncols();
    let full =
        hstack(&[&d0, &DMatrix::from_column_slice(n, 1, interaction.as_slice())]);
    let kept_full = independent_columns(&full, RANK_TOL);
    rank_deficient |= kept_full.len() < full.ncols();
    let d1 = select_columns(&full, &kept_full);
    let p1 = d1.ncols();
    let m = p1 - p0;
    if m == 0 || n <= p1 {
        return Ok(degenerate(
            TestKind::BaselineFpcar,
            RefDist::FisherF { df1: m as f64, df2: n.saturating_sub(p1) as f64 },
            true,
        ));
    }
    let (_, rss0, _) = ols(y, &d0)?;
    let (_, rss1, _) = ols(y, &d1)?;
    let df1 = m as f64;
    let df2 = (n - p1) as f64;
    let num = ((rss0 - rss1) / df1).max(0.0);
    let den = rss1 / df2;
    if !(den > 0.0) {
        return Ok(degenerate(TestKind::BaselineFpcar, RefDist::FisherF { df1, df2 }, rank_deficient));
    }
    let f = num / den;
    let p_value = f_sf(f, df1, df2)?;
    Ok(RegressionTest {
        method: TestKind::BaselineFpcar,
        estimate: None,
        statistic: f,
        dist: RefDist::FisherF { df1, df2 },
        p_value,
        rank_deficient,
        degenerate: false,
    })
}

/// SKAT-style variance-component score test: the PC triple-product
/// block Z enters as random effects with kernel Z Z' against the null
/// design [X | PC mains]; Satterthwaite p-value with the
/// efficient-information variance.
pub fn skat_style_test(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    views: [&DMatrix<f64>; 3],
    target: PcaTarget,
) -> Result<RegressionTest> {
    let n = y.len();
    let pcs = view_pcs(views, target)?;
    let z = product_block(&pcs[0].scores, &pcs[1].scores, &pcs[2].scores);
    let mains = hstack(&[x, &pcs[0].scores, &pcs[1].scores, &pcs[2].scores]);
    let kept = independent_columns(&mains, RANK_TOL);
    let rank_deficient = kept.len() < mains.ncols();
    let d0 = select_columns(&mains, &kept);
    let q = d0.ncols();
    if n <= q {
        return Ok(degenerate(
            TestKind::BaselineSkat,
            RefDist::ScaledChiSquare { gamma: f64::NAN, nu: f64::NAN },
            rank_deficient,
        ));
    }
    let (beta, rss, fac0) = ols(y, &d0)?;
    let resid = y - &d0 * beta;
    let sigma02 = rss / (n - q) as f64;
    let ztr = z.transpose() * &resid;
    let statistic = if sigma02 > 0.0 { ztr.norm_squared() / (2.0 * sigma02) } else { 0.0 };
    // moments via the m x m Gram G = Z' W0 Z (W0 idempotent):
    // tr(W0 ZZ') = tr(G), tr((W0 ZZ')^2) = tr(G G)
    let dtz = d0.transpose() * &z;
    let w0z = &z - &d0 * fac0.solve_mat(&dtz);
    let g = z.transpose() * &w0z;
    let e = 0.5 * g.trace();
    let i_tt = 0.5 * crate::numerics::trace_prod(&g, &g);
    let i_ts = 0.5 * g.trace();
    let i_ss = 0.5 * (n - q) as f64;
    let var = i_tt - i_ts * i_ts / i_ss;
    if !(e > 0.0) || !(var > 0.0) {
        return Ok(degenerate(
            TestKind::BaselineSkat,
            RefDist::ScaledChiSquare { gamma: f64::NAN, nu: f64::NAN },
            rank_deficient,
        ));
    }
    let (gamma, nu) = satterthwaite(e, var)?;
    let p_value = chi_square_sf(statistic / gamma, nu)?;
    Ok(RegressionTest {
        method: TestKind::BaselineSkat,
        estimate: None,
        statistic,
        dist: RefDist::ScaledChiSquare { gamma, nu },
        p_value,
        rank_deficient,
        degenerate: false,
    })
}
