//! Construction of the seven Gram matrices: one per view, the three
//! pairwise Hadamard products, and the triple Hadamard product.
//!
//! Interaction kernels are entrywise products of main-effect kernels,
//! which stay positive semidefinite by the Schur product theorem. The
//! Gaussian kernel is exp(-||x - x'||^2 / (2 sigma^2)) with the median
//! of the nonzero pairwise distances as the default bandwidth; the IBS
//! kernel is 1 - (1/2s) * sum_b |M_ib - M_jb| on allele counts.

use crate::{Error, Result};
use nalgebra::DMatrix;

/// Which kernel to apply to a view slice.
#[derive(Debug, Clone, PartialEq)]
pub enum KernelSpec {
    Linear,
    /// (x'y + c)^d with c >= 0, d >= 1.
    Polynomial { c: f64, d: u32 },
    /// exp(-||x-y||^2 / (2 sigma^2)); `None` = median-heuristic bandwidth.
    Gaussian { bandwidth: Option<f64> },
    /// Identity-by-state similarity on 0/1/2 allele counts.
    Ibs,
}

impl KernelSpec {
    /// Parse the manifest spelling: `linear`, `poly:c=<real>,d=<int>`,
    /// `gauss`, `gauss:sigma=<real>`, `ibs`.
    pub fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "linear" {
            return Ok(KernelSpec::Linear);
        }
        if s == "gauss" {
            return Ok(KernelSpec::Gaussian { bandwidth: None });
        }
        if s == "ibs" {
            return Ok(KernelSpec::Ibs);
        }
        if let Some(rest) = s.strip_prefix("gauss:sigma=") {
            let sigma: f64 = rest
                .parse()
                .map_err(|_| Error::Invalid(format!("bad gaussian bandwidth in kernel spec '{s}'")))?;
            if !(sigma > 0.0) {
                return Err(Error::Invalid(format!("gaussian bandwidth must be > 0, got {sigma}")));
            }
            return Ok(KernelSpec::Gaussian { bandwidth: Some(sigma) });
        }
        if let Some(rest) = s.strip_prefix("poly:") {
            let mut c = None;
            let mut d = None;
            for part in rest.split(',') {
                if let Some(v) = part.strip_prefix("c=") {
                    c = Some(v.parse::<f64>().map_err(|_| {
                        Error::Invalid(format!("bad polynomial offset in kernel spec '{s}'"))
                    })?);
                } else if let Some(v) = part.strip_prefix("d=") {
                    d = Some(v.parse::<u32>().map_err(|_| {
                        Error::Invalid(format!("bad polynomial degree in kernel spec '{s}'"))
                    })?);
                } else {
                    return Err(Error::Invalid(format!("unknown component '{part}' in kernel spec '{s}'")));
                }
            }
            let (c, d) = match (c, d) {
                (Some(c), Some(d)) => (c, d),
                _ => return Err(Error::Invalid(format!("poly spec '{s}' needs both c= and d="))),
            };
            if c < 0.0 {
                return Err(Error::Invalid(format!("polynomial offset must be >= 0, got {c}")));
            }
            if d < 1 {
                return Err(Error::Invalid("polynomial degree must be >= 1".into()));
            }
            return Ok(KernelSpec::Polynomial { c, d });
        }
        Err(Error::Invalid(format!("unparseable kernel spec '{s}'")))
    }
}

impl std::str::FromStr for KernelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        KernelSpec::parse(s)
    }
}

impl std::fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            KernelSpec::Linear => write!(f, "linear"),
            KernelSpec::Polynomial { c, d } => write!(f, "poly:c={c},d={d}"),
            KernelSpec::Gaussian { bandwidth: None } => write!(f, "gauss"),
            KernelSpec::Gaussian { bandwidth: Some(s) } => write!(f, "gauss:sigma={s}"),
            KernelSpec::Ibs => write!(f, "ibs"),
        }
    }
}

/// An n x n kernel Gram matrix tagged with the view(s) it came from.
///
/// Exactly symmetric by construction (entries are mirrored, never
/// recomputed per triangle).
#[derive(Debug, Clone)]
pub struct GramMatrix {
    pub values: DMatrix<f64>,
    pub source: String,
}

impl GramMatrix {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }
}

/// Median of the n(n-1)/2 pairwise Euclidean row distances, excluding
/// exact zeros so duplicated subjects cannot collapse the bandwidth.
///
/// Errors when all rows are identical (every distance zero).
pub fn median_bandwidth(view_slice: &DMatrix<f64>) -> Result<f64> {
    let n = view_slice.nrows();
    if n < 2 {
        return Err(Error::Invalid(format!("median bandwidth needs n >= 2 rows, got {n}")));
    }
    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            let mut d2 = 0.0;
            for k in 0..view_slice.ncols() {
                let diff = view_slice[(i, k)] - view_slice[(j, k)];
                d2 += diff * diff;
            }
            let d = d2.sqrt();
            if d > 0.0 {
                dists.push(d);
            }
        }
    }
    if dists.is_empty() {
        return Err(Error::Invalid(
            "degenerate median bandwidth: all rows identical (every pairwise distance is zero)".into(),
        ));
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = dists.len();
    let median = if m % 2 == 1 { dists[m / 2] } else { 0.5 * (dists[m / 2 - 1] + dists[m / 2]) };
    Ok(median)
}

/// Kernel Gram matrix of a view slice.
///
/// Entry (i, j) is the kernel applied to rows i and j; the matrix is
/// exactly symmetric because the upper triangle is mirrored.
pub fn gram(view_slice: &DMatrix<f64>, spec: &KernelSpec) -> Result<GramMatrix> {
    let n = view_slice.nrows();
    let p = view_slice.ncols();
    if p < 1 {
        return Err(Error::Invalid("gram requires at least one column".into()));
    }
    if view_slice.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invalid("gram input contains non-finite values".into()));
    }
    let mut values = DMatrix::<f64>::zeros(n, n);
    match spec {
        KernelSpec::Linear | KernelSpec::Polynomial { .. } => {
            for i in 0..n {
                for j in i..n {
                    let mut dot = 0.0;
                    for k in 0..p {
                        dot += view_slice[(i, k)] * view_slice[(j, k)];
                    }
                    let v = match spec {
                        KernelSpec::Linear => dot,
                        KernelSpec::Polynomial { c, d } => (dot + c).powi(*d as i32),
                        _ => unreachable!(),
                    };
                    values[(i, j)] = v;
                    values[(j, i)] = v;
                }
            }
        }
        KernelSpec::Gaussian { bandwidth } => {
            let sigma = match bandwidth {
                Some(s) => {
                    if !(*s > 0.0) {
                        return Err(Error::Invalid(format!("gaussian bandwidth must be > 0, got {s}")));
                    }
                    *s
                }
                None => median_bandwidth(view_slice)?,
            };
            let denom = 2.0 * sigma * sigma;
            for i in 0..n {
                values[(i, i)] = 1.0;
                for j in (i + 1)..n {
                    let mut d2 = 0.0;
                    for k in 0..p {
                        let diff = view_slice[(i, k)] - view_slice[(j, k)];
                        d2 += diff * diff;
                    }
                    let v = (-d2 / denom).exp();
                    values[(i, j)] = v;
                    values[(j, i)] = v;
                }
            }
        }
        KernelSpec::Ibs => {
            if view_slice.iter().any(|&v| v != 0.0 && v != 1.0 && v != 2.0) {
                return Err(Error::Invalid(
                    "IBS kernel requires genotype data coded 0/1/2".into(),
                ));
            }
            let denom = 2.0 * p as f64;
            for i in 0..n {
                values[(i, i)] = 1.0;
                for j in (i + 1)..n {
                    let mut sum = 0.0;
                    for k in 0..p {
                        sum += (view_slice[(i, k)] - view_slice[(j, k)]).abs();
                    }
                    let v = 1.0 - sum / denom;
                    values[(i, j)] = v;
                    values[(j, i)] = v;
                }
            }
        }
    }
    Ok(GramMatrix { values, source: spec.to_string() })
}

/// Entrywise (Hadamard) product of two Gram matrices; PSD is preserved
/// by the Schur product theorem. Labels are concatenated with `x`.
pub fn hadamard(a: &GramMatrix, b: &GramMatrix) -> Result<GramMatrix> {
    if a.values.shape() != b.values.shape() {
        return Err(Error::Invalid(format!(
            "hadamard dimension mismatch: {:?} vs {:?}",
            a.values.shape(),
            b.values.shape()
        )));
    }
    Ok(GramMatrix {
        values: a.values.component_mul(&b.values),
        source: format!("{}x{}", a.source, b.source),
    })
}

/// The seven Gram matrices in fixed order:
/// `[K1, K2, K3, K1x2, K1x3, K2x3, K1x2x3]`.
///
/// Inputs are the three per-view slices with their kernel specs and
/// labels (labels become the `source` tags, e.g. unit names).
pub fn build_kernel_set(
    slices: [&DMatrix<f64>; 3],
    specs: [&KernelSpec; 3],
    labels: [&str; 3],
) -> Result<[GramMatrix; 7]> {
    let mut mains = Vec::with_capacity(3);
    for v in 0..3 {
        let mut g = gram(slices[v], specs[v])?;
        g.source = labels[v].to_string();
        mains.push(g);
    }
    let k12 = hadamard(&mains[0], &mains[1])?;
    let k13 = hadamard(&mains[0], &mains[2])?;
    let k23 = hadamard(&mains[1], &mains[2])?;
    let k123 = hadamard(&k12, &mains[2])?;
    let [k1, k2, k3] = <[GramMatrix; 3]>::try_from(mains).unwrap();
    Ok([k1, k2, k3, k12, k13, k23, k123])
}
