//! Python bindings for the kmdhoi library: kernel construction, the
//! variance-component mixed model, the overall and higher-order
//! interaction score tests, triplet scans over dataset manifests,
//! synthetic-data generation, and graph metrics.
//!
//! Everything crosses the boundary as plain lists, tuples, and dicts:
//! vectors are `list[float]`, matrices are row-major
//! `list[list[float]]`, and structured results are dicts keyed by
//! field name. Invalid input raises `ValueError`; numerical failures
//! raise `RuntimeError`.

// #[pyfunction] expands to a PyErr -> PyErr conversion on the return
// path, which clippy flags as useless; it is not ours to remove.
#![allow(clippy::useless_conversion)]

// Validation guards are written `!(x > 0.0)` on purpose: unlike
// `x <= 0.0`, the negated form also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

use kmdhoi::dataio::load_dataset;
use kmdhoi::kernels::{build_kernel_set, gram, GramMatrix, KernelSpec};
use kmdhoi::mixed_model::{blup_effects, fit_reml, ReMLFit, ReMLOptions};
use kmdhoi::netmetrics::{
    global_efficiency, node_degree, node_transitivity, nodal_efficiency, SimpleGraph,
};
use kmdhoi::scan::{scan_dataset, ScanRecord};
use kmdhoi::score_tests::{hoi_test, overall_test, TestResult};
use kmdhoi::simgen::{gen_replicate, SimConfig, SimMethod};
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use std::path::PathBuf;

fn err_to_py(e: kmdhoi::Error) -> PyErr {
    match &e {
        kmdhoi::Error::Invalid(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> PyResult<DMatrix<f64>> {
    if rows.is_empty() {
        return Err(PyValueError::new_err(format!("{what}: needs at least one row")));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(PyValueError::new_err(format!("{what}: rows have unequal lengths")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

fn matrices_from_py(kernels: &[Vec<Vec<f64>>]) -> PyResult<Vec<DMatrix<f64>>> {
    kernels
        .iter()
        .enumerate()
        .map(|(i, k)| matrix_from_rows(k, &format!("kernel {i}")))
        .collect()
}

fn options(tol: f64, max_iter: usize) -> PyResult<ReMLOptions> {
    if !(tol > 0.0) {
        return Err(PyValueError::new_err(format!("tol must be > 0, got {tol}")));
    }
    if max_iter == 0 {
        return Err(PyValueError::new_err("max_iter must be >= 1"));
    }
    Ok(ReMLOptions { tol, max_iter, ..Default::default() })
}

fn fit_dict<'py>(py: Python<'py>, fit: &ReMLFit) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    d.set_item("sigma2", fit.theta.sigma2)?;
    d.set_item("tau", fit.theta.tau.clone())?;
    d.set_item("beta", fit.beta.iter().copied().collect::<Vec<f64>>())?;
    d.set_item("restricted_loglik", fit.restricted_loglik)?;
    d.set_item("iterations", fit.iterations)?;
    d.set_item("converged", fit.converged)?;
    Ok(d)
}

fn test_dict<'py>(py: Python<'py>, t: &TestResult) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    d.set_item("kind", t.kind.to_string())?;
    d.set_item("statistic", t.statistic)?;
    d.set_item("gamma_hat", t.gamma_hat)?;
    d.set_item("nu_hat", t.nu_hat)?;
    d.set_item("p_value", t.p_value)?;
    d.set_item("e_s", t.e_s)?;
    d.set_item("var_s", t.var_s)?;
    d.set_item("degenerate", t.degenerate)?;
    match &t.null_fit {
        Some(f) => d.set_item("null_fit", fit_dict(py, f)?)?,
        None => d.set_item("null_fit", py.None())?,
    }
    Ok(d)
}

fn gram_list<'py>(py: Python<'py>, kernels: &[GramMatrix]) -> PyResult<Bound<'py, PyList>> {
    let out = PyList::empty_bound(py);
    for g in kernels {
        let d = PyDict::new_bound(py);
        d.set_item("label", &g.source)?;
        d.set_item("gram", matrix_to_rows(&g.values))?;
        out.append(d)?;
    }
    Ok(out)
}

fn record_dict<'py>(py: Python<'py>, r: &ScanRecord) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new_bound(py);
    d.set_item("unit1", &r.unit1)?;
    d.set_item("unit2", &r.unit2)?;
    d.set_item("unit3", &r.unit3)?;
    d.set_item("variance", r.variance.to_vec())?;
    d.set_item("p_overall", r.p_overall)?;
    d.set_item("p_hoi", r.p_hoi)?;
    d.set_item("p_hoi_bonferroni", r.p_hoi_bonferroni)?;
    d.set_item("p_hoi_bh", r.p_hoi_bh)?;
    d.set_item("baselines", r.baselines.clone())?;
    d.set_item("degenerate", r.degenerate)?;
    d.set_item("rank_deficient", r.rank_deficient)?;
    d.set_item("non_converged", r.non_converged)?;
    d.set_item("note", &r.note)?;
    Ok(d)
}

/// Gram matrix of one feature view under a kernel given as "linear",
/// "poly:c=C,d=D", "gauss", "gauss:sigma=S", or "ibs".
#[pyfunction]
fn gram_matrix(view: Vec<Vec<f64>>, kernel: &str) -> PyResult<Vec<Vec<f64>>> {
    let m = matrix_from_rows(&view, "view")?;
    let spec = KernelSpec::parse(kernel).map_err(err_to_py)?;
    let g = gram(&m, &spec).map_err(err_to_py)?;
    Ok(matrix_to_rows(&g.values))
}

/// The seven Gram matrices of the three-view model (three mains, three
/// pairwise Hadamard products, the triple product), each as a dict
/// with "label" and "gram". Kernels are one spec string per view.
#[pyfunction]
#[pyo3(signature = (view1, view2, view3, kernels, labels=None))]
fn kernel_set(
    py: Python<'_>,
    view1: Vec<Vec<f64>>,
    view2: Vec<Vec<f64>>,
    view3: Vec<Vec<f64>>,
    kernels: Vec<String>,
    labels: Option<Vec<String>>,
) -> PyResult<PyObject> {
    if kernels.len() != 3 {
        return Err(PyValueError::new_err(format!(
            "kernels needs exactly 3 spec strings, got {}",
            kernels.len()
        )));
    }
    let labels = labels.unwrap_or_else(|| vec!["view1".into(), "view2".into(), "view3".into()]);
    if labels.len() != 3 {
        return Err(PyValueError::new_err(format!(
            "labels needs exactly 3 names, got {}",
            labels.len()
        )));
    }
    let m1 = matrix_from_rows(&view1, "view1")?;
    let m2 = matrix_from_rows(&view2, "view2")?;
    let m3 = matrix_from_rows(&view3, "view3")?;
    let mut specs = Vec::with_capacity(3);
    for s in &kernels {
        specs.push(KernelSpec::parse(s).map_err(err_to_py)?);
    }
    let set = build_kernel_set(
        [&m1, &m2, &m3],
        [&specs[0], &specs[1], &specs[2]],
        [&labels[0], &labels[1], &labels[2]],
    )
    .map_err(err_to_py)?;
    Ok(gram_list(py, &set)?.into())
}

/// Restricted-maximum-likelihood fit of the variance-component model
/// y = X beta + sum_i h_i + eps with h_i ~ N(0, tau_i K_i). `x` is the
/// full design matrix including its intercept column; `kernels` is one
/// Gram matrix per component.
#[pyfunction]
#[pyo3(signature = (y, x, kernels, tol=1e-5, max_iter=50))]
fn fit_variance_components(
    py: Python<'_>,
    y: Vec<f64>,
    x: Vec<Vec<f64>>,
    kernels: Vec<Vec<Vec<f64>>>,
    tol: f64,
    max_iter: usize,
) -> PyResult<PyObject> {
    let y = DVector::from_vec(y);
    let x = matrix_from_rows(&x, "x")?;
    let kmats = matrices_from_py(&kernels)?;
    let krefs: Vec<&DMatrix<f64>> = kmats.iter().collect();
    let fit = fit_reml(&y, &x, &krefs, &options(tol, max_iter)?).map_err(err_to_py)?;
    Ok(fit_dict(py, &fit)?.into())
}

/// Score test of the global null (no kernel component contributes)
/// against the model with all supplied kernels; the null is the plain
/// linear model, so no iterative fit is involved.
#[pyfunction]
fn overall_association_test(
    py: Python<'_>,
    y: Vec<f64>,
    x: Vec<Vec<f64>>,
    kernels: Vec<Vec<Vec<f64>>>,
) -> PyResult<PyObject> {
    let y = DVector::from_vec(y);
    let x = matrix_from_rows(&x, "x")?;
    let kmats = matrices_from_py(&kernels)?;
    let krefs: Vec<&DMatrix<f64>> = kmats.iter().collect();
    let t = overall_test(&y, &x, &krefs).map_err(err_to_py)?;
    Ok(test_dict(py, &t)?.into())
}

/// Score test of the three-way interaction component against the
/// six-kernel null model (which is fitted by REML). `kernels` must be
/// the seven Gram matrices in kernel_set order, the triple product
/// last.
#[pyfunction]
#[pyo3(signature = (y, x, kernels, tol=1e-5, max_iter=50))]
fn interaction_test(
    py: Python<'_>,
    y: Vec<f64>,
    x: Vec<Vec<f64>>,
    kernels: Vec<Vec<Vec<f64>>>,
    tol: f64,
    max_iter: usize,
) -> PyResult<PyObject> {
    let y = DVector::from_vec(y);
    let x = matrix_from_rows(&x, "x")?;
    let kmats = matrices_from_py(&kernels)?;
    let krefs: Vec<&DMatrix<f64>> = kmats.iter().collect();
    let t = hoi_test(&y, &x, &krefs, &options(tol, max_iter)?).map_err(err_to_py)?;
    Ok(test_dict(py, &t)?.into())
}

/// Full-model fit plus best linear unbiased predictors of every
/// kernel component: a dict with "fit", "components" (one predicted
/// n-vector per kernel), and "residual".
#[pyfunction]
#[pyo3(signature = (y, x, kernels, tol=1e-5, max_iter=50))]
fn fitted_effects(
    py: Python<'_>,
    y: Vec<f64>,
    x: Vec<Vec<f64>>,
    kernels: Vec<Vec<Vec<f64>>>,
    tol: f64,
    max_iter: usize,
) -> PyResult<PyObject> {
    let y = DVector::from_vec(y);
    let x = matrix_from_rows(&x, "x")?;
    let kmats = matrices_from_py(&kernels)?;
    let krefs: Vec<&DMatrix<f64>> = kmats.iter().collect();
    let fit = fit_reml(&y, &x, &krefs, &options(tol, max_iter)?).map_err(err_to_py)?;
    let blup = blup_effects(&fit, &y, &x, &krefs).map_err(err_to_py)?;
    let d = PyDict::new_bound(py);
    d.set_item("fit", fit_dict(py, &fit)?)?;
    let components: Vec<Vec<f64>> =
        blup.components.iter().map(|c| c.iter().copied().collect()).collect();
    d.set_item("components", components)?;
    d.set_item("residual", blup.residual.iter().copied().collect::<Vec<f64>>())?;
    Ok(d.into())
}

/// Scan every testing-unit triplet of a dataset manifest; returns one
/// dict per triplet with variance components, test p-values,
/// multiplicity-adjusted p-values, baseline p-values, and fault flags.
/// `methods` selects baselines by name ("ppcar", "fpcar", "skat").
#[pyfunction]
#[pyo3(signature = (manifest, methods=Vec::new(), tol=1e-5, max_iter=50))]
fn scan_manifest(
    py: Python<'_>,
    manifest: PathBuf,
    methods: Vec<String>,
    tol: f64,
    max_iter: usize,
) -> PyResult<PyObject> {
    let ds = load_dataset(&manifest).map_err(err_to_py)?;
    let methods: Vec<SimMethod> = methods
        .iter()
        .map(|s| SimMethod::parse(s).map_err(err_to_py))
        .collect::<PyResult<_>>()?;
    let records = scan_dataset(&ds, &methods, &options(tol, max_iter)?).map_err(err_to_py)?;
    let out = PyList::empty_bound(py);
    for r in &records {
        out.append(record_dict(py, r)?)?;
    }
    Ok(out.into())
}

/// One synthetic three-view replicate: a dict with "y", "x" (design
/// matrix with intercept), "views" (three feature matrices), and
/// "kernels" (the seven Gram matrices as in kernel_set). `alphas` are
/// the main, pairwise, and triple effect sizes.
#[pyfunction]
#[pyo3(signature = (n, alphas, seed=0, replicate=0, sigma_noise=0.01))]
fn simulate_replicate(
    py: Python<'_>,
    n: usize,
    alphas: (f64, f64, f64),
    seed: u64,
    replicate: usize,
    sigma_noise: f64,
) -> PyResult<PyObject> {
    let config = SimConfig {
        n,
        sigma_noise,
        seed,
        replicates: replicate + 1,
        ..SimConfig::default()
    };
    config.validate().map_err(err_to_py)?;
    let rep = gen_replicate(&config, replicate, alphas).map_err(err_to_py)?;
    let d = PyDict::new_bound(py);
    d.set_item("y", rep.y.iter().copied().collect::<Vec<f64>>())?;
    d.set_item("x", matrix_to_rows(&rep.x))?;
    d.set_item("views", rep.views.iter().map(matrix_to_rows).collect::<Vec<_>>())?;
    d.set_item("kernels", gram_list(py, &rep.kernels)?)?;
    Ok(d.into())
}

/// Upper tail P(Q > x) of the chi-square distribution with (possibly
/// fractional) df degrees of freedom.
#[pyfunction]
fn chi_square_sf(x: f64, df: f64) -> PyResult<f64> {
    kmdhoi::numerics::chi_square_sf(x, df).map_err(err_to_py)
}

/// Metrics of the simple undirected graph on `labels` with the given
/// edges (pairs of node indices): per-node degree, transitivity, and
/// nodal efficiency, plus the global efficiency.
#[pyfunction]
fn graph_metrics(
    py: Python<'_>,
    labels: Vec<String>,
    edges: Vec<(usize, usize)>,
) -> PyResult<PyObject> {
    let g = SimpleGraph::with_edges(labels, &edges).map_err(err_to_py)?;
    let n = g.n_nodes();
    let d = PyDict::new_bound(py);
    d.set_item("labels", g.labels().to_vec())?;
    d.set_item("degree", (0..n).map(|v| node_degree(&g, v)).collect::<Vec<_>>())?;
    d.set_item("transitivity", (0..n).map(|v| node_transitivity(&g, v)).collect::<Vec<_>>())?;
    d.set_item(
        "nodal_efficiency",
        (0..n).map(|v| nodal_efficiency(&g, v)).collect::<Vec<_>>(),
    )?;
    d.set_item("global_efficiency", global_efficiency(&g))?;
    Ok(d.into())
}

#[pymodule]
fn kmdhoi_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(gram_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(kernel_set, m)?)?;
    m.add_function(wrap_pyfunction!(fit_variance_components, m)?)?;
    m.add_function(wrap_pyfunction!(overall_association_test, m)?)?;
    m.add_function(wrap_pyfunction!(interaction_test, m)?)?;
    m.add_function(wrap_pyfunction!(fitted_effects, m)?)?;
    m.add_function(wrap_pyfunction!(scan_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_replicate, m)?)?;
    m.add_function(wrap_pyfunction!(chi_square_sf, m)?)?;
    m.add_function(wrap_pyfunction!(graph_metrics, m)?)?;
    Ok(())
}
