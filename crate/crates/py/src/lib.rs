//! Python bindings. Inputs are plain lists; results come back as JSON strings
//! with the same layout the CLI prints.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde_json::json;

use robust_cate::data::{CausalDataset, Covariates};
use robust_cate::dgp::{generate, DgpSpec};
use robust_cate::pipeline::{fit as fit_pipeline, FitConfig};
use robust_cate::tail::{auto_severity, AutoSeverityConfig};
use robust_cate::Error;

fn to_py(e: Error) -> PyErr {
    match e.root() {
        Error::Degenerate(_) | Error::Numeric(_) | Error::Stage { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn dataset(y: Vec<f64>, w: Vec<bool>, x: Vec<Vec<f64>>) -> PyResult<CausalDataset> {
    let cov = Covariates::from_rows(&x).map_err(to_py)?;
    CausalDataset::new(cov, w, y).map_err(to_py)
}

/// Fit the robust CATE model and return the summary as JSON.
///
/// `config` is an optional TOML string in the CLI's config format.
#[pyfunction]
#[pyo3(signature = (y, w, x, config=None, seed=None))]
fn fit(
    py: Python<'_>,
    y: Vec<f64>,
    w: Vec<bool>,
    x: Vec<Vec<f64>>,
    config: Option<&str>,
    seed: Option<u64>,
) -> PyResult<String> {
    let ds = dataset(y, w, x)?;
    let mut cfg: FitConfig = match config {
        Some(text) => toml::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
        None => FitConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(to_py)?;
    let res = py.detach(|| fit_pipeline(&ds, &cfg)).map_err(to_py)?;
    Ok(res.summary_json().to_string())
}

/// Synthetic dataset as a tuple `(y, w, x, tau_true)`.
#[pyfunction]
#[pyo3(signature = (kind="whale", n=1000, dim=5, density=0.0, seed=0))]
fn gen_dgp(
    kind: &str,
    n: usize,
    dim: usize,
    density: f64,
    seed: u64,
) -> PyResult<(Vec<f64>, Vec<bool>, Vec<Vec<f64>>, Vec<f64>)> {
    let mut spec = DgpSpec::new(kind.parse().map_err(to_py)?, n, density, seed);
    spec.dim = dim;
    let g = generate(&spec).map_err(to_py)?;
    let ds = g.dataset;
    let x = (0..ds.len()).map(|i| ds.x.row(i).to_vec()).collect();
    Ok((ds.y, ds.w, x, g.tau_true))
}

/// Tail index and recommended severity as JSON.
#[pyfunction]
fn diagnose(py: Python<'_>, y: Vec<f64>, w: Vec<bool>, x: Vec<Vec<f64>>) -> PyResult<String> {
    let ds = dataset(y, w, x)?;
    let a = py
        .detach(|| auto_severity(&ds, &AutoSeverityConfig::default()))
        .map_err(to_py)?;
    Ok(json!({
        "alpha_hat": a.alpha_hat,
        "severity": a.severity,
        "gross_outlier_share": a.gross_outlier_share,
        "warnings": a.warnings.iter().map(|w| w.to_string()).collect::<Vec<_>>(),
    })
    .to_string())
}

#[pymodule]
fn robust_cate_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(gen_dgp, m)?)?;
    m.add_function(wrap_pyfunction!(diagnose, m)?)?;
    Ok(())
}
