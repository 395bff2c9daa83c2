//! Python bindings. Structured results come back as plain dicts and lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use sapsim::harness::{Study, StudyConfig};
use sapsim::metrics::{select_estimator, MetricsReport, SelectionScheme};
use sapsim::superlearner::make_folds;
use sapsim::tmle::{tmle_ate_arrays, NuisanceConfig};
use sapsim::twostage::EffectScale;
use sapsim::{Error, SeededStream};

fn to_py_err(e: Error) -> PyErr {
    if e.is_validation() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(e.to_string())
    }
}

fn to_python<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn load(config: PathBuf, seed: Option<u64>, workers: Option<usize>, out: Option<PathBuf>) -> Result<Study, Error> {
    let mut cfg = StudyConfig::load(&config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(w) = workers {
        cfg.workers = w;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    Study::prepare(cfg)
}

#[pyfunction]
fn version() -> &'static str {
    sapsim::harness::VERSION
}

/// Checks a study config and its dataset; raises ValueError on problems.
#[pyfunction]
fn validate(config: PathBuf) -> PyResult<()> {
    load(config, None, None, None).map(|_| ()).map_err(to_py_err)
}

/// True effect of the study's data-generating process.
#[pyfunction]
fn truth<'py>(py: Python<'py>, config: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let t = py
        .detach(|| load(config, None, None, None).and_then(|s| s.truth()))
        .map_err(to_py_err)?;
    to_python(py, &t)
}

/// Runs a full study, writes its outputs and returns metrics and selection.
#[pyfunction]
#[pyo3(signature = (config, seed=None, workers=None, out=None))]
fn run_study<'py>(
    py: Python<'py>,
    config: PathBuf,
    seed: Option<u64>,
    workers: Option<usize>,
    out: Option<PathBuf>,
) -> PyResult<Bound<'py, PyAny>> {
    let res = py
        .detach(|| {
            let study = load(config, seed, workers, out)?;
            let res = study.run()?;
            res.write(&study.config.output_dir)?;
            Ok(res)
        })
        .map_err(to_py_err)?;
    let doc = serde_json::json!({
        "truth": res.manifest.truth,
        "metrics": res.metrics,
        "selection": res.selection,
        "output_dir": res.manifest.config.output_dir,
    });
    to_python(py, &doc)
}

/// Re-runs a selection scheme ("observational" or "trial") on a metrics
/// report given as a JSON string.
#[pyfunction]
#[pyo3(signature = (metrics_json, scheme="observational"))]
fn select<'py>(py: Python<'py>, metrics_json: &str, scheme: &str) -> PyResult<Bound<'py, PyAny>> {
    let report: MetricsReport = serde_json::from_str(metrics_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let scheme = match scheme {
        "observational" => SelectionScheme::observational(),
        "trial" => SelectionScheme::trial(),
        other => return Err(PyValueError::new_err(format!("unknown scheme `{other}`"))),
    };
    to_python(py, &select_estimator(&report, &scheme).map_err(to_py_err)?)
}

/// ATE by TMLE with main-terms logistic nuisances on in-memory arrays.
#[pyfunction]
#[pyo3(signature = (w, a, y, folds=5, seed=0))]
fn tmle_ate<'py>(
    py: Python<'py>,
    w: Vec<Vec<f64>>,
    a: Vec<f64>,
    y: Vec<f64>,
    folds: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let n = a.len();
    let p = w.first().map(Vec::len).unwrap_or(0);
    if w.len() != n || w.iter().any(|r| r.len() != p) {
        return Err(PyValueError::new_err("w must be an n x p list of rows matching a"));
    }
    let x = nalgebra::DMatrix::from_fn(n, p, |i, j| w[i][j]);
    let est = make_folds(n, folds, &SeededStream::new(seed, 0), None, None)
        .and_then(|plan| tmle_ate_arrays(&x, &a, &y, &NuisanceConfig::parametric(), &plan))
        .map_err(to_py_err)?;
    let doc = serde_json::json!({
        "psi": est.psi,
        "se": est.se,
        "ci": [est.ci.0, est.ci.1],
        "p_value": est.p_value,
        "ic_mean": est.ic_mean(),
    });
    to_python(py, &doc)
}

/// Renders an effect as "risk ratio=1.10, 95%CI: 1.03-1.16" (scale "ratio")
/// or "5% (95%CI: 2.75-7.25%)" (scale "difference").
#[pyfunction]
fn format_effect(scale: &str, psi: f64, lower: f64, upper: f64) -> PyResult<String> {
    let scale = match scale {
        "ratio" => EffectScale::Ratio,
        "difference" => EffectScale::Difference,
        other => return Err(PyValueError::new_err(format!("unknown scale `{other}`"))),
    };
    Ok(sapsim::harness::format_effect(scale, psi, (lower, upper)))
}

#[pymodule]
#[pyo3(name = "sapsim")]
fn sapsim_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(version, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(truth, m)?)?;
    m.add_function(wrap_pyfunction!(run_study, m)?)?;
    m.add_function(wrap_pyfunction!(select, m)?)?;
    m.add_function(wrap_pyfunction!(tmle_ate, m)?)?;
    m.add_function(wrap_pyfunction!(format_effect, m)?)?;
    Ok(())
}
