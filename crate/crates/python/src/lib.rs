//! Python bindings: discretization matrices, simulation, fitting from CSV
//! files, posterior summaries and the per-subject spline baseline.

use std::path::Path;

use nalgebra::DMatrix;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;
use svr_core::cli::{fit_dataset, Baseline, RunConfig};
use svr_core::sampler::{summarize_values, ParameterSummary};
use svr_core::simulate::{self, SimTruth};
use svr_core::{spline, Dataset, ModelConfig, SvrError};

fn err(e: SvrError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn rows(m: svr_core::Result<DMatrix<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let m = m.map_err(err)?;
    Ok(m.row_iter().map(|r| r.iter().copied().collect()).collect())
}

/// Transition matrix `G(delta)` of the order-`r` integrated Wiener process.
#[pyfunction]
fn transition_matrix(r: usize, delta: f64) -> PyResult<Vec<Vec<f64>>> {
    rows(svr_core::transition_matrix(r, delta))
}

/// Unit-diffusion process noise covariance `W(delta)`.
#[pyfunction]
fn process_noise(r: usize, delta: f64) -> PyResult<Vec<Vec<f64>>> {
    rows(svr_core::process_noise(r, delta))
}

fn dataset_dict<'py>(py: Python<'py>, data: &Dataset, truth: &SimTruth) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    let subjects = data.subjects();
    d.set_item("subject_id", subjects.iter().map(|s| s.id.clone()).collect::<Vec<_>>())?;
    d.set_item("group", subjects.iter().map(|s| s.group).collect::<Vec<_>>())?;
    d.set_item("times", subjects.iter().map(|s| s.times.clone()).collect::<Vec<_>>())?;
    d.set_item("values", subjects.iter().map(|s| s.values.clone()).collect::<Vec<_>>())?;
    d.set_item("covariates", subjects.iter().map(|s| s.covariates.clone()).collect::<Vec<_>>())?;
    d.set_item("signal", truth.signal())?;
    d.set_item("sigma2_u", truth.sigma2_u.clone())?;
    d.set_item("beta", truth.beta.clone())?;
    Ok(d)
}

/// One simulated dataset as a dict of per-subject lists.
#[pyfunction]
#[pyo3(signature = (case, seed, subjects = 100))]
fn simulate_case<'py>(py: Python<'py>, case: u32, seed: u64, subjects: usize) -> PyResult<Bound<'py, PyDict>> {
    let (data, truth) = match case {
        1 => simulate::gen_case1(seed, subjects),
        2 => simulate::gen_case2(seed, subjects),
        _ => return Err(PyValueError::new_err("case must be 1 or 2")),
    }
    .map_err(err)?;
    dataset_dict(py, &data, &truth)
}

fn summary_dict<'py>(py: Python<'py>, s: &ParameterSummary) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("parameter", &s.name)?;
    d.set_item("mean", s.mean)?;
    d.set_item("mode", s.mode)?;
    d.set_item("sd", s.sd)?;
    d.set_item("hpd_lo", s.hpd_lo)?;
    d.set_item("hpd_hi", s.hpd_hi)?;
    Ok(d)
}

/// Mean, KDE mode, sd and 95% HPD interval of a sample.
#[pyfunction]
fn summarize<'py>(py: Python<'py>, values: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    summary_dict(py, &summarize_values("x", &values).map_err(err)?)
}

/// Fits the model to `observations`/`covariates` CSV files, writes the fit
/// files into `out_dir` and returns the summary table.
#[pyfunction]
#[pyo3(signature = (observations, covariates, out_dir, iters = 15000, burnin = 5000, thin = 5, seed = 1, baseline = "two-stage"))]
#[allow(clippy::too_many_arguments)]
fn fit<'py>(
    py: Python<'py>,
    observations: &str,
    covariates: &str,
    out_dir: &str,
    iters: usize,
    burnin: usize,
    thin: usize,
    seed: u64,
    baseline: &str,
) -> PyResult<Vec<Bound<'py, PyDict>>> {
    let baseline = match baseline {
        "ncs" => Baseline::Ncs,
        "two-stage" => Baseline::TwoStage,
        "none" => Baseline::None,
        other => return Err(PyValueError::new_err(format!("unknown baseline '{other}'"))),
    };
    let cfg = RunConfig {
        model: ModelConfig {
            n_iter: iters,
            burn_in: burnin,
            thin,
            seed,
            ..ModelConfig::default()
        },
        baseline,
        ..RunConfig::default()
    };
    cfg.model.validate().map_err(err)?;
    let data = svr_core::ingest(Path::new(observations), Path::new(covariates)).map_err(err)?;
    let out = Path::new(out_dir);
    std::fs::create_dir_all(out).map_err(|e| err(e.into()))?;
    let draws = py.detach(|| fit_dataset(&data, &cfg, out)).map_err(err)?;
    let table = svr_core::sampler::summarize_columns(&draws.scalar_columns()).map_err(err)?;
    table.iter().map(|s| summary_dict(py, s)).collect()
}

/// Cubic smoothing spline with GCV-chosen (or given) `lam`; returns
/// `(fitted, lam)`.
#[pyfunction]
#[pyo3(signature = (times, values, lam = None))]
fn ncs_fit(times: Vec<f64>, values: Vec<f64>, lam: Option<f64>) -> PyResult<(Vec<f64>, f64)> {
    let f = spline::ncs_fit(&times, &values, lam).map_err(err)?;
    Ok((f.fitted, f.lambda))
}

#[pyfunction]
fn empirical_volatility(values: Vec<f64>, times: Vec<f64>) -> PyResult<f64> {
    simulate::empirical_volatility(&values, &times).map_err(err)
}

/// Runs the command-line interface with `args` (without the program name).
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> PyResult<()> {
    py.detach(|| svr_core::cli::run(std::iter::once("svr".to_string()).chain(args)))
        .map_err(err)
}

#[pymodule]
fn svr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(transition_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(process_noise, m)?)?;
    m.add_function(wrap_pyfunction!(simulate_case, m)?)?;
    m.add_function(wrap_pyfunction!(summarize, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(ncs_fit, m)?)?;
    m.add_function(wrap_pyfunction!(empirical_volatility, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
