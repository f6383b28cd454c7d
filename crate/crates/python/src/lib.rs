//! Python bindings. The module is importable as `flosslab`:
//!
//! ```python
//! import flosslab
//! flosslab.lyapunov_spectrum("vanilla_tanh", 32, 1.0, k=4, t_sim=2000)
//! ```
//!
//! The plain Rust functions below do the work; the `#[pyfunction]`
//! wrappers only convert arguments and errors.

use flosslab::experiments::{run_seed, Params, Preset, RunContext, Value};
use flosslab::flossing::{floss, FlossingConfig};
use flosslab::lyapunov::{lyapunov_spectrum, LyapunovConfig};
use flosslab::models::init_gaussian;
use flosslab::{ArchitectureSpec, CellKind, Error};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict, PyFloat, PyInt, PyList, PyString};

fn kind(name: &str) -> flosslab::Result<CellKind> {
    CellKind::parse(name).ok_or_else(|| Error::Config(format!("unknown cell kind `{name}`")))
}

/// Lyapunov exponents of a randomly initialized network.
#[allow(clippy::too_many_arguments)]
pub fn spectrum(
    cell: &str,
    n: usize,
    gain: f64,
    k: usize,
    t_sim: usize,
    t_ons: usize,
    transient: usize,
    seed: u64,
) -> flosslab::Result<Vec<f64>> {
    let spec = ArchitectureSpec::new(kind(cell)?, n, 1);
    let params = init_gaussian(&spec, gain, seed)?;
    let cfg = LyapunovConfig::new(k, t_sim, t_ons).with_transient(transient);
    Ok(lyapunov_spectrum(&spec, &params, &cfg, seed)?.exponents)
}

/// Per-epoch flossing loss and leading exponent estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct FlossTrace {
    pub loss: Vec<f64>,
    pub exponents: Vec<Vec<f64>>,
}

/// Flosses a randomly initialized network toward `targets` (zeros when
/// empty) and returns the per-epoch record.
#[allow(clippy::too_many_arguments)]
pub fn floss_trace(
    cell: &str,
    n: usize,
    gain: f64,
    k: usize,
    epochs: usize,
    t_floss: usize,
    eta: f64,
    targets: Vec<f64>,
    seed: u64,
) -> flosslab::Result<FlossTrace> {
    let spec = ArchitectureSpec::new(kind(cell)?, n, 1);
    let params = init_gaussian(&spec, gain, seed)?;
    let mut cfg = FlossingConfig::new(k, t_floss, 1, epochs).with_eta(eta);
    if !targets.is_empty() {
        cfg = cfg.with_targets(targets);
    }
    let (_, rec) = floss(&spec, &params, &cfg, seed)?;
    Ok(FlossTrace {
        loss: rec.epochs.iter().map(|e| e.loss).collect(),
        exponents: rec.epochs.into_iter().map(|e| e.exponents).collect(),
    })
}

/// Preset defaults with `overrides` applied.
pub fn preset_params(name: &str, overrides: Vec<(String, Value)>) -> flosslab::Result<(Preset, Params)> {
    let preset = Preset::parse(name).ok_or_else(|| Error::Config(format!("unknown preset `{name}`")))?;
    let mut params = preset.defaults();
    for (k, v) in overrides {
        params.set(&k, v)?;
    }
    Ok((preset, params))
}

/// One realization of a preset, as `(table name, CSV text)` pairs.
pub fn run_preset_csv(name: &str, seed: u64, overrides: Vec<(String, Value)>) -> flosslab::Result<Vec<(String, String)>> {
    let (preset, params) = preset_params(name, overrides)?;
    let tables = run_seed(preset, &params, seed, &RunContext::default())?;
    Ok(tables.into_iter().map(|(n, t)| (n, t.to_csv_string())).collect())
}

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Dimension(_) | Error::Unsupported(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_value(key: &str, v: &Bound<'_, PyAny>) -> PyResult<Value> {
    let bad = || PyValueError::new_err(format!("override `{key}`: unsupported value type"));
    if v.is_instance_of::<PyBool>() {
        return Ok(Value::Bool(v.extract()?));
    }
    if v.is_instance_of::<PyInt>() {
        return Ok(Value::Int(v.extract()?));
    }
    if v.is_instance_of::<PyFloat>() {
        return Ok(Value::Float(v.extract()?));
    }
    if v.is_instance_of::<PyString>() {
        return Ok(Value::Text(v.extract()?));
    }
    if v.is_instance_of::<PyList>() {
        let items: Vec<Bound<'_, PyAny>> = v.extract()?;
        if items.iter().all(|x| x.is_instance_of::<PyInt>() && !x.is_instance_of::<PyBool>()) {
            return Ok(Value::IntList(v.extract()?));
        }
        if items.iter().all(|x| x.is_instance_of::<PyInt>() || x.is_instance_of::<PyFloat>()) {
            return Ok(Value::FloatList(v.extract()?));
        }
        if items.iter().all(|x| x.is_instance_of::<PyString>()) {
            return Ok(Value::TextList(v.extract()?));
        }
    }
    Err(bad())
}

fn overrides_from(dict: Option<&Bound<'_, PyDict>>) -> PyResult<Vec<(String, Value)>> {
    let mut out = Vec::new();
    if let Some(d) = dict {
        for (k, v) in d.iter() {
            let key: String = k.extract()?;
            out.push((key.clone(), to_value(&key, &v)?));
        }
    }
    Ok(out)
}

/// Names of the available presets.
#[pyfunction]
fn presets() -> Vec<&'static str> {
    Preset::ALL.iter().map(|p| p.name()).collect()
}

/// Default parameters of a preset, values rendered as text.
#[pyfunction]
fn preset_defaults(name: &str) -> PyResult<Vec<(String, String)>> {
    let (_, p) = preset_params(name, Vec::new()).map_err(py_err)?;
    Ok(p.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect())
}

#[pyfunction(name = "lyapunov_spectrum")]
#[pyo3(signature = (cell, n, gain, k, t_sim, t_ons = 1, transient = 500, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn py_lyapunov_spectrum(
    py: Python<'_>,
    cell: &str,
    n: usize,
    gain: f64,
    k: usize,
    t_sim: usize,
    t_ons: usize,
    transient: usize,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let cell = cell.to_string();
    py.detach(move || spectrum(&cell, n, gain, k, t_sim, t_ons, transient, seed))
        .map_err(py_err)
}

/// Returns `(losses, exponents)` per flossing epoch.
#[pyfunction(name = "floss")]
#[pyo3(signature = (cell, n, gain, k, epochs, t_floss = 100, eta = 1e-3, targets = None, seed = 0))]
#[allow(clippy::too_many_arguments)]
fn py_floss(
    py: Python<'_>,
    cell: &str,
    n: usize,
    gain: f64,
    k: usize,
    epochs: usize,
    t_floss: usize,
    eta: f64,
    targets: Option<Vec<f64>>,
    seed: u64,
) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let cell = cell.to_string();
    let trace = py
        .detach(move || floss_trace(&cell, n, gain, k, epochs, t_floss, eta, targets.unwrap_or_default(), seed))
        .map_err(py_err)?;
    Ok((trace.loss, trace.exponents))
}

/// Runs one seed of a preset; returns `{table name: CSV text}`.
#[pyfunction(name = "run_preset")]
#[pyo3(signature = (name, seed = 0, overrides = None))]
fn py_run_preset<'py>(py: Python<'py>, name: &str, seed: u64, overrides: Option<&Bound<'py, PyDict>>) -> PyResult<Bound<'py, PyDict>> {
    let ov = overrides_from(overrides)?;
    let name = name.to_string();
    let tables = py.detach(move || run_preset_csv(&name, seed, ov)).map_err(py_err)?;
    let out = PyDict::new(py);
    for (k, v) in tables {
        out.set_item(k, v)?;
    }
    Ok(out)
}

#[pymodule]
#[pyo3(name = "flosslab")]
fn flosslab_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    m.add_function(wrap_pyfunction!(preset_defaults, m)?)?;
    m.add_function(wrap_pyfunction!(py_lyapunov_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(py_floss, m)?)?;
    m.add_function(wrap_pyfunction!(py_run_preset, m)?)?;
    Ok(())
}
