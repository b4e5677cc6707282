use std::path::PathBuf;

use num_complex::Complex64;
use pyo3::exceptions::{PyKeyError, PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use cptlock::control::{pi_gains, LoopConfig};
use cptlock::device::{coupling_coefficient, resonant_frequency, BiasAxis, BiasPoint, CavityParams, Parity};
use cptlock::error::Error;
use cptlock::noise::power_law_noise;
use cptlock::rf::reflection_coefficient;
use cptlock::scenario::{self, DirResolver, Format, ScenarioConfig, ScenarioResult};
use cptlock::series::TimeSeries;
use cptlock::spectral::{fit_powerlaw_plus_lorentzian, welch_psd, Corner, PsdEstimate, Window};

const TAU: f64 = std::f64::consts::TAU;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Domain(_) => PyValueError::new_err(e.to_string()),
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_to_py<'py>(py: Python<'py>, v: &serde_json::Value) -> PyResult<Bound<'py, PyAny>> {
    use serde_json::Value;
    Ok(match v {
        Value::Null => py.None().into_bound(py),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any(),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_pyobject(py)?.into_any(),
            None => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any(),
        Value::Array(a) => {
            let list = PyList::empty(py);
            for x in a {
                list.append(json_to_py(py, x)?)?;
            }
            list.into_any()
        }
        Value::Object(m) => {
            let d = PyDict::new(py);
            for (k, x) in m {
                d.set_item(k, json_to_py(py, x)?)?;
            }
            d.into_any()
        }
    })
}

/// A scenario definition.
#[pyclass(name = "Scenario", module = "pycptlock", skip_from_py_object)]
#[derive(Clone)]
struct PyScenario {
    cfg: ScenarioConfig,
}

#[pymethods]
impl PyScenario {
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        Ok(PyScenario { cfg: scenario::preset(name).map_err(py_err)? })
    }

    #[staticmethod]
    fn from_file(path: PathBuf) -> PyResult<Self> {
        Ok(PyScenario { cfg: ScenarioConfig::from_file(&path).map_err(py_err)? })
    }

    /// Parse TOML text; includes resolve against `include_dir`, or the
    /// built-in files when it is omitted.
    #[staticmethod]
    #[pyo3(signature = (text, include_dir=None))]
    fn from_toml(text: &str, include_dir: Option<PathBuf>) -> PyResult<Self> {
        let cfg = match include_dir {
            Some(dir) => ScenarioConfig::from_toml(text, &DirResolver(&dir)),
            None => ScenarioConfig::from_toml(text, &scenario::EmbeddedResolver),
        };
        Ok(PyScenario { cfg: cfg.map_err(py_err)? })
    }

    #[getter]
    fn name(&self) -> String {
        self.cfg.name.clone()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.cfg.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.cfg.seed = seed;
    }

    #[getter]
    fn duration(&self) -> f64 {
        self.cfg.duration
    }

    fn config_hash(&self) -> String {
        self.cfg.hash()
    }

    fn to_toml(&self) -> String {
        self.cfg.to_toml()
    }

    /// Runs the scenario with the GIL released.
    fn run(&self, py: Python<'_>) -> PyResult<PyResult_> {
        let cfg = self.cfg.clone();
        let r = py.detach(move || scenario::run_scenario(&cfg)).map_err(py_err)?;
        Ok(PyResult_ { inner: r })
    }

    fn __repr__(&self) -> String {
        format!("Scenario(name={:?}, seed={}, hash={})", self.cfg.name, self.cfg.seed, self.cfg.hash())
    }
}

/// Output of one scenario run.
#[pyclass(name = "ScenarioResult", module = "pycptlock")]
struct PyResult_ {
    inner: ScenarioResult,
}

#[pymethods]
impl PyResult_ {
    #[getter]
    fn lost_lock(&self) -> bool {
        self.inner.lost_lock
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.config_hash.clone()
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }

    /// Scalar metrics as a dict.
    fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let d = PyDict::new(py);
        for (k, v) in &self.inner.summary {
            d.set_item(k, json_to_py(py, v)?)?;
        }
        Ok(d)
    }

    fn metric(&self, key: &str) -> Option<f64> {
        self.inner.metric(key)
    }

    fn trajectory_names(&self) -> Vec<String> {
        self.inner.trajectories.keys().cloned().collect()
    }

    fn psd_names(&self) -> Vec<String> {
        self.inner.psds.keys().cloned().collect()
    }

    fn table_names(&self) -> Vec<String> {
        self.inner.tables.keys().cloned().collect()
    }

    /// (fs, samples)
    fn trajectory(&self, name: &str) -> PyResult<(f64, Vec<f64>)> {
        let s = self
            .inner
            .trajectories
            .get(name)
            .ok_or_else(|| PyKeyError::new_err(name.to_string()))?;
        Ok((s.fs, s.samples.clone()))
    }

    /// (freqs, values)
    fn psd(&self, name: &str) -> PyResult<(Vec<f64>, Vec<f64>)> {
        let p = self.inner.psds.get(name).ok_or_else(|| PyKeyError::new_err(name.to_string()))?;
        Ok((p.freqs.clone(), p.values.clone()))
    }

    /// (columns, rows)
    fn table(&self, name: &str) -> PyResult<(Vec<String>, Vec<Vec<f64>>)> {
        let t = self.inner.tables.get(name).ok_or_else(|| PyKeyError::new_err(name.to_string()))?;
        Ok((t.columns.clone(), t.rows.clone()))
    }

    /// Writes the artifacts; returns the paths written.
    #[pyo3(signature = (dir, format="csv"))]
    fn write(&self, dir: PathBuf, format: &str) -> PyResult<Vec<String>> {
        let format: Format = format.parse().map_err(py_err)?;
        let paths = scenario::write_outputs(&self.inner, &dir, format).map_err(py_err)?;
        Ok(paths.into_iter().map(|p| p.display().to_string()).collect())
    }
}

/// Calibrated cavity taken from a scenario's device block.
#[pyclass(name = "Device", module = "pycptlock")]
struct PyDevice {
    cav: CavityParams,
}

fn parity(s: &str) -> PyResult<Parity> {
    match s {
        "even" => Ok(Parity::Even),
        "odd" => Ok(Parity::Odd),
        _ => Err(PyValueError::new_err("parity must be 'even' or 'odd'")),
    }
}

#[pymethods]
impl PyDevice {
    #[new]
    #[pyo3(signature = (scenario=None))]
    fn new(scenario: Option<&PyScenario>) -> PyResult<Self> {
        let cfg = match scenario {
            Some(s) => s.cfg.clone(),
            None => scenario::preset("fig3b_response").map_err(py_err)?,
        };
        Ok(PyDevice { cav: cfg.device.cavity().map_err(py_err)? })
    }

    #[getter]
    fn kappa_tot_hz(&self) -> f64 {
        self.cav.kappa_tot() / TAU
    }

    #[getter]
    fn kerr_hz(&self) -> f64 {
        self.cav.kerr_k / TAU
    }

    #[pyo3(signature = (ng, phi=0.0, parity="even"))]
    fn resonant_frequency_hz(&self, ng: f64, phi: f64, parity: &str) -> PyResult<f64> {
        let p = self::parity(parity)?;
        Ok(resonant_frequency(BiasPoint::new(ng, phi), &self.cav, p).map_err(py_err)? / TAU)
    }

    /// d f0 / d bias in Hz per unit bias; axis is "gate" or "flux".
    #[pyo3(signature = (ng, phi=0.0, axis="gate"))]
    fn coupling_hz(&self, ng: f64, phi: f64, axis: &str) -> PyResult<f64> {
        let axis = match axis {
            "gate" => BiasAxis::Gate,
            "flux" => BiasAxis::Flux,
            _ => return Err(PyValueError::new_err("axis must be 'gate' or 'flux'")),
        };
        Ok(coupling_coefficient(BiasPoint::new(ng, phi), &self.cav, axis).map_err(py_err)? / TAU)
    }

    /// Reflection of sideband k for resonance offset `delta_hz`.
    #[pyo3(signature = (k, delta_hz, f_mod_hz=30e6))]
    fn reflection(&self, k: i32, delta_hz: f64, f_mod_hz: f64) -> Complex64 {
        reflection_coefficient(k, TAU * delta_hz, &self.cav, TAU * f_mod_hz)
    }
}

#[pyfunction]
fn preset_names() -> Vec<&'static str> {
    scenario::preset_names()
}

/// Seeded power-law record with PSD amp * f^-exponent.
#[pyfunction]
#[pyo3(signature = (amp, exponent, fs, n, seed=0))]
fn power_law(amp: f64, exponent: f64, fs: f64, n: usize, seed: u64) -> PyResult<Vec<f64>> {
    Ok(power_law_noise(amp, exponent, fs, n, seed).map_err(py_err)?.samples)
}

/// Hann-windowed Welch estimate; returns (freqs, values).
#[pyfunction]
#[pyo3(signature = (samples, fs, segment=16384, overlap=0.5))]
fn welch(samples: Vec<f64>, fs: f64, segment: usize, overlap: f64) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let s = TimeSeries::new(samples, fs, "").map_err(py_err)?;
    let p = welch_psd(&s, segment, overlap, Window::Hann).map_err(py_err)?;
    Ok((p.freqs, p.values))
}

/// Power law plus Lorentzian fit over [lo, hi] Hz.
#[pyfunction]
fn fit_noise<'py>(py: Python<'py>, freqs: Vec<f64>, values: Vec<f64>, lo: f64, hi: f64) -> PyResult<Bound<'py, PyDict>> {
    let psd = PsdEstimate::from_values(freqs, values, "").map_err(py_err)?;
    let fit = match fit_powerlaw_plus_lorentzian(&psd, (lo, hi)) {
        Ok(f) => f,
        Err(Error::FitNonConvergent { best, .. }) => *best,
        Err(e) => return Err(py_err(e)),
    };
    let d = PyDict::new(py);
    d.set_item("amp_at_1hz", fit.amp_at_1hz)?;
    d.set_item("exponent", fit.exponent)?;
    d.set_item("plateau", fit.plateau)?;
    d.set_item(
        "corner_hz",
        match fit.corner {
            Corner::Resolved(f) => Some(f),
            Corner::Unresolved => None,
        },
    )?;
    d.set_item("residual_db", fit.residual_db)?;
    Ok(d)
}

/// (kp, ki) of the loop-shaping PI law.
#[pyfunction]
fn pi_gains_for(omega_prime: f64, omega_lpf: f64, g0: f64) -> PyResult<(f64, f64)> {
    let cfg = LoopConfig::new(omega_prime, omega_lpf, g0, 1e-5);
    pi_gains(&cfg).map_err(py_err)
}

#[pymodule]
fn pycptlock(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyScenario>()?;
    m.add_class::<PyResult_>()?;
    m.add_class::<PyDevice>()?;
    m.add_function(wrap_pyfunction!(preset_names, m)?)?;
    m.add_function(wrap_pyfunction!(power_law, m)?)?;
    m.add_function(wrap_pyfunction!(welch, m)?)?;
    m.add_function(wrap_pyfunction!(fit_noise, m)?)?;
    m.add_function(wrap_pyfunction!(pi_gains_for, m)?)?;
    Ok(())
}
