//! Python bindings: datasets, training runs, gradient flow, the crossover
//! formula, power-law fits and the experiment registry.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use conslab::data::{data_cov_spectrum, gen_gaussian_mixture};
use conslab::experiments::{self, Overrides, RunOptions};
use conslab::fitting;
use conslab::model::{init_kaiming_balanced, Activation};
use conslab::theory::{self, SpectralModel};
use conslab::training::{self, LossKind, OptimizerKind, TrainConfig};

fn to_py(e: conslab::Error) -> PyErr {
    match e {
        conslab::Error::InvalidInput(_) | conslab::Error::Unsupported(_) | conslab::Error::SizeLimit(_) => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Gaussian-mixture classification dataset.
#[pyclass(frozen)]
struct Dataset {
    inner: conslab::data::Dataset,
}

#[pymethods]
impl Dataset {
    #[new]
    #[pyo3(signature = (n=200, d=20, c=5, separation=2.0, seed=42))]
    fn new(n: usize, d: usize, c: usize, separation: f64, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: gen_gaussian_mixture(n, d, c, separation, seed).map_err(to_py)?,
        })
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[getter]
    fn d(&self) -> usize {
        self.inner.d
    }

    #[getter]
    fn c(&self) -> usize {
        self.inner.c
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.labels.clone()
    }

    /// Row-major features as a list of rows.
    fn features(&self) -> Vec<Vec<f64>> {
        let x = &self.inner.x;
        (0..x.rows()).map(|i| x.row(i).to_vec()).collect()
    }

    /// Descending eigenvalues of the uncentered covariance `XᵀX/n`.
    fn covariance_spectrum(&self) -> PyResult<Vec<f64>> {
        Ok(data_cov_spectrum(&self.inner).map_err(to_py)?.eigenvalues)
    }

    fn __repr__(&self) -> String {
        format!("Dataset(n={}, d={}, c={}, seed={})", self.inner.n, self.inner.d, self.inner.c, self.inner.seed)
    }
}

/// Per-step record of one training run or flow integration.
#[pyclass(frozen)]
struct Trace {
    inner: training::TrainTrace,
}

#[pymethods]
impl Trace {
    #[getter]
    fn loss(&self) -> Vec<f64> {
        self.inner.loss.clone()
    }

    #[getter]
    fn final_loss(&self) -> f64 {
        self.inner.final_loss
    }

    /// `C_l(θ_t)` per step, one list per step.
    #[getter]
    fn conservation(&self) -> Vec<Vec<f64>> {
        self.inner.conservation.clone()
    }

    /// Per-step imbalance `δ_l(t)`.
    #[getter]
    fn imbalance(&self) -> Vec<Vec<f64>> {
        self.inner.imbalance.clone()
    }

    #[getter]
    fn delta_c(&self) -> Vec<Vec<f64>> {
        self.inner.delta_c.clone()
    }

    #[getter]
    fn lambda_max(&self) -> Vec<(usize, f64)> {
        self.inner.lambda_max.clone()
    }

    #[getter]
    fn diverged(&self) -> bool {
        self.inner.diverged()
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    /// `|C_l(T) − C_l(0)|` per layer pair.
    fn total_drift(&self) -> Vec<f64> {
        self.inner.total_drift()
    }

    /// Time-summed imbalance `G_l` per layer pair.
    fn imbalance_sum(&self) -> PyResult<Vec<f64>> {
        conslab::conservation::imbalance_sum(&self.inner).map_err(to_py)
    }

    fn write_csv(&self, path: PathBuf) -> PyResult<()> {
        let f = std::fs::File::create(path).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        self.inner.write_csv(std::io::BufWriter::new(f)).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "Trace(steps={}, final_loss={:.4e}, diverged={})",
            self.inner.steps(),
            self.inner.final_loss,
            self.inner.diverged()
        )
    }
}

fn parse_net(activation: &str, loss: &str) -> PyResult<(Activation, LossKind)> {
    Ok((
        Activation::parse(activation).map_err(to_py)?,
        LossKind::parse(loss).map_err(to_py)?,
    ))
}

/// Full-batch training from a balanced Kaiming initialization.
#[pyfunction]
#[pyo3(signature = (data, widths, eta, steps, activation="relu", loss="mse", seed=42, optimizer="gd", bias=false, lambda_stride=None, switches=false))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    data: &Dataset,
    widths: Vec<usize>,
    eta: f64,
    steps: usize,
    activation: &str,
    loss: &str,
    seed: u64,
    optimizer: &str,
    bias: bool,
    lambda_stride: Option<usize>,
    switches: bool,
) -> PyResult<Trace> {
    let (act, loss) = parse_net(activation, loss)?;
    let mut cfg = TrainConfig::new(widths, act, loss, eta, steps, seed);
    cfg.bias = bias;
    cfg.record.lambda_stride = lambda_stride;
    cfg.record.switches = switches;
    cfg.optimizer = match optimizer.to_ascii_lowercase().as_str() {
        "gd" => OptimizerKind::Gd,
        "adam" => OptimizerKind::adam(),
        other => return Err(PyValueError::new_err(format!("unknown optimizer {other:?}"))),
    };
    let ds = &data.inner;
    let inner = py.detach(|| training::train(&cfg, ds)).map_err(to_py)?;
    Ok(Trace { inner })
}

/// RK4 gradient flow for `duration` time units.
#[pyfunction]
#[pyo3(signature = (data, widths, duration=1.0, step=1e-4, activation="relu", loss="mse", seed=42))]
fn integrate_flow(
    py: Python<'_>,
    data: &Dataset,
    widths: Vec<usize>,
    duration: f64,
    step: f64,
    activation: &str,
    loss: &str,
    seed: u64,
) -> PyResult<Trace> {
    let (act, loss) = parse_net(activation, loss)?;
    let p0 = init_kaiming_balanced(&widths, seed, false).map_err(to_py)?;
    let ds = &data.inner;
    let inner = py
        .detach(|| training::integrate_flow(&p0, ds, act, loss, duration, step))
        .map_err(to_py)?;
    Ok(Trace { inner })
}

/// Mode spectrum `(λ_k, c_k)` of the closed-form imbalance sum.
#[pyclass(frozen)]
struct Spectrum {
    inner: SpectralModel,
}

#[pymethods]
impl Spectrum {
    #[new]
    #[pyo3(signature = (lambdas, coeffs, steps=1000))]
    fn new(lambdas: Vec<f64>, coeffs: Vec<f64>, steps: usize) -> PyResult<Self> {
        Ok(Self {
            inner: SpectralModel::new(lambdas, coeffs, 1.0, steps).map_err(to_py)?,
        })
    }

    /// Predicted imbalance sum at learning rate `eta`.
    fn crossover_sum(&self, eta: f64) -> PyResult<f64> {
        Ok(theory::crossover_sum(&self.inner.with_eta(eta)).map_err(to_py)?.0)
    }

    /// `d log(η² G) / d log η` along a log-spaced grid.
    fn local_exponent(&self, etas: Vec<f64>) -> PyResult<Vec<f64>> {
        theory::local_exponent(&self.inner, &etas).map_err(to_py)
    }

    /// Crossover learning rates `1 / (λ_k T)`.
    fn crossover_rates(&self) -> Vec<f64> {
        let t = self.inner.steps as f64;
        self.inner.lambdas.iter().map(|l| 1.0 / (l * t)).collect()
    }

    #[getter]
    fn lambdas(&self) -> Vec<f64> {
        self.inner.lambdas.clone()
    }

    #[getter]
    fn coeffs(&self) -> Vec<f64> {
        self.inner.coeffs.clone()
    }
}

/// Initialization spectrum and predicted mode coefficients for a network.
#[pyfunction]
#[pyo3(signature = (data, widths, activation="relu", loss="mse", seed=42, steps=1000))]
fn predict_spectrum(
    data: &Dataset,
    widths: Vec<usize>,
    activation: &str,
    loss: &str,
    seed: u64,
    steps: usize,
) -> PyResult<Spectrum> {
    let (act, loss) = parse_net(activation, loss)?;
    let p0 = init_kaiming_balanced(&widths, seed, false).map_err(to_py)?;
    let ds = &data.inner;
    let spec = data_cov_spectrum(ds).map_err(to_py)?;
    let lams = theory::effective_spectrum(&p0, ds, act, loss).map_err(to_py)?;
    let ck = theory::predicted_ck_for(&p0, ds, act, loss, &spec).map_err(to_py)?;
    Spectrum::new(lams, ck, steps)
}

/// Least-squares `log y = slope·log x + intercept`; returns a dict.
#[pyfunction]
fn fit_power_law(py: Python<'_>, xs: Vec<f64>, ys: Vec<f64>) -> PyResult<Py<PyAny>> {
    let f = fitting::fit_power_law(&xs, &ys).map_err(to_py)?;
    let d = pyo3::types::PyDict::new(py);
    d.set_item("slope", f.slope)?;
    d.set_item("intercept", f.intercept)?;
    d.set_item("r2", f.r2)?;
    d.set_item("stderr", f.stderr)?;
    d.set_item("curvature", f.loglog_curvature)?;
    Ok(d.into_any().unbind())
}

#[pyfunction]
fn experiment_ids() -> Vec<String> {
    experiments::EXPERIMENT_IDS.iter().map(|s| s.to_string()).collect()
}

/// The resolved spec of a registered experiment, as JSON.
#[pyfunction]
fn experiment_spec(id: &str) -> PyResult<String> {
    let spec = experiments::spec_for(id).map_err(to_py)?;
    serde_json::to_string_pretty(&spec).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Runs a registered experiment and returns its results as JSON. With
/// `out_dir=None` nothing is written to disk.
#[pyfunction]
#[pyo3(signature = (id, out_dir=None, seeds=None, etas=None, widths=None, steps=None, jobs=None))]
#[allow(clippy::too_many_arguments)]
fn run_experiment(
    py: Python<'_>,
    id: &str,
    out_dir: Option<PathBuf>,
    seeds: Option<Vec<u64>>,
    etas: Option<Vec<f64>>,
    widths: Option<Vec<usize>>,
    steps: Option<usize>,
    jobs: Option<usize>,
) -> PyResult<String> {
    let mut spec = experiments::spec_for(id).map_err(to_py)?;
    Overrides {
        seeds,
        etas,
        widths,
        steps,
        ..Overrides::default()
    }
    .apply(&mut spec);
    let mut opts = RunOptions::default();
    if let Some(j) = jobs {
        opts.jobs = j.max(1);
    }
    let r = py
        .detach(|| experiments::run_spec(&spec, out_dir.as_deref(), &opts))
        .map_err(to_py)?;
    r.reproducible_json().map_err(to_py)
}

#[pymodule]
fn pyconslab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Trace>()?;
    m.add_class::<Spectrum>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(integrate_flow, m)?)?;
    m.add_function(wrap_pyfunction!(predict_spectrum, m)?)?;
    m.add_function(wrap_pyfunction!(fit_power_law, m)?)?;
    m.add_function(wrap_pyfunction!(experiment_ids, m)?)?;
    m.add_function(wrap_pyfunction!(experiment_spec, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
