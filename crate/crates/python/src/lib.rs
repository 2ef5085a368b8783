//! Python bindings: benchmark rollouts, learned models, diagnostics and
//! training. Arrays cross the boundary as nested lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use hyperweno::benchmarks::{Benchmark, InitialCondition, StepRule, BUILTIN_IDS};
use hyperweno::networks::Model;
use hyperweno::scheme::Scheme;
use hyperweno::stepper::{self, FluxLog, RolloutRecord};
use hyperweno::training::{self, DatasetSpec, TrainConfig, TrajectoryDataset};
use hyperweno::weno;
use hyperweno::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        Error::StepDiverged { .. } | Error::NonPhysicalState(_) | Error::TrainingAborted(_) => {
            PyRuntimeError::new_err(e.to_string())
        }
        other => PyValueError::new_err(other.to_string()),
    }
}

trait IntoPy<T> {
    fn py_err(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for hyperweno::Result<T> {
    fn py_err(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// Names of the built-in benchmarks.
#[pyfunction]
fn benchmarks() -> Vec<&'static str> {
    BUILTIN_IDS.to_vec()
}

/// Hyper-CFCNN, or Hyper-CFCNN-F when built with a FluxNet kernel.
#[pyclass(name = "Model", module = "hyperweno_py", from_py_object)]
#[derive(Clone)]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (n_components, flux_kernel=None, seed=0))]
    fn new(n_components: usize, flux_kernel: Option<usize>, seed: u64) -> PyResult<Self> {
        Ok(PyModel { inner: Model::new(n_components, flux_kernel, seed).py_err()? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel { inner: Model::load(&path).py_err()?.0 })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).py_err()
    }

    #[getter]
    fn n_components(&self) -> usize {
        self.inner.n_components()
    }

    #[getter]
    fn has_flux(&self) -> bool {
        self.inner.has_flux()
    }

    /// Trainable scalars (hypernetwork plus FluxNet).
    fn n_params(&self) -> usize {
        self.inner.params.n_scalars()
    }

    /// Size of the target-network slab generated for `mesh` cells.
    fn target_param_count(&self, benchmark: &str, mesh: usize) -> PyResult<usize> {
        let b = Benchmark::resolve(benchmark).py_err()?;
        let grid = b.grid(mesh).py_err()?;
        let u0 = b.test.instantiate(&grid, &b.system).py_err()?;
        Ok(self.inner.generate(&grid, b.bc, &u0).py_err()?.n_params())
    }

    fn __repr__(&self) -> String {
        let kind = if self.inner.has_flux() { "hcfcnn-f" } else { "hcfcnn" };
        format!("Model({kind}, components={}, params={})", self.inner.n_components(), self.inner.params.n_scalars())
    }
}

/// Snapshots and boundary-flux log of one run.
#[pyclass(name = "Rollout", module = "hyperweno_py")]
struct PyRollout {
    record: RolloutRecord,
    #[pyo3(get)]
    x: Vec<f64>,
    #[pyo3(get)]
    scheme: String,
}

#[pymethods]
impl PyRollout {
    #[getter]
    fn times(&self) -> Vec<f64> {
        stepper::snapshot_times(&self.record)
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.record.dt
    }

    #[getter]
    fn dx(&self) -> f64 {
        self.record.dx
    }

    #[getter]
    fn n_steps(&self) -> usize {
        self.record.n_steps()
    }

    /// Why the run stopped early, if it did.
    #[getter]
    fn failure(&self) -> Option<String> {
        self.record.failure.as_ref().map(|f| format!("step {}: {}", f.step, f.message))
    }

    /// `[snapshot][cell][component]`.
    fn snapshots(&self) -> Vec<Vec<Vec<f64>>> {
        self.record.snapshots.iter().map(|s| rows(&s.u)).collect()
    }

    /// `[cell][component]` of the last snapshot.
    fn last(&self) -> Vec<Vec<f64>> {
        rows(&self.record.last().u)
    }

    /// Conservation remainder per snapshot. `log` is "effective" or
    /// "time-level".
    #[pyo3(signature = (component=0, log="effective", relative=false))]
    fn conservation(&self, component: usize, log: &str, relative: bool) -> PyResult<Vec<f64>> {
        let n_comp = self.record.snapshots[0].n_components();
        if component >= n_comp {
            return Err(PyValueError::new_err(format!("component {component} of {n_comp}")));
        }
        let log = match log {
            "effective" => FluxLog::Effective,
            "time-level" => FluxLog::TimeLevel,
            other => return Err(PyValueError::new_err(format!("unknown flux log {other:?}"))),
        };
        let scale = if relative { stepper::mass_scale(&self.record, component).max(f64::MIN_POSITIVE) } else { 1.0 };
        Ok(stepper::conservation_remainder(&self.record, component, log).into_iter().map(|c| c / scale).collect())
    }

    /// Writes the record as an `HWTRJ1` trajectory with its flux log.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        hyperweno::io::Trajectory::from_record(&self.record, Vec::new()).py_err()?.save(&path).py_err()
    }

    fn __repr__(&self) -> String {
        format!("Rollout({}, cells={}, steps={})", self.scheme, self.x.len(), self.record.n_steps())
    }
}

fn rows(u: &ndarray::Array2<f64>) -> Vec<Vec<f64>> {
    u.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn py_to_toml(v: &Bound<'_, PyAny>) -> PyResult<toml::Value> {
    if let Ok(s) = v.extract::<String>() {
        return Ok(toml::Value::String(s));
    }
    if let Ok(f) = v.extract::<f64>() {
        return Ok(toml::Value::Float(f));
    }
    if let Ok(list) = v.extract::<Vec<f64>>() {
        return Ok(toml::Value::Array(list.into_iter().map(toml::Value::Float).collect()));
    }
    Err(PyValueError::new_err(format!("unsupported initial-condition value {v}")))
}

/// Initial condition from a dict such as `{"family": "sine", "a": 0.0, "b": 1.0}`.
fn initial_condition(d: &Bound<'_, PyDict>) -> PyResult<InitialCondition> {
    let mut table = toml::Table::new();
    for (k, v) in d.iter() {
        table.insert(k.extract::<String>()?, py_to_toml(&v)?);
    }
    toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| PyValueError::new_err(e.to_string()))
}

fn resolve_scheme(scheme: &Bound<'_, PyAny>) -> PyResult<Scheme> {
    if let Ok(name) = scheme.extract::<String>() {
        return match name.as_str() {
            "weno5" => Ok(Scheme::classical()),
            "linear" => Ok(Scheme::Linear),
            other => Err(PyValueError::new_err(format!("unknown scheme {other:?}; pass 'weno5', 'linear' or a Model"))),
        };
    }
    let model = scheme.cast::<PyModel>().map_err(|_| PyValueError::new_err("scheme must be a name or a Model"))?;
    Ok(Scheme::Learned(model.borrow().inner.clone()))
}

/// Runs `scheme` ("weno5", "linear" or a Model) on a benchmark instance.
/// `ic` replaces the benchmark's fixed test data.
#[pyfunction]
#[pyo3(signature = (benchmark, mesh, t_final, scheme=None, dt_ratio=None, save_every=1, ic=None))]
#[allow(clippy::too_many_arguments)]
fn rollout(
    py: Python<'_>,
    benchmark: &str,
    mesh: usize,
    t_final: f64,
    scheme: Option<&Bound<'_, PyAny>>,
    dt_ratio: Option<f64>,
    save_every: usize,
    ic: Option<&Bound<'_, PyDict>>,
) -> PyResult<PyRollout> {
    let b = Benchmark::resolve(benchmark).py_err()?;
    let scheme = match scheme {
        Some(s) => resolve_scheme(s)?,
        None => Scheme::classical(),
    };
    let ic = match ic {
        Some(d) => initial_condition(d)?,
        None => b.test.clone(),
    };
    ic.validate(&b.system).py_err()?;
    let inst = b.instance(ic, t_final, StepRule::Ratio(dt_ratio.unwrap_or(b.dt_ratio)));
    let name = scheme.name().to_string();
    let (record, x) = py
        .detach(|| -> hyperweno::Result<_> {
            let (grid, u0, steps, dt) = inst.setup(mesh)?;
            let rec = scheme.rollout(&grid, inst.bc, inst.system, &u0, steps, dt, save_every)?;
            Ok((rec, grid.x_mid.to_vec()))
        })
        .py_err()?;
    Ok(PyRollout { record, x, scheme: name })
}

/// Refinement orders `0.5 log2(E_h / E_{h/2})` from MSE values.
#[pyfunction]
fn orders_from_mse(mse: Vec<f64>) -> Vec<f64> {
    stepper::orders_from_mse(&mse)
}

fn to_array(v: Vec<Vec<f64>>) -> PyResult<ndarray::Array2<f64>> {
    let n = v.len();
    let c = v.first().map_or(0, Vec::len);
    if v.iter().any(|r| r.len() != c) {
        return Err(PyValueError::new_err("ragged rows"));
    }
    ndarray::Array2::from_shape_vec((n, c), v.into_iter().flatten().collect())
        .map_err(|e| PyValueError::new_err(e.to_string()))
}

/// MSE per mesh level and orders between consecutive levels. Each field is
/// `[cell][component]`.
#[pyfunction]
fn mse_and_order(predictions: Vec<Vec<Vec<f64>>>, references: Vec<Vec<Vec<f64>>>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let p = predictions.into_iter().map(to_array).collect::<PyResult<Vec<_>>>()?;
    let r = references.into_iter().map(to_array).collect::<PyResult<Vec<_>>>()?;
    let d = stepper::mse_and_order(&p, &r).py_err()?;
    Ok((d.mse, d.orders))
}

/// Jiang-Shu weights from three smoothness indicators.
#[pyfunction]
#[pyo3(signature = (beta, epsilon=weno::DEFAULT_EPSILON, power=weno::DEFAULT_POWER))]
fn classical_weights(beta: [f64; 3], epsilon: f64, power: f64) -> [f64; 3] {
    weno::classical_weight_row(beta, weno::LINEAR_WEIGHTS, epsilon, power)
}

/// Generates and saves a desk-scale training set; returns the number of
/// redrawn instances.
#[pyfunction]
#[pyo3(signature = (benchmark, out_dir, n_traj=None, seed=0, mesh_levels=None))]
fn generate_dataset(
    py: Python<'_>,
    benchmark: &str,
    out_dir: PathBuf,
    n_traj: Option<usize>,
    seed: u64,
    mesh_levels: Option<Vec<usize>>,
) -> PyResult<usize> {
    let b = Benchmark::resolve(benchmark).py_err()?;
    let mut spec = DatasetSpec::from_benchmark(&b, seed);
    if let Some(n) = n_traj {
        spec.n_traj = n;
    }
    if let Some(l) = mesh_levels {
        spec.mesh_levels = l;
    }
    py.detach(|| {
        let ds = training::generate_dataset(&spec)?;
        ds.save(&out_dir)?;
        Ok(ds.resampled.len())
    })
    .py_err()
}

/// Trains a fresh model on a saved data set; returns the model and the
/// per-epoch loss.
#[pyfunction]
#[pyo3(signature = (benchmark, data_dir, learned_flux=false, epochs=None, lr=None, seed=0))]
fn train(
    py: Python<'_>,
    benchmark: &str,
    data_dir: PathBuf,
    learned_flux: bool,
    epochs: Option<usize>,
    lr: Option<f64>,
    seed: u64,
) -> PyResult<(PyModel, Vec<f64>)> {
    let b = Benchmark::resolve(benchmark).py_err()?;
    let mut cfg = TrainConfig { seed, ..TrainConfig::for_benchmark(&b) };
    cfg.epochs = epochs.unwrap_or(cfg.epochs);
    cfg.lr = lr.unwrap_or(cfg.lr);
    let model = Model::new(b.system.n_components(), learned_flux.then_some(b.flux_kernel), seed).py_err()?;
    let outcome = py
        .detach(|| {
            let ds = TrajectoryDataset::load(&data_dir)?;
            training::train(&cfg, &ds, model)
        })
        .py_err()?;
    let losses = outcome.history.iter().map(|s| s.loss).collect();
    Ok((PyModel { inner: outcome.model }, losses))
}

#[pymodule]
fn hyperweno_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyRollout>()?;
    m.add_function(wrap_pyfunction!(benchmarks, m)?)?;
    m.add_function(wrap_pyfunction!(rollout, m)?)?;
    m.add_function(wrap_pyfunction!(orders_from_mse, m)?)?;
    m.add_function(wrap_pyfunction!(mse_and_order, m)?)?;
    m.add_function(wrap_pyfunction!(classical_weights, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
