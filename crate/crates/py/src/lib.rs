//! Python bindings: reward evaluation, meta-training, adaptation, baselines
//! and the grid oracle.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use adaptsim::harness::{self, Budget, Method, Oracle};
use adaptsim::numerics::Matrix;
use adaptsim::pendulum::{matched_lqr, EnvParams, RewardMap, TaskConfig};
use adaptsim::pipeline::{self, MetaConfig};
use adaptsim::simdist::ParamSpace;
use adaptsim::sysid::SysIdConfig;

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn gain_from_rows(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    if rows.len() != 2 || rows.iter().any(|r| r.len() != 4) {
        return Err(PyValueError::new_err("gain must be 2 rows of 4 entries"));
    }
    Ok(Matrix::from_vec(2, 4, rows.into_iter().flatten().collect()))
}

fn gain_to_rows(k: &Matrix) -> Vec<Vec<f64>> {
    (0..k.rows())
        .map(|i| (0..k.cols()).map(|j| k[(i, j)]).collect())
        .collect()
}

fn env(p: [f64; 4]) -> PyResult<EnvParams> {
    let e = EnvParams::from_slice(&p);
    if !e.is_valid() {
        return Err(PyValueError::new_err(
            "masses and damping must be positive and finite",
        ));
    }
    Ok(e)
}

fn meta_config(config_toml: Option<&str>) -> PyResult<MetaConfig> {
    let cfg = match config_toml {
        Some(text) => toml::from_str::<MetaConfig>(text).map_err(value_err)?,
        None => MetaConfig::default(),
    };
    cfg.validate().map_err(value_err)?;
    Ok(cfg)
}

/// Calibrated reward model for the pendulum task.
#[pyclass(name = "RewardModel", module = "adaptsim")]
struct PyRewardModel {
    inner: adaptsim::pendulum::RewardModel,
}

#[pymethods]
impl PyRewardModel {
    #[new]
    fn new() -> Self {
        PyRewardModel {
            inner: adaptsim::pendulum::RewardModel::calibrate(TaskConfig::default()),
        }
    }

    /// The calibrated map constant.
    #[getter]
    fn constant(&self) -> f64 {
        self.inner.map.constant()
    }

    #[getter]
    fn map_kind(&self) -> &'static str {
        match self.inner.map {
            RewardMap::Relative { .. } => "relative",
            RewardMap::Absolute { .. } => "absolute",
        }
    }

    /// LQR gain (2x4 nested list) for the linearized dynamics at `params`.
    fn matched_gain(&self, params: [f64; 4]) -> PyResult<Vec<Vec<f64>>> {
        let k = matched_lqr(&env(params)?, &self.inner.config.rollout).map_err(value_err)?;
        Ok(gain_to_rows(&k))
    }

    fn reward(&self, target: [f64; 4], gain: Vec<Vec<f64>>) -> PyResult<f64> {
        let t = self.inner.target(env(target)?);
        Ok(self.inner.reward(&t, &gain_from_rows(gain)?))
    }

    fn mean_cost(&self, target: [f64; 4], gain: Vec<Vec<f64>>) -> PyResult<f64> {
        Ok(self.inner.mean_cost(&env(target)?, &gain_from_rows(gain)?))
    }
}

/// A meta-trained adaptation policy with its distribution library.
#[pyclass(name = "Checkpoint", module = "adaptsim")]
struct PyCheckpoint {
    inner: pipeline::Checkpoint,
}

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        pipeline::load_checkpoint(&path)
            .map(|inner| PyCheckpoint { inner })
            .map_err(|e| PyIOError::new_err(format!("{}: {e}", path.display())))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        pipeline::save_checkpoint(&path, &self.inner).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn library_size(&self) -> usize {
        self.inner.library.len()
    }

    /// Greedy adaptation to `target`. Returns a dict with `best_reward`,
    /// `per_iteration` and `target_rollouts`.
    #[pyo3(signature = (target, seed = 0, n_chains = None, horizon = None))]
    fn adapt<'py>(
        &self,
        py: Python<'py>,
        target: [f64; 4],
        seed: u64,
        n_chains: Option<usize>,
        horizon: Option<usize>,
    ) -> PyResult<Bound<'py, PyDict>> {
        let budget = Budget {
            n_chains: n_chains.unwrap_or(self.inner.config.n_chains),
            horizon: horizon.unwrap_or(self.inner.config.adapt_horizon),
        };
        if budget.n_chains == 0 {
            return Err(PyValueError::new_err("n_chains must be positive"));
        }
        let model = pipeline::model_from_checkpoint(&self.inner);
        let run = harness::run_adaptsim(&model, &self.inner, &env(target)?, budget, seed);
        run_dict(py, &run)
    }
}

fn run_dict<'py>(py: Python<'py>, run: &harness::MethodRun) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("best_reward", run.best)?;
    d.set_item("per_iteration", run.per_iteration.clone())?;
    d.set_item("target_rollouts", run.target_rollouts)?;
    Ok(d)
}

/// Meta-trains an adaptation policy. `config_toml` holds meta-training
/// fields; `total_steps` overrides its step budget.
#[pyfunction]
#[pyo3(signature = (seed = 0, total_steps = None, config_toml = None))]
fn meta_train(
    py: Python<'_>,
    seed: u64,
    total_steps: Option<usize>,
    config_toml: Option<&str>,
) -> PyResult<PyCheckpoint> {
    let mut cfg = meta_config(config_toml)?;
    if let Some(k) = total_steps {
        cfg.total_steps = k;
        cfg.validate().map_err(value_err)?;
    }
    let out = py.detach(|| pipeline::meta_train(&cfg, seed));
    Ok(PyCheckpoint {
        inner: out.checkpoint,
    })
}

/// System-identification baseline on the standard box.
#[pyfunction]
#[pyo3(signature = (method, target, iterations = 20, resolution = 9, sigma = 0.1))]
fn sysid<'py>(
    py: Python<'py>,
    method: &str,
    target: [f64; 4],
    iterations: usize,
    resolution: usize,
    sigma: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let m = Method::parse(method)
        .filter(|m| !matches!(m, Method::Udr | Method::AdaptSim))
        .ok_or_else(|| PyValueError::new_err(format!("not an identification method: {method}")))?;
    if resolution < 2 || !(sigma > 0.0) {
        return Err(PyValueError::new_err(
            "resolution must be at least 2 and sigma positive",
        ));
    }
    let model = adaptsim::pendulum::RewardModel::calibrate(TaskConfig::default());
    let budget = Budget {
        n_chains: 1,
        horizon: iterations,
    };
    let cfg = SysIdConfig { resolution, sigma };
    let t = env(target)?;
    let run =
        py.detach(|| harness::run_sysid(m, &model, &ParamSpace::pendulum(), &t, budget, &cfg));
    run_dict(py, &run)
}

/// Reward of the box-centroid LQR on `target`.
#[pyfunction]
fn udr_reward(target: [f64; 4]) -> PyResult<f64> {
    let model = adaptsim::pendulum::RewardModel::calibrate(TaskConfig::default());
    Ok(harness::udr_reward(
        &model,
        &ParamSpace::pendulum(),
        &env(target)?,
    ))
}

/// Best reward over a `resolution⁴` lattice of matched policies.
#[pyfunction]
#[pyo3(signature = (target, resolution = 9))]
fn oracle(py: Python<'_>, target: [f64; 4], resolution: usize) -> PyResult<f64> {
    if resolution < 2 {
        return Err(PyValueError::new_err("resolution must be at least 2"));
    }
    let model = adaptsim::pendulum::RewardModel::calibrate(TaskConfig::default());
    let t = env(target)?;
    Ok(py.detach(|| Oracle::new(None).best(&model, &ParamSpace::pendulum(), &t, resolution)))
}

#[pyfunction]
fn normalize_report(raw: f64, lower: f64, upper: f64) -> PyResult<f64> {
    harness::normalize_report(raw, lower, upper).map_err(value_err)
}

/// Named evaluation targets as `{name: [m1, m2, b1, b2]}`.
#[pyfunction]
fn standard_targets(py: Python<'_>) -> PyResult<Bound<'_, PyDict>> {
    let d = PyDict::new(py);
    for t in harness::standard_targets() {
        d.set_item(t.name, t.params.to_vec())?;
    }
    Ok(d)
}

#[pymodule]
#[pyo3(name = "adaptsim")]
pub fn adaptsim_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRewardModel>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(meta_train, m)?)?;
    m.add_function(wrap_pyfunction!(sysid, m)?)?;
    m.add_function(wrap_pyfunction!(udr_reward, m)?)?;
    m.add_function(wrap_pyfunction!(oracle, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_report, m)?)?;
    m.add_function(wrap_pyfunction!(standard_targets, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
