//! Python bindings. Structured results cross the boundary as plain dicts
//! and lists built from the same serde representation the logs use.

use std::path::PathBuf;

use nalgebra::{DMatrix, UnitQuaternion, Vector3};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use vatrack::bridge::ObservationPayload;
use vatrack::controllers::{dare_solve, DARE_DEFAULT_MAX_ITER, DARE_DEFAULT_TOL};
use vatrack::dynamics::{self as dyn_, AugmentedVehicleState, VehicleParams, VehicleState};
use vatrack::harness::{self, EpisodeConfig, Suite};
use vatrack::metrics::score_sample;
use vatrack::perception::{self, spherical};
use vatrack::reward::total_reward;
use vatrack::trajectories::{self, SinusoidRanges, Trajectory as CoreTrajectory};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn runtime_err(e: impl std::fmt::Display) -> PyErr {
    PyRuntimeError::new_err(e.to_string())
}

fn to_py<'py>(py: Python<'py>, v: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(v).map_err(runtime_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: serde::de::DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(value_err)
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::from(a)
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

/// Vehicle parameters; defaults are the nominal quadrotor.
#[pyclass(name = "VehicleParams", from_py_object)]
#[derive(Clone)]
struct PyVehicleParams(VehicleParams);

#[pymethods]
impl PyVehicleParams {
    #[new]
    #[pyo3(signature = (overrides=None))]
    fn new(overrides: Option<&Bound<'_, PyAny>>) -> PyResult<Self> {
        let p: VehicleParams = match overrides {
            None => VehicleParams::default(),
            Some(d) => {
                // Merge over the defaults so partial dicts work.
                let mut base = serde_json::to_value(VehicleParams::default()).map_err(runtime_err)?;
                let patch: serde_json::Value = from_py(d)?;
                if let (Some(b), Some(p)) = (base.as_object_mut(), patch.as_object()) {
                    for (k, v) in p {
                        b.insert(k.clone(), v.clone());
                    }
                }
                serde_json::from_value(base).map_err(value_err)?
            }
        };
        p.validate().map_err(value_err)?;
        Ok(Self(p))
    }

    fn hover_thrust(&self) -> f64 {
        self.0.hover_thrust()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0)
    }
}

/// Rigid-body state with the rate and thrust lag states.
#[pyclass(name = "State", from_py_object)]
#[derive(Clone)]
struct PyState(AugmentedVehicleState);

#[pymethods]
impl PyState {
    /// At rest at `position` with heading `yaw`, thrust balancing gravity.
    #[staticmethod]
    #[pyo3(signature = (position=[0.0; 3], yaw=0.0, params=None))]
    fn hovering(position: [f64; 3], yaw: f64, params: Option<&PyVehicleParams>) -> Self {
        let p = params.map_or_else(VehicleParams::default, |p| p.0);
        Self(AugmentedVehicleState::hovering(VehicleState::at_rest(v3(position), yaw), &p))
    }

    #[getter]
    fn position(&self) -> [f64; 3] {
        self.0.base.position.into()
    }

    #[getter]
    fn velocity(&self) -> [f64; 3] {
        self.0.base.velocity.into()
    }

    /// Attitude quaternion as `[w, x, y, z]`.
    #[getter]
    fn attitude(&self) -> [f64; 4] {
        let q = self.0.base.attitude;
        [q.w, q.i, q.j, q.k]
    }

    #[getter]
    fn omega(&self) -> [f64; 3] {
        self.0.omega.into()
    }

    #[getter]
    fn thrust(&self) -> f64 {
        self.0.thrust
    }

    /// Advance one control period under a held command. `model` is
    /// `"augmented"` or `"simple"`.
    #[pyo3(signature = (thrust, rates, dt=0.02, params=None, model="augmented"))]
    fn step(&self, thrust: f64, rates: [f64; 3], dt: f64, params: Option<&PyVehicleParams>, model: &str) -> PyResult<Self> {
        let p = params.map_or_else(VehicleParams::default, |p| p.0);
        let cmd = dyn_::Command::new(thrust, v3(rates));
        match model {
            "augmented" => dyn_::step_augmented(&self.0, &cmd, &p, dt).map(Self).map_err(value_err),
            "simple" => {
                let base = dyn_::step_simple(&self.0.base, &cmd, &p, dt).map_err(value_err)?;
                let applied = p.limits.saturate(&cmd);
                Ok(Self(AugmentedVehicleState {
                    base,
                    omega: applied.rates,
                    thrust: applied.thrust,
                }))
            }
            other => Err(PyValueError::new_err(format!("unknown model `{other}`"))),
        }
    }

    fn __repr__(&self) -> String {
        let p = self.0.base.position;
        format!("State(position=[{}, {}, {}], thrust={})", p.x, p.y, p.z, self.0.thrust)
    }
}

/// Target trajectory; evaluates to `(position, velocity, acceleration)`.
#[pyclass(name = "Trajectory", from_py_object)]
#[derive(Clone)]
struct PyTrajectory(CoreTrajectory);

#[pymethods]
impl PyTrajectory {
    /// Build from the tagged dict form used in config files.
    #[new]
    fn new(spec: &Bound<'_, PyAny>) -> PyResult<Self> {
        Ok(Self(from_py(spec)?))
    }

    /// Random three-axis sinusoid, optionally rescaled to a peak speed.
    #[staticmethod]
    #[pyo3(signature = (seed, peak_velocity=None, origin=[0.0; 3]))]
    fn random_sinusoid(seed: u64, peak_velocity: Option<f64>, origin: [f64; 3]) -> PyResult<Self> {
        let ranges = SinusoidRanges::default();
        let p = match peak_velocity {
            Some(v) => trajectories::sample_with_peak_velocity(v, &ranges, seed, v3(origin)),
            None => trajectories::sample_sinusoid(&ranges, seed, v3(origin)),
        }
        .map_err(value_err)?;
        Ok(Self(CoreTrajectory::Sinusoid(p)))
    }

    fn eval(&self, t: f64) -> ([f64; 3], [f64; 3], [f64; 3]) {
        let s = self.0.eval(t);
        (s.position.into(), s.velocity.into(), s.acceleration.into())
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0)
    }
}

/// Validated episode configuration.
#[pyclass(name = "Config", from_py_object)]
#[derive(Clone)]
struct PyConfig(EpisodeConfig);

#[pymethods]
impl PyConfig {
    /// Parse TOML text; defaults when omitted.
    #[new]
    #[pyo3(signature = (toml=None))]
    fn new(toml: Option<&str>) -> PyResult<Self> {
        match toml {
            None => Ok(Self(EpisodeConfig::default())),
            Some(t) => harness::parse_config(t).map(Self).map_err(value_err),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        harness::load_config(&path).map(Self).map_err(value_err)
    }

    #[getter]
    fn dt(&self) -> f64 {
        self.0.dt
    }

    #[getter]
    fn max_steps(&self) -> usize {
        self.0.max_steps()
    }

    fn hash(&self) -> String {
        self.0.hash()
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0)
    }
}

/// Gym-style episode: `observe()` then `step()` until `done`.
#[pyclass(name = "Environment")]
struct PyEnvironment {
    env: harness::Environment,
    log: harness::EpisodeLog,
}

#[pymethods]
impl PyEnvironment {
    #[new]
    #[pyo3(signature = (config=None, seed=0))]
    fn new(config: Option<&PyConfig>, seed: u64) -> PyResult<Self> {
        let cfg = config.map_or_else(EpisodeConfig::default, |c| c.0);
        let env = harness::Environment::new(cfg, seed).map_err(value_err)?;
        let log = harness::EpisodeLog::new(&env);
        Ok(Self { env, log })
    }

    /// Observation for the current step, filtered by the configured mode.
    fn observe<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let mode = self.env.config().observation.mode;
        let obs = self.env.observe().map_err(runtime_err)?;
        to_py(py, &ObservationPayload::from_observation(obs, mode))
    }

    /// Apply a command and return the step record as a dict.
    fn step<'py>(&mut self, py: Python<'py>, thrust: f64, rates: [f64; 3]) -> PyResult<Bound<'py, PyAny>> {
        let rec = self
            .env
            .step(&dyn_::Command::new(thrust, v3(rates)))
            .map_err(runtime_err)?;
        self.log.records.push(rec);
        if let Some(t) = self.env.termination() {
            self.log.termination = t.clone();
        }
        to_py(py, &rec)
    }

    #[getter]
    fn done(&self) -> bool {
        self.env.termination().is_some()
    }

    #[getter]
    fn step_index(&self) -> usize {
        self.env.step_index()
    }

    #[getter]
    fn termination<'py>(&self, py: Python<'py>) -> PyResult<Option<Bound<'py, PyAny>>> {
        self.env.termination().map(|t| to_py(py, t)).transpose()
    }

    /// Log of the steps taken so far.
    fn log(&self) -> PyEpisodeLog {
        PyEpisodeLog(self.log.clone())
    }
}

#[pyclass(name = "EpisodeLog")]
struct PyEpisodeLog(harness::EpisodeLog);

#[pymethods]
impl PyEpisodeLog {
    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[getter]
    fn steps(&self) -> usize {
        self.0.records.len()
    }

    #[getter]
    fn p_c(&self) -> f64 {
        self.0.p_c()
    }

    #[getter]
    fn termination<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0.termination)
    }

    fn records<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.0.records)
    }

    fn to_ndjson(&self) -> PyResult<String> {
        String::from_utf8(self.0.to_ndjson()).map_err(runtime_err)
    }

    fn to_csv(&self) -> PyResult<String> {
        let mut out = Vec::new();
        self.0.write_csv(&mut out).map_err(runtime_err)?;
        String::from_utf8(out).map_err(runtime_err)
    }
}

/// Run one episode with the configured controller.
#[pyfunction]
#[pyo3(signature = (config=None, seed=0))]
fn run_episode(py: Python<'_>, config: Option<&PyConfig>, seed: u64) -> PyResult<PyEpisodeLog> {
    let cfg = config.map_or_else(EpisodeConfig::default, |c| c.0);
    py.detach(|| harness::run_episode(&cfg, seed))
        .map(PyEpisodeLog)
        .map_err(value_err)
}

/// Run a benchmark suite given as TOML text. Returns the report dict plus
/// its `csv` and `markdown` renderings.
#[pyfunction]
#[pyo3(signature = (suite, runs=None, threads=0))]
fn run_benchmark<'py>(py: Python<'py>, suite: &str, runs: Option<usize>, threads: usize) -> PyResult<Bound<'py, PyAny>> {
    let mut suite = Suite::parse(suite).map_err(value_err)?;
    if let Some(r) = runs {
        suite.runs = r;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(runtime_err)?;
    let report = py
        .detach(|| pool.install(|| harness::run_benchmark(&suite)))
        .map_err(value_err)?;
    let out = to_py(py, &report)?;
    out.set_item("csv", report.to_csv())?;
    out.set_item("markdown", report.to_markdown())?;
    Ok(out)
}

/// Reward terms for body-frame relative position `y`, relative velocity and
/// a normalized action in `[-1, 1]^4`.
#[pyfunction]
#[pyo3(signature = (y, v_rel=[0.0; 3], action=[0.0; 4], config=None))]
fn reward<'py>(
    py: Python<'py>,
    y: [f64; 3],
    v_rel: [f64; 3],
    action: [f64; 4],
    config: Option<&PyConfig>,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.map_or_else(EpisodeConfig::default, |c| c.0);
    let t = total_reward(&v3(y), &v3(v_rel), &action, &cfg.reward).map_err(value_err)?;
    to_py(py, &t)
}

/// Spherical tracking scores of a body-frame relative position.
#[pyfunction]
#[pyo3(signature = (y, config=None))]
fn score<'py>(py: Python<'py>, y: [f64; 3], config: Option<&PyConfig>) -> PyResult<Bound<'py, PyAny>> {
    let cfg = config.map_or_else(EpisodeConfig::default, |c| c.0);
    let s = spherical(&v3(y)).map_err(value_err)?;
    to_py(py, &score_sample(&s, &cfg.score_config()))
}

/// Pinhole projection of a spherical target; `None` outside the image.
#[pyfunction]
#[pyo3(signature = (y, target_radius=0.15))]
fn project<'py>(py: Python<'py>, y: [f64; 3], target_radius: f64) -> PyResult<Option<Bound<'py, PyAny>>> {
    perception::project(&v3(y), &perception::CameraModel::default(), target_radius)
        .map(|b| to_py(py, &b))
        .transpose()
}

/// Stabilizing DARE solution; returns `(P, K, iterations)`.
#[pyfunction]
#[pyo3(signature = (a, b, q, r, tol=DARE_DEFAULT_TOL, max_iter=DARE_DEFAULT_MAX_ITER))]
fn dare(
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    q: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    tol: f64,
    max_iter: usize,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>, usize)> {
    let s = dare_solve(&matrix(a)?, &matrix(b)?, &matrix(q)?, &matrix(r)?, tol, max_iter).map_err(value_err)?;
    Ok((rows(&s.p), rows(&s.k), s.iterations))
}

/// Rotate a world-frame vector into the body frame of `attitude` (`[w, x, y, z]`).
#[pyfunction]
fn to_body(attitude: [f64; 4], v: [f64; 3]) -> [f64; 3] {
    let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(attitude[0], attitude[1], attitude[2], attitude[3]));
    (q.inverse() * v3(v)).into()
}

#[pymodule]
fn pyvatrack(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyVehicleParams>()?;
    m.add_class::<PyState>()?;
    m.add_class::<PyTrajectory>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyEnvironment>()?;
    m.add_class::<PyEpisodeLog>()?;
    m.add_function(wrap_pyfunction!(run_episode, m)?)?;
    m.add_function(wrap_pyfunction!(run_benchmark, m)?)?;
    m.add_function(wrap_pyfunction!(reward, m)?)?;
    m.add_function(wrap_pyfunction!(score, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(dare, m)?)?;
    m.add_function(wrap_pyfunction!(to_body, m)?)?;
    m.add("PROTOCOL_VERSION", vatrack::bridge::PROTOCOL_VERSION)?;
    Ok(())
}
