//! Python bindings for `bridgeflow`.
//!
//! Matrices and point clouds cross the boundary as lists of rows.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use bridgeflow::bridge::{bridge_gain, EndpointPair};
use bridgeflow::commands::{self, RunContext};
use bridgeflow::distributions::{GaussianComponent, GaussianMixture as CoreMixture};
use bridgeflow::linalg::{matrix_from_rows, matrix_to_rows, Matrix, PsdMatrix, Vector};
use bridgeflow::metrics::{self, Grid2, MmdConfig, W2Config};
use bridgeflow::mixture_law::MixtureLawContext;
use bridgeflow::mlp::MlpParams;
use bridgeflow::rng;
use bridgeflow::rollout::{rollout, FlowField, RolloutOptions, TrajectoryBatch};
use bridgeflow::samples::SampleSet;
use bridgeflow::systems::{self, BridgeKernel as CoreKernel, LinearSystem as CoreSystem};
use bridgeflow::trainer::{self, TrainConfig, TrainingSet};
use bridgeflow::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::NonFinite(_) | Error::Diverged { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

type Rows = Vec<Vec<f64>>;

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<Matrix> {
    matrix_from_rows(&rows).map_err(py_err)
}

fn samples(rows: Vec<Vec<f64>>) -> PyResult<SampleSet> {
    SampleSet::from_rows(&rows).map_err(py_err)
}

#[pyclass(frozen, skip_from_py_object, module = "bridgeflow_py")]
#[derive(Clone)]
struct LinearSystem {
    inner: CoreSystem,
}

#[pymethods]
impl LinearSystem {
    #[new]
    #[pyo3(signature = (a, b, epsilon=1.0, name="custom"))]
    fn new(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, epsilon: f64, name: &str) -> PyResult<Self> {
        let inner = CoreSystem::new(name, matrix(a)?, matrix(b)?, epsilon).map_err(py_err)?;
        Ok(LinearSystem { inner })
    }

    /// One of the catalog systems, e.g. `"double_integrator"` or `"mass_spring(4)"`.
    #[staticmethod]
    #[pyo3(signature = (name, epsilon=None))]
    fn builtin(name: &str, epsilon: Option<f64>) -> PyResult<Self> {
        let mut inner = systems::builtin_system(name).map_err(py_err)?;
        if let Some(e) = epsilon {
            inner = inner.with_epsilon(e).map_err(py_err)?;
        }
        Ok(LinearSystem { inner })
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn a(&self) -> Vec<Vec<f64>> {
        matrix_to_rows(&self.inner.a)
    }

    #[getter]
    fn b(&self) -> Vec<Vec<f64>> {
        matrix_to_rows(&self.inner.b)
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.epsilon
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n()
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m()
    }

    fn is_controllable(&self) -> PyResult<bool> {
        Ok(systems::is_controllable(&self.inner.a, &self.inner.b).map_err(py_err)?.controllable)
    }

    fn gramian(&self, t: f64) -> PyResult<Vec<Vec<f64>>> {
        let g = bridgeflow::linalg::gramian(&self.inner.a, &self.inner.b, t).map_err(py_err)?;
        Ok(matrix_to_rows(g.as_matrix()))
    }

    fn __repr__(&self) -> String {
        format!("LinearSystem({:?}, n={}, m={}, epsilon={})", self.inner.name, self.inner.n(), self.inner.m(), self.inner.epsilon)
    }
}

#[pyclass(frozen, module = "bridgeflow_py")]
struct BridgeKernel {
    inner: Arc<CoreKernel>,
}

#[pymethods]
impl BridgeKernel {
    #[new]
    #[pyo3(signature = (system, grid_size=systems::DEFAULT_GRID_SIZE, delta=systems::DEFAULT_DELTA))]
    fn new(py: Python<'_>, system: &LinearSystem, grid_size: usize, delta: f64) -> PyResult<Self> {
        let sys = system.inner.clone();
        let inner = py.detach(|| CoreKernel::new(sys, grid_size, delta)).map_err(py_err)?;
        Ok(BridgeKernel { inner: Arc::new(inner) })
    }

    #[getter]
    fn system(&self) -> LinearSystem {
        LinearSystem {
            inner: self.inner.system().clone(),
        }
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.inner.delta()
    }

    /// Marginal coefficients at `t`: mean `R x + S y`, covariance `ε² Σ`.
    fn coefficients(&self, t: f64) -> PyResult<(Rows, Rows, Rows)> {
        let node = self.inner.node(t).map_err(py_err)?;
        Ok((matrix_to_rows(&node.r), matrix_to_rows(&node.s), matrix_to_rows(node.sigma.as_matrix())))
    }

    fn gain(&self, t: f64) -> PyResult<Vec<Vec<f64>>> {
        Ok(matrix_to_rows(self.inner.gain(t).map_err(py_err)?.as_ref()))
    }

    /// Bridge feedback steering `xi` at time `t` towards `y`.
    fn feedback(&self, t: f64, xi: Vec<f64>, y: Vec<f64>) -> PyResult<Vec<f64>> {
        let u = bridge_gain(&self.inner, t, &Vector::from_vec(xi), &Vector::from_vec(y)).map_err(py_err)?;
        Ok(u.iter().copied().collect())
    }

    /// Simulates bridges from each `initial` row to the matching `targets` row
    /// (or to a single shared target).
    #[pyo3(signature = (initial, targets, dt=1e-3, seed=0, stride=1))]
    fn bridges(&self, py: Python<'_>, initial: Vec<Vec<f64>>, targets: Vec<Vec<f64>>, dt: f64, seed: u64, stride: usize) -> PyResult<Trajectories> {
        let law = FlowField::PointBridge(samples(targets)?);
        simulate(py, &self.inner, law, initial, dt, seed, stride)
    }
}

#[pyclass(frozen, skip_from_py_object, module = "bridgeflow_py")]
#[derive(Clone)]
struct GaussianMixture {
    inner: CoreMixture,
}

#[pymethods]
impl GaussianMixture {
    #[new]
    fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, covs: Vec<Vec<Vec<f64>>>) -> PyResult<Self> {
        if weights.len() != means.len() || weights.len() != covs.len() {
            return Err(PyValueError::new_err("weights, means and covs must have the same length"));
        }
        let comps = weights
            .into_iter()
            .zip(means)
            .zip(covs)
            .map(|((w, m), c)| {
                let cov = PsdMatrix::new(matrix(c)?).map_err(py_err)?;
                GaussianComponent::new(w, Vector::from_vec(m), cov).map_err(py_err)
            })
            .collect::<PyResult<Vec<_>>>()?;
        Ok(GaussianMixture {
            inner: CoreMixture::new(comps).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn gaussian(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> PyResult<Self> {
        Self::new(vec![1.0], vec![mean], vec![cov])
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    fn sample(&self, count: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let d = bridgeflow::distributions::Distribution::Mixture(self.inner.clone());
        Ok(d.sample(count, &mut rng::stream(seed, 0)).map_err(py_err)?.to_rows())
    }

    fn log_density(&self, x: Vec<f64>) -> PyResult<f64> {
        bridgeflow::distributions::log_density(&self.inner, &Vector::from_vec(x)).map_err(py_err)
    }
}

/// Recorded states of a simulation, indexed `[time][path][component]`.
#[pyclass(frozen, module = "bridgeflow_py")]
struct Trajectories {
    inner: TrajectoryBatch,
}

#[pymethods]
impl Trajectories {
    #[getter]
    fn times(&self) -> Vec<f64> {
        self.inner.times.clone()
    }

    #[getter]
    fn paths(&self) -> usize {
        self.inner.paths
    }

    fn at(&self, k: usize) -> PyResult<Vec<Vec<f64>>> {
        if k >= self.inner.times.len() {
            return Err(PyValueError::new_err(format!("time index {k} out of range")));
        }
        Ok(self.inner.samples_at(k).to_rows())
    }

    fn terminal(&self) -> Vec<Vec<f64>> {
        self.inner.terminal().to_rows()
    }

    fn path(&self, p: usize) -> PyResult<Vec<Vec<f64>>> {
        if p >= self.inner.paths {
            return Err(PyValueError::new_err(format!("path {p} out of range")));
        }
        Ok((0..self.inner.times.len()).map(|k| self.inner.state(k, p).to_vec()).collect())
    }
}

fn simulate(py: Python<'_>, kernel: &Arc<CoreKernel>, law: FlowField, initial: Vec<Vec<f64>>, dt: f64, seed: u64, stride: usize) -> PyResult<Trajectories> {
    let init = samples(initial)?;
    let opts = RolloutOptions {
        dt,
        seed,
        record_stride: stride,
        ..RolloutOptions::default()
    };
    let inner = py.detach(|| rollout(kernel, &law, &init, &opts)).map_err(py_err)?;
    Ok(Trajectories { inner })
}

/// Closed-form feedback for a Gaussian initial law and a Gaussian-mixture target.
#[pyclass(frozen, module = "bridgeflow_py")]
struct MixtureLaw {
    inner: Arc<MixtureLawContext>,
}

#[pymethods]
impl MixtureLaw {
    #[new]
    fn new(kernel: &BridgeKernel, p0: &GaussianMixture, p1: &GaussianMixture) -> PyResult<Self> {
        let inner = MixtureLawContext::new(kernel.inner.clone(), &p0.inner, p1.inner.clone()).map_err(py_err)?;
        Ok(MixtureLaw { inner: Arc::new(inner) })
    }

    fn feedback(&self, t: f64, xi: Vec<f64>) -> PyResult<Vec<f64>> {
        Ok(self.inner.mixture_feedback(t, &Vector::from_vec(xi)).map_err(py_err)?.iter().copied().collect())
    }

    fn responsibilities(&self, t: f64, xi: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.responsibilities(t, &Vector::from_vec(xi)).map_err(py_err)
    }

    #[pyo3(signature = (initial, dt=1e-3, seed=0, stride=1))]
    fn rollout(&self, py: Python<'_>, initial: Vec<Vec<f64>>, dt: f64, seed: u64, stride: usize) -> PyResult<Trajectories> {
        simulate(py, self.inner.kernel(), FlowField::ClosedForm(self.inner.clone()), initial, dt, seed, stride)
    }
}

/// Trained residual network `(t, ξ) -> u`.
#[pyclass(frozen, module = "bridgeflow_py")]
struct LearnedLaw {
    kernel: Arc<CoreKernel>,
    params: Arc<MlpParams>,
    loss_trace: Vec<f64>,
}

#[pymethods]
impl LearnedLaw {
    /// Fits the network to bridge samples between paired rows of `x` and `y`.
    #[staticmethod]
    #[pyo3(signature = (kernel, x, y, seed=0, iterations=None, batch_size=None, lr0=None))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        kernel: &BridgeKernel,
        x: Vec<Vec<f64>>,
        y: Vec<Vec<f64>>,
        seed: u64,
        iterations: Option<usize>,
        batch_size: Option<usize>,
        lr0: Option<f64>,
    ) -> PyResult<Self> {
        if x.len() != y.len() {
            return Err(PyValueError::new_err("x and y must hold the same number of rows"));
        }
        let pairs = x
            .into_iter()
            .zip(y)
            .map(|(a, b)| EndpointPair::new(Vector::from_vec(a), Vector::from_vec(b)).map_err(py_err))
            .collect::<PyResult<Vec<_>>>()?;
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            iterations: iterations.unwrap_or(d.iterations),
            dataset_size: pairs.len(),
            batch_size: batch_size.unwrap_or(d.batch_size),
            lr0: lr0.unwrap_or(d.lr0),
            seed,
            ..d
        };
        let k = kernel.inner.clone();
        let out = py.detach(|| trainer::train_on(&k, TrainingSet { pairs }, &cfg)).map_err(py_err)?;
        Ok(LearnedLaw {
            kernel: k,
            params: Arc::new(out.params),
            loss_trace: out.loss_trace,
        })
    }

    /// Loads a parameter file written by `bridgeflow train`.
    #[staticmethod]
    fn load(kernel: &BridgeKernel, path: PathBuf) -> PyResult<Self> {
        let params = bridgeflow::io::read_params(&path).map_err(py_err)?;
        Ok(LearnedLaw {
            kernel: kernel.inner.clone(),
            params: Arc::new(params),
            loss_trace: Vec::new(),
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        bridgeflow::io::write_params(&path, &self.params, "python").map_err(py_err)
    }

    #[getter]
    fn loss_trace(&self) -> Vec<f64> {
        self.loss_trace.clone()
    }

    fn feedback(&self, t: f64, xi: Vec<f64>) -> PyResult<Vec<f64>> {
        if xi.len() != self.params.state_dim() {
            return Err(PyValueError::new_err(format!("expected a state of length {}", self.params.state_dim())));
        }
        Ok(self.params.forward(self.kernel.clamp(t), &xi))
    }

    #[pyo3(signature = (initial, dt=1e-3, seed=0, stride=1))]
    fn rollout(&self, py: Python<'_>, initial: Vec<Vec<f64>>, dt: f64, seed: u64, stride: usize) -> PyResult<Trajectories> {
        simulate(py, &self.kernel, FlowField::Learned(self.params.clone()), initial, dt, seed, stride)
    }
}

#[pyfunction]
#[pyo3(signature = (x, y, bandwidth=2.0))]
fn mmd(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, bandwidth: f64) -> PyResult<f64> {
    metrics::mmd(&samples(x)?, &samples(y)?, &MmdConfig { bandwidth }).map_err(py_err)
}

/// Empirical W2; `subsample=None` solves one assignment on all points.
#[pyfunction]
#[pyo3(signature = (x, y, subsample=None, repeats=4, seed=0))]
fn w2(x: Vec<Vec<f64>>, y: Vec<Vec<f64>>, subsample: Option<usize>, repeats: usize, seed: u64) -> PyResult<(f64, f64)> {
    let cfg = match subsample {
        Some(k) => W2Config {
            subsample: k,
            repeats,
            exact: false,
        },
        None => W2Config {
            exact: true,
            repeats: 1,
            ..W2Config::default()
        },
    };
    let est = metrics::w2(&samples(x)?, &samples(y)?, &cfg, &mut rng::stream(seed, rng::EVAL)).map_err(py_err)?;
    Ok((est.value, est.std_err))
}

/// Gaussian KDE of 2-D points on a regular grid; returns `(xs, ys, values)`
/// with values laid out row by row in `y`.
#[pyfunction]
#[pyo3(signature = (points, nodes=101, pad=5.0, bandwidth=None))]
fn kde2(points: Vec<Vec<f64>>, nodes: usize, pad: f64, bandwidth: Option<f64>) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let pts = samples(points)?;
    let h = bandwidth.unwrap_or_else(|| metrics::scott_bandwidth(&pts));
    let grid = Grid2::covering(&pts, pad, h, nodes).map_err(py_err)?;
    let values = metrics::kde2(&pts, &grid, h).map_err(py_err)?;
    Ok((grid.xs(), grid.ys(), values))
}

/// Runs one CLI stage and returns the files it wrote.
#[pyfunction]
#[pyo3(signature = (command, config, out=None, seed=None))]
fn run(py: Python<'_>, command: &str, config: PathBuf, out: Option<PathBuf>, seed: Option<u64>) -> PyResult<Vec<PathBuf>> {
    let ctx = RunContext::load(&config, out, seed).map_err(py_err)?;
    py.detach(|| match command {
        "check" => commands::cmd_check(&ctx).map(|_| Vec::new()),
        "bridge" => commands::cmd_bridge(&ctx),
        "train" => commands::cmd_train(&ctx),
        "rollout" => commands::cmd_rollout(&ctx),
        "eval" => commands::cmd_eval(&ctx),
        other => Err(Error::InvalidArgument(format!("unknown command `{other}`"))),
    })
    .map_err(py_err)
}

#[pymodule]
fn bridgeflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<LinearSystem>()?;
    m.add_class::<BridgeKernel>()?;
    m.add_class::<GaussianMixture>()?;
    m.add_class::<Trajectories>()?;
    m.add_class::<MixtureLaw>()?;
    m.add_class::<LearnedLaw>()?;
    m.add_function(wrap_pyfunction!(mmd, m)?)?;
    m.add_function(wrap_pyfunction!(w2, m)?)?;
    m.add_function(wrap_pyfunction!(kde2, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
