//! Python module `rdm`: manifolds, targets and trained models.

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

use rdm_core::checkpoint::Checkpoint;
use rdm_core::manifold;
use rdm_core::objective::{ctelbo_estimate, kelbo, ode_log_likelihood, ObjectiveConfig, InferenceSampler};
use rdm_core::pipeline::{self, GridSpec, RunConfig};
use rdm_core::rng::RngStream;
use rdm_core::sde::OdeTolerances;
use rdm_core::targets::{Target as CoreTarget, TargetSpec};
use rdm_core::Error;

fn to_py(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyValueError::new_err(e.to_string()),
        4 => PyOSError::new_err(e.to_string()),
        _ => PyArithmeticError::new_err(e.to_string()),
    }
}

#[pyclass(frozen, module = "rdm")]
struct Manifold {
    inner: manifold::Manifold,
}

#[pymethods]
impl Manifold {
    #[staticmethod]
    fn sphere(dim: usize) -> PyResult<Self> {
        Ok(Manifold { inner: manifold::Manifold::sphere(dim).map_err(to_py)? })
    }

    #[staticmethod]
    fn torus(dim: usize) -> PyResult<Self> {
        Ok(Manifold { inner: manifold::Manifold::torus(dim).map_err(to_py)? })
    }

    #[staticmethod]
    #[pyo3(signature = (dim, curvature = -1.0))]
    fn hyperboloid(dim: usize, curvature: f64) -> PyResult<Self> {
        Ok(Manifold { inner: manifold::Manifold::hyperboloid(dim, curvature).map_err(to_py)? })
    }

    #[staticmethod]
    fn special_orthogonal(n: usize) -> PyResult<Self> {
        Ok(Manifold { inner: manifold::Manifold::special_orthogonal(n).map_err(to_py)? })
    }

    #[getter]
    fn name(&self) -> &'static str {
        self.inner.name()
    }

    #[getter]
    fn ambient_dim(&self) -> usize {
        self.inner.ambient_dim()
    }

    #[getter]
    fn intrinsic_dim(&self) -> usize {
        self.inner.intrinsic_dim()
    }

    fn contains(&self, x: Vec<f64>) -> bool {
        x.len() == self.inner.ambient_dim() && self.inner.contains(&x)
    }

    fn tangential_projection(&self, x: Vec<f64>, u: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.tangential_projection(&x, &u).map_err(to_py)
    }

    fn closest_point(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.closest_point(&x).map_err(to_py)
    }

    fn prior_log_density(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.prior_log_density(&x).map_err(to_py)
    }

    fn prior_sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut g = RngStream::new(seed, 0).generator();
        (0..n).map(|_| self.inner.prior_sample(&mut g)).collect()
    }

    fn __repr__(&self) -> String {
        format!("Manifold({})", serde_json::to_string(&self.inner).unwrap_or_default())
    }
}

#[pyclass(module = "rdm")]
struct Target {
    inner: CoreTarget,
}

#[pymethods]
impl Target {
    /// Builds a target from its JSON description.
    #[new]
    fn new(manifold: &Manifold, spec_json: &str) -> PyResult<Self> {
        let spec: TargetSpec = serde_json::from_str(spec_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(Target { inner: CoreTarget::new(manifold.inner, spec).map_err(to_py)? })
    }

    fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        self.inner.sample(&mut RngStream::new(seed, 0).generator(), n)
    }

    fn log_density(&self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.log_density(&x).map_err(to_py)
    }
}

/// A trained model: network, time proposal and path settings.
#[pyclass(module = "rdm")]
struct Model {
    inner: Checkpoint,
}

impl Model {
    fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig { path: self.inner.path, divergence: self.inner.divergence, sampler: InferenceSampler::Heun }
    }
}

#[pymethods]
impl Model {
    /// Trains from a JSON run configuration.
    #[staticmethod]
    fn train(py: Python<'_>, config_json: &str, seed: u64) -> PyResult<Self> {
        let config = RunConfig::from_json(config_json, None).map_err(to_py)?;
        let trainer = py.detach(|| pipeline::train_run(&config, seed, None, |_| {})).map_err(to_py)?;
        Ok(Model { inner: trainer.checkpoint() })
    }

    #[staticmethod]
    fn load(path: std::path::PathBuf) -> PyResult<Self> {
        Ok(Model { inner: Checkpoint::load(&path).map_err(to_py)? })
    }

    fn save(&self, path: std::path::PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(to_py)
    }

    #[getter]
    fn manifold(&self) -> Manifold {
        Manifold { inner: self.inner.manifold }
    }

    #[getter]
    fn horizon(&self) -> f64 {
        self.inner.path.horizon
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.network.num_params()
    }

    /// Generative samples; `lam = 1` integrates the probability-flow ODE.
    #[pyo3(signature = (n, seed, lam = 0.0, steps = None))]
    fn sample(&self, py: Python<'_>, n: usize, seed: u64, lam: f64, steps: Option<usize>) -> PyResult<Vec<Vec<f64>>> {
        py.detach(|| pipeline::generate_samples(&self.inner, n, lam, steps, seed)).map_err(to_py)
    }

    /// Exact log-density at `x` from the probability-flow ODE.
    #[pyo3(signature = (x, rtol = 1e-3, atol = 1e-3))]
    fn log_likelihood(&self, x: Vec<f64>, rtol: f64, atol: f64) -> PyResult<f64> {
        let tol = OdeTolerances { rtol, atol, ..OdeTolerances::default() };
        ode_log_likelihood(&self.inner.network, &self.inner.manifold, &x, self.inner.path.horizon, tol).map_err(to_py)
    }

    /// Importance-weighted lower bound with `k` paths.
    fn kelbo(&self, x: Vec<f64>, k: usize, seed: u64) -> PyResult<f64> {
        kelbo(&self.inner.network, &self.inner.manifold, &x, k, &self.objective(), RngStream::new(seed, 0)).map_err(to_py)
    }

    /// Monte Carlo ELBO over `points`: `(value, standard error)`.
    fn elbo(&self, points: Vec<Vec<f64>>, n_mc: usize, seed: u64) -> PyResult<(f64, f64)> {
        let e = ctelbo_estimate(&self.inner.network, &self.inner.proposal, &self.inner.manifold, &points, n_mc, &self.objective(), RngStream::new(seed, 0))
            .map_err(to_py)?;
        Ok((e.value, e.std_error))
    }

    /// `(point, cell volume, log-density)` for every cell of a grid.
    fn density_grid(&self, py: Python<'_>, grid: &str) -> PyResult<Vec<(Vec<f64>, f64, f64)>> {
        let spec = GridSpec::parse(&self.inner.manifold, grid).map_err(to_py)?;
        let rows = py.detach(|| pipeline::density_grid(&self.inner, &spec, OdeTolerances::default())).map_err(to_py)?;
        Ok(rows.into_iter().map(|(c, l)| (c.point, c.volume, l)).collect())
    }
}

#[pyfunction]
fn config_hash(config_json: &str) -> PyResult<String> {
    Ok(RunConfig::from_json(config_json, None).map_err(to_py)?.hash())
}

#[pymodule]
fn rdm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Manifold>()?;
    m.add_class::<Target>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(config_hash, m)?)?;
    Ok(())
}
