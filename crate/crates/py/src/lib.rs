//! Python bindings: market instances, the clearing engine, partner selection
//! and the centralized oracle.

use p2pclear_core::clearing::{self, ClearingConfig, EtaPolicy};
use p2pclear_core::experiments::{self, GridTemplate, ScenarioSpec};
use p2pclear_core::instance::Instance;
use p2pclear_core::oracle;
use p2pclear_core::selection::{self, SelectionConfig};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn to_py_err(err: p2pclear_core::Error) -> PyErr {
    PyValueError::new_err(err.to_string())
}

/// A market instance: participants, trading graph, optional grid and the
/// clearing configuration.
#[pyclass(name = "Instance", module = "p2pclear", skip_from_py_object)]
#[derive(Clone)]
struct PyInstance {
    inner: Instance,
}

#[pymethods]
impl PyInstance {
    /// Generate a seeded random instance. `template` is "none", "chain" or
    /// "ieee15".
    #[staticmethod]
    #[pyo3(signature = (template="none", producers=7, consumers=7, seed=0))]
    fn generate(template: &str, producers: usize, consumers: usize, seed: u64) -> PyResult<Self> {
        let grid = match template {
            "none" => GridTemplate::None,
            "chain" => GridTemplate::Chain,
            "ieee15" => GridTemplate::Ieee15,
            other => return Err(PyValueError::new_err(format!("unknown template '{}'", other))),
        };
        let spec = ScenarioSpec {
            n_producers: producers,
            n_consumers: consumers,
            grid,
            seed,
            ..ScenarioSpec::default()
        };
        Ok(Self { inner: experiments::gen_instance(&spec).map_err(to_py_err)? })
    }

    #[staticmethod]
    fn from_json(json: &str) -> PyResult<Self> {
        Ok(Self { inner: Instance::from_json(json).map_err(to_py_err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: Instance::load(path.as_ref()).map_err(to_py_err)? })
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py_err)
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path.as_ref()).map_err(to_py_err)
    }

    /// Prune trading partners by consumer preference; returns the pruned
    /// instance and (edges_before, edges_after).
    #[pyo3(signature = (benchmark=0.0))]
    fn select(&self, benchmark: f64) -> PyResult<(Self, (usize, usize))> {
        let cfg = SelectionConfig { benchmark, ..SelectionConfig::default() };
        let (pruned, report) =
            selection::apply_selection(&self.inner.graph, &cfg).map_err(to_py_err)?;
        let inst = self.inner.with_graph(pruned).map_err(to_py_err)?;
        Ok((Self { inner: inst }, (report.edges_before, report.edges_after)))
    }

    #[getter]
    fn producers(&self) -> usize {
        self.inner.graph.n_producers
    }

    #[getter]
    fn consumers(&self) -> usize {
        self.inner.graph.n_consumers
    }

    #[getter]
    fn edges(&self) -> usize {
        self.inner.graph.edge_count()
    }

    #[getter]
    fn spec_hash(&self) -> Option<String> {
        self.inner.spec_hash.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "Instance({} producers, {} consumers, {} edges)",
            self.inner.graph.n_producers,
            self.inner.graph.n_consumers,
            self.inner.graph.edge_count()
        )
    }
}

/// Outcome of one clearing run.
#[pyclass(name = "ClearingOutcome", module = "p2pclear", get_all)]
struct PyClearingOutcome {
    converged: bool,
    iterations: usize,
    welfare: f64,
    prices: Vec<f64>,
    sold: Vec<f64>,
    bought: Vec<f64>,
    mismatch: f64,
    wall_ms: f64,
    warnings: Vec<String>,
    /// Per-iteration (k, mismatch, welfare, dual value) tuples.
    trace: Vec<(usize, f64, f64, f64)>,
}

#[pymethods]
impl PyClearingOutcome {
    fn __repr__(&self) -> String {
        format!(
            "ClearingOutcome(converged={}, iterations={}, welfare={:.4})",
            self.converged, self.iterations, self.welfare
        )
    }
}

/// Clear the market with the distributed engine.
#[pyfunction]
#[pyo3(signature = (instance, accelerated=true, epsilon=None, max_iter=None, rho=None, eta=None))]
fn solve(
    instance: &PyInstance,
    accelerated: bool,
    epsilon: Option<f64>,
    max_iter: Option<usize>,
    rho: Option<f64>,
    eta: Option<f64>,
) -> PyResult<PyClearingOutcome> {
    let mut cfg = ClearingConfig { accelerated, ..instance.inner.clearing.clone() };
    if let Some(e) = epsilon {
        cfg.epsilon = e;
    }
    if let Some(m) = max_iter {
        cfg.max_iter = m;
    }
    if let Some(r) = rho {
        cfg.rho = r;
    }
    if let Some(e) = eta {
        cfg.eta = EtaPolicy::Constant(e);
    }
    let res = clearing::run(&instance.inner, &cfg).map_err(to_py_err)?;
    let mismatch = res.trace.last().map(|r| r.mismatch_inf).unwrap_or(f64::NAN);
    Ok(PyClearingOutcome {
        converged: res.converged,
        iterations: res.iterations,
        welfare: res.welfare,
        prices: res.prices,
        sold: res.allocation.x,
        bought: res.allocation.y,
        mismatch,
        wall_ms: res.wall_ms,
        warnings: res.warnings,
        trace: res
            .trace
            .iter()
            .map(|r| (r.k, r.mismatch_inf, r.welfare, r.dual_value))
            .collect(),
    })
}

/// Centralized social-welfare optimum.
#[pyclass(name = "OracleOutcome", module = "p2pclear", get_all)]
struct PyOracleOutcome {
    welfare: f64,
    allocation: Vec<f64>,
    prices: Vec<f64>,
    kkt_residual: f64,
}

#[pymethods]
impl PyOracleOutcome {
    fn __repr__(&self) -> String {
        format!(
            "OracleOutcome(welfare={:.4}, kkt_residual={:.2e})",
            self.welfare, self.kkt_residual
        )
    }
}

/// Solve the centralized program by projected gradient with an active-set
/// polish.
#[pyfunction]
#[pyo3(signature = (instance, network=false, tol=1e-6))]
fn solve_centralized(instance: &PyInstance, network: bool, tol: f64) -> PyResult<PyOracleOutcome> {
    let sol = oracle::solve_centralized(&instance.inner, network, tol).map_err(to_py_err)?;
    Ok(PyOracleOutcome {
        welfare: sol.welfare,
        allocation: sol.allocation.x,
        prices: sol.dual_prices,
        kkt_residual: sol.kkt_residual,
    })
}

/// Min-max normalization of one consumer's transaction coefficients.
#[pyfunction]
fn normalize_coefficients(alphas: Vec<f64>) -> PyResult<Vec<f64>> {
    selection::normalize_coefficients(&alphas).map_err(to_py_err)
}

/// Momentum recurrence used by the accelerated price update.
#[pyfunction]
fn gamma_next(k: usize, gamma: f64) -> f64 {
    clearing::gamma_next(k, gamma)
}

#[pymodule]
fn p2pclear(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyInstance>()?;
    m.add_class::<PyClearingOutcome>()?;
    m.add_class::<PyOracleOutcome>()?;
    m.add_function(wrap_pyfunction!(solve, m)?)?;
    m.add_function(wrap_pyfunction!(solve_centralized, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_coefficients, m)?)?;
    m.add_function(wrap_pyfunction!(gamma_next, m)?)?;
    Ok(())
}
