//! Python bindings: region graphs, smoothed inference, datasets, training
//! and prediction.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use slr_core::data::{gen_denoising, load_dataset, save_dataset, GenConfig};
use slr_core::inference::{self, Messages, Potentials, SmoothingConfig};
use slr_core::trainer::{self, CurvePoint};
use slr_core::{Error, OracleKind};

fn to_py(err: Error) -> PyErr {
    match err {
        Error::Io(e) => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_kind(name: &str) -> PyResult<OracleKind> {
    name.parse().map_err(to_py)
}

/// Pairwise region graph over discrete variables.
#[pyclass(name = "RegionGraph", module = "slr", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyRegionGraph {
    inner: slr_core::RegionGraph,
}

#[pymethods]
impl PyRegionGraph {
    #[new]
    fn new(num_vars: usize, num_labels: usize, edges: Vec<(usize, usize)>) -> PyResult<Self> {
        let inner = slr_core::RegionGraph::from_edges(num_vars, num_labels, &edges).map_err(to_py)?;
        Ok(Self { inner })
    }

    /// 4-connected `width x height` grid.
    #[staticmethod]
    fn grid(width: usize, height: usize, num_labels: usize) -> PyResult<Self> {
        let inner = slr_core::RegionGraph::grid(width, height, num_labels).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[getter]
    fn num_vars(&self) -> usize {
        self.inner.num_vars()
    }

    #[getter]
    fn num_labels(&self) -> usize {
        self.inner.num_labels()
    }

    #[getter]
    fn num_edges(&self) -> usize {
        self.inner.num_edges()
    }

    #[getter]
    fn table_len(&self) -> usize {
        self.inner.table_len()
    }

    #[getter]
    fn message_len(&self) -> usize {
        self.inner.message_len()
    }

    fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.inner.num_edges()).map(|e| self.inner.edge_vars(e)).collect()
    }

    /// Runs star-update sweeps from zero messages. Returns
    /// `(messages, dual, sweeps, residual)`.
    #[pyo3(signature = (theta, epsilon = 0.1, max_iters = 200, tol = 1e-6))]
    fn message_passing(
        &self,
        theta: Vec<f64>,
        epsilon: f64,
        max_iters: usize,
        tol: f64,
    ) -> PyResult<(Vec<f64>, f64, usize, f64)> {
        let g = &self.inner;
        let theta = Potentials::from_vec(g, theta).map_err(to_py)?;
        let config = SmoothingConfig::new(epsilon, max_iters).with_tolerance(tol);
        let out = inference::run_message_passing(g, &theta, Messages::zeros(g), &config).map_err(to_py)?;
        let dual = inference::dual_objective(g, &theta, &out.messages, epsilon).map_err(to_py)?;
        Ok((out.messages.as_slice().to_vec(), dual, out.iterations, out.residual))
    }

    fn dual_objective(&self, theta: Vec<f64>, messages: Vec<f64>, epsilon: f64) -> PyResult<f64> {
        let g = &self.inner;
        let theta = Potentials::from_vec(g, theta).map_err(to_py)?;
        let messages = Messages::from_vec(g, messages).map_err(to_py)?;
        inference::dual_objective(g, &theta, &messages, epsilon).map_err(to_py)
    }

    fn marginals(&self, theta: Vec<f64>, messages: Vec<f64>, epsilon: f64) -> PyResult<Vec<f64>> {
        let g = &self.inner;
        let theta = Potentials::from_vec(g, theta).map_err(to_py)?;
        let messages = Messages::from_vec(g, messages).map_err(to_py)?;
        let mu = inference::compute_marginals(g, &theta, &messages, epsilon).map_err(to_py)?;
        Ok(mu.as_slice().to_vec())
    }

    /// Smoothed optimum by exhaustive enumeration; small graphs only.
    fn brute_smoothed_value(&self, theta: Vec<f64>, epsilon: f64) -> PyResult<f64> {
        let theta = Potentials::from_vec(&self.inner, theta).map_err(to_py)?;
        inference::brute_smoothed_value(&self.inner, &theta, epsilon).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!(
            "RegionGraph(num_vars={}, num_labels={}, num_edges={})",
            self.inner.num_vars(),
            self.inner.num_labels(),
            self.inner.num_edges()
        )
    }
}

#[pyclass(name = "Dataset", module = "slr", frozen)]
struct PyDataset {
    inner: slr_core::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: load_dataset(path).map_err(to_py)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_dataset(path, &self.inner).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn num_labels(&self) -> usize {
        self.inner.num_labels()
    }

    #[getter]
    fn d_unary(&self) -> usize {
        self.inner.d_unary()
    }

    #[getter]
    fn d_pairwise(&self) -> usize {
        self.inner.d_pairwise()
    }

    fn graph(&self, index: usize) -> PyResult<PyRegionGraph> {
        Ok(PyRegionGraph { inner: self.example(index)?.graph().clone() })
    }

    fn labels(&self, index: usize) -> PyResult<Option<Vec<usize>>> {
        Ok(self.example(index)?.labels().map(<[usize]>::to_vec))
    }

    fn unary_features(&self, index: usize) -> PyResult<Vec<f64>> {
        Ok(self.example(index)?.unary_values().to_vec())
    }

    fn pairwise_features(&self, index: usize) -> PyResult<Vec<f64>> {
        Ok(self.example(index)?.pairwise_values().to_vec())
    }

    fn __repr__(&self) -> String {
        format!("Dataset(len={}, num_labels={})", self.inner.len(), self.inner.num_labels())
    }
}

impl PyDataset {
    fn example(&self, index: usize) -> PyResult<&slr_core::Example> {
        self.inner
            .examples()
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("example {index} out of range (len {})", self.inner.len())))
    }
}

#[pyclass(name = "Model", module = "slr", frozen)]
struct PyModel {
    inner: slr_core::Model,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: slr_core::Model::load(path).map_err(to_py)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(path).map_err(to_py)
    }

    #[staticmethod]
    #[pyo3(signature = (num_labels, d_unary, d_pairwise, epsilon = 0.1))]
    fn zero(num_labels: usize, d_unary: usize, d_pairwise: usize, epsilon: f64) -> PyResult<Self> {
        Ok(Self { inner: slr_core::Model::zero(num_labels, d_unary, d_pairwise, epsilon).map_err(to_py)? })
    }

    #[getter]
    fn unary_kind(&self) -> &'static str {
        self.inner.unary().kind().name()
    }

    #[getter]
    fn pairwise_kind(&self) -> &'static str {
        self.inner.pairwise().kind().name()
    }

    #[getter]
    fn epsilon(&self) -> f64 {
        self.inner.epsilon()
    }

    /// Labelings for every example of `data`.
    #[pyo3(signature = (data, mp_iters = 200, tol = 1e-6))]
    fn predict(&self, py: Python<'_>, data: &PyDataset, mp_iters: usize, tol: f64) -> PyResult<Vec<Vec<usize>>> {
        py.detach(|| trainer::predict_dataset(&self.inner, &data.inner, mp_iters, tol)).map_err(to_py)
    }

    /// Fraction of mislabeled variables over a labeled dataset.
    #[pyo3(signature = (data, mp_iters = 200, tol = 1e-6))]
    fn error(&self, py: Python<'_>, data: &PyDataset, mp_iters: usize, tol: f64) -> PyResult<f64> {
        py.detach(|| trainer::dataset_error(&self.inner, &data.inner, mp_iters, tol)).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Model(unary={}, pairwise={}, epsilon={})", self.unary_kind(), self.pairwise_kind(), self.epsilon())
    }
}

type Curve = Vec<(usize, f64, Option<f64>)>;

/// Synthetic binary denoising data as `(train, test)`.
#[pyfunction]
#[pyo3(signature = (num_train = 16, num_test = 16, size = 100, sigma = 10.0, seed = 0))]
fn generate_denoising(
    py: Python<'_>,
    num_train: usize,
    num_test: usize,
    size: usize,
    sigma: f64,
    seed: u64,
) -> PyResult<(PyDataset, PyDataset)> {
    let cfg = GenConfig { num_train, num_test, width: size, height: size, blur_sigma: sigma, seed };
    let (train, test) = py.detach(|| gen_denoising(&cfg)).map_err(to_py)?;
    Ok((PyDataset { inner: train }, PyDataset { inner: test }))
}

/// Trains a model. Returns `(model, curve)` where `curve` lists
/// `(iteration, train_error, test_error)` tuples.
#[pyfunction]
#[pyo3(signature = (
    train_data, test_data = None, unary = "linear", pairwise = "linear",
    iters = 20, mp_iters = 25, test_mp_iters = 200, epsilon = 0.1, seed = 0
))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    train_data: &PyDataset,
    test_data: Option<&PyDataset>,
    unary: &str,
    pairwise: &str,
    iters: usize,
    mp_iters: usize,
    test_mp_iters: usize,
    epsilon: f64,
    seed: u64,
) -> PyResult<(PyModel, Curve)> {
    let config = slr_core::TrainConfig {
        unary: parse_kind(unary)?,
        pairwise: parse_kind(pairwise)?,
        outer_iters: iters,
        mp_iters,
        test_mp_iters,
        epsilon,
        seed,
        ..Default::default()
    };
    let test = test_data.map(|t| &t.inner);
    let outcome = py.detach(|| trainer::train(&train_data.inner, test, &config)).map_err(to_py)?;
    let curve = outcome.curve.iter().map(|p: &CurvePoint| (p.iteration, p.train_error, p.test_error)).collect();
    Ok((PyModel { inner: outcome.model }, curve))
}

/// `rho * log(sum(exp(theta / rho)))` found by maximizing over the simplex.
#[pyfunction]
fn lse_by_simplex_maximization(theta: Vec<f64>, rho: f64) -> PyResult<f64> {
    inference::lse_by_simplex_maximization(&theta, rho).map_err(to_py)
}

#[pyfunction]
fn oracle_kinds() -> Vec<&'static str> {
    OracleKind::ALL.iter().map(|k| k.name()).collect()
}

#[pymodule]
fn slr(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRegionGraph>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_denoising, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(lse_by_simplex_maximization, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_kinds, m)?)?;
    Ok(())
}
