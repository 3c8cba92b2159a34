//! Python bindings for the relvfl simulator.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;

use relvfl::allocation;
use relvfl::dataset;
use relvfl::evaluation::{self, PatternStats};
use relvfl::experiment::{run_experiment as run_exp, write_outputs, ExperimentConfig};
use relvfl::matrix::Matrix;
use relvfl::nn;
use relvfl::reliability;
use relvfl::rng::SimRng;
use relvfl::tree::{self, TreeParams};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Dataset", module = "pyrelvfl", from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: dataset::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    fn from_csv(path: PathBuf, label_column: &str) -> PyResult<Self> {
        Ok(Self {
            inner: dataset::load_csv(path, label_column).map_err(value_err)?,
        })
    }

    #[staticmethod]
    #[pyo3(signature = (n_samples, n_features, informative, noise_std=0.1, seed=0))]
    fn synthetic(
        n_samples: usize,
        n_features: usize,
        informative: Vec<usize>,
        noise_std: f64,
        seed: u64,
    ) -> PyResult<Self> {
        Ok(Self {
            inner: dataset::generate_synthetic(n_samples, n_features, &informative, noise_std, seed)
                .map_err(value_err)?,
        })
    }

    #[getter]
    fn n_samples(&self) -> usize {
        self.inner.n_samples()
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.n_features()
    }

    #[getter]
    fn feature_names(&self) -> Vec<String> {
        self.inner.feature_names().to_vec()
    }

    #[getter]
    fn labels(&self) -> Vec<f64> {
        self.inner.labels().to_vec()
    }

    fn features(&self) -> Vec<Vec<f64>> {
        let f = self.inner.features();
        (0..f.rows()).map(|r| f.row(r).to_vec()).collect()
    }

    /// Returns the standardized dataset and per-column `(mean, std)`.
    fn standardize(&self) -> (Self, Vec<f64>, Vec<f64>) {
        let (ds, st) = dataset::standardize(&self.inner);
        (Self { inner: ds }, st.mean, st.std)
    }

    /// `(train_indices, test_indices)`.
    fn split(&self, test_fraction: f64, seed: u64) -> PyResult<(Vec<usize>, Vec<usize>)> {
        let s = dataset::split(&self.inner, test_fraction, seed).map_err(value_err)?;
        Ok((s.train_indices, s.test_indices))
    }

    /// Impurity-decrease importances of a regression tree fit on `rows`
    /// (all rows when omitted).
    #[pyo3(signature = (rows=None, max_depth=8, min_samples_split=5))]
    fn tree_importance(
        &self,
        rows: Option<Vec<usize>>,
        max_depth: usize,
        min_samples_split: usize,
    ) -> PyResult<Vec<f64>> {
        let rows = rows.unwrap_or_else(|| (0..self.inner.n_samples()).collect());
        let x = self.inner.features().select_rows(&rows);
        let y = self.inner.labels_at(&rows);
        let params = TreeParams {
            max_depth,
            min_samples_split,
            min_impurity_decrease: 0.0,
        };
        let t = tree::fit_tree(&x, &y, &params).map_err(value_err)?;
        Ok(t.importance().map_err(value_err)?.0)
    }

    fn __repr__(&self) -> String {
        format!(
            "Dataset(n_samples={}, n_features={})",
            self.inner.n_samples(),
            self.inner.n_features()
        )
    }
}

/// Mean Huber loss and its gradient with respect to `pred`.
#[pyfunction]
#[pyo3(signature = (pred, target, delta=1.0))]
fn huber(pred: Vec<f64>, target: Vec<f64>, delta: f64) -> PyResult<(f64, Vec<f64>)> {
    nn::huber(&pred, &target, delta).map_err(value_err)
}

#[pyfunction]
#[pyo3(signature = (alpha, beta, n, seed=0))]
fn sample_beta(alpha: f64, beta: f64, n: usize, seed: u64) -> PyResult<Vec<f64>> {
    let mut rng = SimRng::seed_from_u64(seed);
    (0..n)
        .map(|_| reliability::sample_beta(alpha, beta, &mut rng).map_err(value_err))
        .collect()
}

#[pyfunction]
fn assign_tags(p: Vec<f64>) -> PyResult<Vec<u32>> {
    Ok(reliability::assign_tags(&p)
        .map_err(value_err)?
        .iter()
        .map(|x| x.tag)
        .collect())
}

#[pyfunction]
fn importance_shares(p: Vec<f64>) -> PyResult<Vec<f64>> {
    allocation::importance_shares(&p).map_err(value_err)
}

#[pyfunction]
fn partition_features(importance: Vec<f64>, shares: Vec<f64>) -> PyResult<Vec<Vec<usize>>> {
    Ok(allocation::partition_features(&importance, &shares)
        .map_err(value_err)?
        .assignments)
}

#[pyfunction]
fn allocate_embedding_dims(p: Vec<f64>, budget: usize) -> PyResult<Vec<usize>> {
    Ok(allocation::allocate_embedding_dims(&p, budget).map_err(value_err)?.dims)
}

/// Baseline split: `(column lists, embedding dims)`.
#[pyfunction]
#[pyo3(signature = (n_features, k, budget, seed=0))]
fn random_partition(n_features: usize, k: usize, budget: usize, seed: u64) -> PyResult<(Vec<Vec<usize>>, Vec<usize>)> {
    let mut rng = SimRng::seed_from_u64(seed);
    let (part, plan) = allocation::random_partition(n_features, k, budget, &mut rng).map_err(value_err)?;
    Ok((part.assignments, plan.dims))
}

#[pyfunction]
fn pattern_id(availability: Vec<bool>, tags: Vec<u32>) -> PyResult<Option<u32>> {
    Ok(evaluation::pattern_id(&availability, &tags)
        .map_err(value_err)?
        .map(|id| id.0))
}

/// `runs` holds one `{id: (count, loss_sum)}` dict per run, with id 0 for
/// all-absent rounds. Returns `{id: weighted loss}` over `1..2^k`.
#[pyfunction]
fn weighted_loss(k: usize, runs: Vec<HashMap<u32, (u64, f64)>>) -> PyResult<BTreeMap<u32, f64>> {
    if k == 0 || k > 31 {
        return Err(PyValueError::new_err("k must lie in 1..=31"));
    }
    let mut stats = Vec::with_capacity(runs.len());
    for run in &runs {
        let mut s = PatternStats::new(k);
        for (&m, &(count, sum)) in run {
            if m as usize >= s.counts.len() {
                return Err(PyValueError::new_err(format!("pattern id {m} out of range for k = {k}")));
            }
            s.counts[m as usize] = count;
            s.loss_sums[m as usize] = sum;
        }
        stats.push(s);
    }
    Ok(evaluation::weighted_loss(&stats, runs.len()))
}

#[pyfunction]
fn improvement_percent(proposed: BTreeMap<u32, f64>, baseline: BTreeMap<u32, f64>) -> PyResult<f64> {
    evaluation::improvement_percent(&proposed, &baseline).map_err(value_err)
}

/// Max relative error between backprop and central differences for a
/// freshly initialized relu network with the given layer sizes.
#[pyfunction]
#[pyo3(signature = (sizes, seed=0, rows=4, delta=1.0))]
fn grad_check(sizes: Vec<usize>, seed: u64, rows: usize, delta: f64) -> PyResult<f64> {
    use rand::Rng;
    let spec = nn::MlpSpec::relu(sizes);
    let mut model = nn::init_model(&spec, seed).map_err(value_err)?;
    let mut rng = SimRng::seed_from_u64(seed ^ 0x5eed);
    for layer in model.layers_mut() {
        for b in &mut layer.biases {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    let cols = spec.sizes[0];
    let x = Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect());
    let out = spec.output_dim();
    let y: Vec<f64> = (0..rows * out).map(|_| rng.random_range(-2.0..2.0)).collect();
    nn::grad_check(&model, &x, &y, delta).map_err(value_err)
}

/// The default experiment config as JSON.
#[pyfunction]
fn default_config() -> String {
    ExperimentConfig::default().to_json()
}

/// Runs an experiment from a JSON config (keys as in `default_config()`),
/// optionally writes all artifacts to `out_dir`, and returns the summary JSON.
#[pyfunction]
#[pyo3(signature = (config_json="{}", out_dir=None, jobs=1))]
fn run_experiment(py: Python<'_>, config_json: &str, out_dir: Option<PathBuf>, jobs: usize) -> PyResult<String> {
    let cfg = ExperimentConfig::from_json(config_json).map_err(value_err)?;
    py.detach(|| {
        let result = run_exp(&cfg, jobs).map_err(|e| match e.exit_code() {
            1 => value_err(e),
            _ => PyRuntimeError::new_err(e.to_string()),
        })?;
        let summary = match out_dir {
            Some(dir) => write_outputs(&result, &dir).map_err(|e| PyRuntimeError::new_err(e.to_string()))?,
            None => result
                .report
                .summary(serde_json::to_value(&result.config).expect("config serializes")),
        };
        serde_json::to_string_pretty(&summary).map_err(|e| PyRuntimeError::new_err(e.to_string()))
    })
}

#[pymodule]
fn pyrelvfl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(huber, m)?)?;
    m.add_function(wrap_pyfunction!(sample_beta, m)?)?;
    m.add_function(wrap_pyfunction!(assign_tags, m)?)?;
    m.add_function(wrap_pyfunction!(importance_shares, m)?)?;
    m.add_function(wrap_pyfunction!(partition_features, m)?)?;
    m.add_function(wrap_pyfunction!(allocate_embedding_dims, m)?)?;
    m.add_function(wrap_pyfunction!(random_partition, m)?)?;
    m.add_function(wrap_pyfunction!(pattern_id, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_loss, m)?)?;
    m.add_function(wrap_pyfunction!(improvement_percent, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(default_config, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
