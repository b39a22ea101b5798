//! Python bindings for the recommendation benchmark core.

use std::collections::HashSet;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use recrag::ingest::{self, Delimiter, ItemId, RatingMatrix, UserId};
use recrag::metrics;
use recrag::mf::{self, MfConfig, MfModel, Observation};
use recrag::retrieval::{self, KnownRatings};
use recrag::runner::{self, ExperimentConfig, RunOptions, RunStatus};
use recrag::seed::derive_seed;
use recrag::synth::{self, ToyConfig};
use recrag::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn parse_delimiter(name: &str) -> Delimiter {
    match name {
        "tab" | "\t" => Delimiter::Tab,
        "::" | "double_colon" => Delimiter::DoubleColon,
        "," | "comma" => Delimiter::Comma,
        other => Delimiter::Custom(other.to_string()),
    }
}

/// A loaded rating matrix with dense user and item indices.
#[pyclass(name = "Ratings", frozen)]
struct PyRatings {
    inner: RatingMatrix,
}

#[pymethods]
impl PyRatings {
    #[getter]
    fn n_users(&self) -> usize {
        self.inner.n_users()
    }

    #[getter]
    fn n_items(&self) -> usize {
        self.inner.n_items()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// List of `(user, item, rating, timestamp)` tuples.
    fn entries(&self) -> Vec<(UserId, ItemId, u8, i64)> {
        self.inner
            .entries()
            .iter()
            .map(|r| (r.user, r.item, r.rating, r.timestamp))
            .collect()
    }

    fn raw_user_id(&self, user: UserId) -> PyResult<String> {
        if user as usize >= self.inner.n_users() {
            return Err(PyValueError::new_err(format!("user {user} out of range")));
        }
        Ok(self.inner.raw_user_id(user).to_string())
    }

    /// `(known, masked)` item ids per user for the default seeded split.
    fn split(&self, seed: u64) -> PyResult<Vec<(Vec<ItemId>, Vec<ItemId>)>> {
        self.inner
            .by_user()
            .iter()
            .enumerate()
            .map(|(u, rows)| {
                let user_seed = derive_seed(seed, "split", &[(u as u64).into()]);
                let s = ingest::split_user(rows, user_seed, Default::default())
                    .map_err(to_py)?;
                let mut known: Vec<ItemId> = s.known_items().into_iter().collect();
                known.sort_unstable();
                Ok((known, s.masked_items()))
            })
            .collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "Ratings(n_users={}, n_items={}, len={})",
            self.inner.n_users(),
            self.inner.n_items(),
            self.inner.len()
        )
    }
}

#[pyfunction]
#[pyo3(signature = (path, delimiter = "tab"))]
fn load_ratings(path: PathBuf, delimiter: &str) -> PyResult<PyRatings> {
    let inner = ingest::load_ratings(path, &parse_delimiter(delimiter)).map_err(to_py)?;
    Ok(PyRatings { inner })
}

#[pyfunction]
#[pyo3(signature = (seed = 0, n_users = 20, n_items = 80))]
fn toy_ratings(seed: u64, n_users: usize, n_items: usize) -> PyResult<PyRatings> {
    let config = ToyConfig {
        seed,
        n_users,
        n_items,
        ..Default::default()
    };
    Ok(PyRatings {
        inner: synth::toy_ratings(&config).map_err(to_py)?,
    })
}

#[pyfunction]
fn ndcg_at_10(recommended: Vec<ItemId>, masked: HashSet<ItemId>) -> PyResult<f64> {
    metrics::ndcg_at_10(&recommended, &masked).map_err(to_py)
}

#[pyfunction]
fn hit_at_10(recommended: Vec<ItemId>, masked: HashSet<ItemId>) -> PyResult<f64> {
    metrics::hit_at_10(&recommended, &masked).map_err(to_py)
}

#[pyfunction]
fn parse_recommendations(text: &str, n_items: usize) -> Vec<ItemId> {
    recrag::gateway::parse_recommendations(text, n_items).items
}

#[pyfunction]
fn cosine_similarity(mut a: Vec<(ItemId, u8)>, mut b: Vec<(ItemId, u8)>) -> f64 {
    a.sort_unstable();
    b.sort_unstable();
    retrieval::cosine_similarity(&a, &b)
}

/// Top-k neighbors of `target` over per-user `(item, rating)` rows.
#[pyfunction]
fn top_k_neighbors(rows: Vec<Vec<(ItemId, u8)>>, n_items: usize, target: UserId, k: usize) -> PyResult<Vec<(UserId, f64)>> {
    let known = KnownRatings::from_rows(rows, n_items);
    let neighbors = retrieval::top_k_neighbors(&known, target, k).map_err(to_py)?;
    Ok(neighbors.into_iter().map(|n| (n.user, n.similarity)).collect())
}

#[pyclass(name = "MfModel", frozen)]
struct PyMfModel {
    inner: MfModel,
}

#[pymethods]
impl PyMfModel {
    /// Trains on `(user, item, rating)` triples.
    #[staticmethod]
    #[pyo3(signature = (observations, n_users, n_items, dim = 32, epochs = 200, learning_rate = 0.01, l2 = 0.05, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        observations: Vec<(UserId, ItemId, f64)>,
        n_users: usize,
        n_items: usize,
        dim: usize,
        epochs: usize,
        learning_rate: f64,
        l2: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let data: Vec<Observation> = observations
            .into_iter()
            .map(|(user, item, rating)| Observation { user, item, rating })
            .collect();
        let config = MfConfig {
            dim,
            epochs,
            learning_rate,
            l2,
            seed,
            ..Default::default()
        };
        let (inner, _) = mf::train(&data, n_users, n_items, &config).map_err(to_py)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: MfModel::from_bytes(data).map_err(to_py)?,
        })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new_bound(py, &self.inner.to_bytes())
    }

    fn predict(&self, user: UserId, item: ItemId) -> PyResult<f64> {
        mf::predict(&self.inner, user, item).map_err(to_py)
    }

    #[pyo3(signature = (user, known_items = HashSet::new()))]
    fn recommend(&self, user: UserId, known_items: HashSet<ItemId>) -> PyResult<Vec<ItemId>> {
        Ok(mf::recommend_top10(&self.inner, user, &known_items).map_err(to_py)?.items)
    }

    fn rmse(&self, observations: Vec<(UserId, ItemId, f64)>) -> f64 {
        let data: Vec<Observation> = observations
            .into_iter()
            .map(|(user, item, rating)| Observation { user, item, rating })
            .collect();
        mf::rmse(&self.inner, &data)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }
}

/// Runs (or resumes) the sweep described by a TOML config and returns a
/// summary dict.
#[pyfunction]
#[pyo3(signature = (config_path, live = false, max_new_trials = None))]
fn run_experiment<'py>(
    py: Python<'py>,
    config_path: PathBuf,
    live: bool,
    max_new_trials: Option<usize>,
) -> PyResult<Bound<'py, PyDict>> {
    let config = ExperimentConfig::load(&config_path).map_err(to_py)?;
    let options = RunOptions {
        live,
        max_new_trials,
        backend: None,
    };
    let summary = py.allow_threads(|| runner::run(&config, options)).map_err(to_py)?;
    let out = PyDict::new_bound(py);
    let status = match &summary.status {
        RunStatus::Completed => "completed".to_string(),
        RunStatus::Aborted(reason) => format!("aborted: {reason}"),
    };
    out.set_item("status", status)?;
    out.set_item("exit_code", summary.exit_code())?;
    out.set_item("config_hash", &summary.config_hash)?;
    out.set_item("total_trials", summary.total_trials)?;
    out.set_item("new_trials", summary.new_trials)?;
    out.set_item("failed", summary.failed)?;
    out.set_item("failure_rate", summary.failure_rate())?;
    out.set_item("output_dir", config.output_dir)?;
    Ok(out)
}

#[pymodule]
fn recrag_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRatings>()?;
    m.add_class::<PyMfModel>()?;
    m.add_function(wrap_pyfunction!(load_ratings, m)?)?;
    m.add_function(wrap_pyfunction!(toy_ratings, m)?)?;
    m.add_function(wrap_pyfunction!(ndcg_at_10, m)?)?;
    m.add_function(wrap_pyfunction!(hit_at_10, m)?)?;
    m.add_function(wrap_pyfunction!(parse_recommendations, m)?)?;
    m.add_function(wrap_pyfunction!(cosine_similarity, m)?)?;
    m.add_function(wrap_pyfunction!(top_k_neighbors, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
